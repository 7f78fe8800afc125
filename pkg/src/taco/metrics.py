"""Latent-space evaluation: cross-modal alignment, robustness, clustering, PCA export."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.cluster import KMeans

from .synthdata import (
    LEVELS,
    InstanceSample,
    apply_rigid_perturbation,
    sample_rigid_perturbation,
    token_region_labels,
)
from .topology import cosine_distances, mutual_nearest_matches


@dataclass
class AlignmentReport:
    """Same-instance cross-modal statistics with identity as ground-truth correspondence.

    Distances are cosine distances; accuracies and ratios are percentages.
    For a single matrix pair the ``*_std`` of distances are over tokens; for
    aggregated reports every ``*_std`` is the spread of per-subject values.
    """

    pos_cos_dist: float
    pos_cos_dist_std: float
    neg_cos_dist: float
    neg_cos_dist_std: float
    hard_neg_cos_dist: float
    hard_neg_cos_dist_std: float
    neg_pos_gap: float
    hard_neg_pos_gap: float
    top1_retrieval: float
    top5_retrieval: float
    pairwise_rank_acc: float
    mnn_selected_ratio: float
    top1_retrieval_std: float = 0.0
    top5_retrieval_std: float = 0.0
    pairwise_rank_acc_std: float = 0.0
    mnn_selected_ratio_std: float = 0.0
    n_tokens: int = 0
    n_subjects: int = 1

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class RobustnessRow:
    level: str
    pos_cos_dist: float
    top1_retrieval: float
    mnn_selected_ratio: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _retrieval_ranks(d: np.ndarray) -> np.ndarray:
    """Rank of the true match in each row (0 = best); ties go to the lower index."""
    k = d.shape[0]
    pos = np.diag(d)[:, None]
    lower = np.arange(k)[None, :] < np.arange(k)[:, None]
    return (d < pos).sum(axis=1) + ((d == pos) & lower).sum(axis=1)


def alignment_metrics(za, zb, mask: np.ndarray | None = None) -> AlignmentReport:
    """Alignment of ``zb`` to ``za`` under the identity correspondence.

    ``mask`` optionally restricts anchors and candidates to a token subset
    (e.g. foreground tokens).
    """
    za = np.asarray(getattr(za, "values", za), dtype=np.float64)
    zb = np.asarray(getattr(zb, "values", zb), dtype=np.float64)
    if za.shape[0] != zb.shape[0]:
        raise ValueError(f"token counts differ: {za.shape[0]} vs {zb.shape[0]}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        za, zb = za[mask], zb[mask]
    k = za.shape[0]
    if k < 2:
        raise ValueError("alignment metrics need at least 2 tokens")
    d = cosine_distances(za, zb)
    pos = np.diag(d)
    off = ~np.eye(k, dtype=bool)
    neg = d[off]
    hard = np.where(off, d, np.inf).min(axis=1)
    ranks = _retrieval_ranks(d)
    rank_acc = np.mean((pos[:, None] < d)[off])
    matches = mutual_nearest_matches(za, zb).pairs
    mnn = np.count_nonzero(matches[:, 0] == matches[:, 1]) / k
    return AlignmentReport(
        pos_cos_dist=float(pos.mean()),
        pos_cos_dist_std=float(pos.std()),
        neg_cos_dist=float(neg.mean()),
        neg_cos_dist_std=float(neg.std()),
        hard_neg_cos_dist=float(hard.mean()),
        hard_neg_cos_dist_std=float(hard.std()),
        neg_pos_gap=float(neg.mean()) - float(pos.mean()),
        hard_neg_pos_gap=float(hard.mean()) - float(pos.mean()),
        top1_retrieval=100.0 * float(np.mean(ranks < 1)),
        top5_retrieval=100.0 * float(np.mean(ranks < 5)),
        pairwise_rank_acc=100.0 * float(rank_acc),
        mnn_selected_ratio=100.0 * float(mnn),
        n_tokens=k,
    )


_MEAN_FIELDS = ("pos_cos_dist", "neg_cos_dist", "hard_neg_cos_dist", "top1_retrieval",
                "top5_retrieval", "pairwise_rank_acc", "mnn_selected_ratio")
_STD_OF = {"pos_cos_dist": "pos_cos_dist_std", "neg_cos_dist": "neg_cos_dist_std",
           "hard_neg_cos_dist": "hard_neg_cos_dist_std", "top1_retrieval": "top1_retrieval_std",
           "top5_retrieval": "top5_retrieval_std", "pairwise_rank_acc": "pairwise_rank_acc_std",
           "mnn_selected_ratio": "mnn_selected_ratio_std"}


def aggregate_reports(per_subject: list[AlignmentReport]) -> AlignmentReport:
    """Mean over subjects with the across-subject standard deviation."""
    if not per_subject:
        raise ValueError("no reports to aggregate")
    vals = {f: np.array([getattr(r, f) for r in per_subject]) for f in _MEAN_FIELDS}
    kw = {f: float(v.mean()) for f, v in vals.items()}
    kw.update({_STD_OF[f]: float(v.std()) for f, v in vals.items()})
    kw["neg_pos_gap"] = kw["neg_cos_dist"] - kw["pos_cos_dist"]
    kw["hard_neg_pos_gap"] = kw["hard_neg_cos_dist"] - kw["pos_cos_dist"]
    kw["n_tokens"] = int(sum(r.n_tokens for r in per_subject))
    kw["n_subjects"] = sum(r.n_subjects for r in per_subject)
    return AlignmentReport(**kw)


def _mean_report(reports: list[AlignmentReport]) -> AlignmentReport:
    out = aggregate_reports(reports)
    out.n_subjects = 1
    return out


def subject_report(encoder, instance: InstanceSample, foreground: bool = False) -> AlignmentReport:
    """Average over all ordered modality pairs of one instance."""
    tokens = {m: encoder.tokens(instance.volumes[m]) for m in instance.modalities}
    mask = None
    if foreground:
        mask = token_region_labels(instance.labels, encoder.grid) > 0
    reports = [alignment_metrics(tokens[a], tokens[b], mask)
               for a in instance.modalities for b in instance.modalities if a != b]
    return _mean_report(reports)


def evaluate_alignment(encoder, instances: list[InstanceSample], foreground: bool = False,
                       pooled: bool = False) -> AlignmentReport:
    """Per-subject mean +- std (default) or token-pooled metrics over ``instances``."""
    reports = [subject_report(encoder, s, foreground) for s in instances]
    if not pooled:
        return aggregate_reports(reports)
    weights = np.array([r.n_tokens for r in reports], dtype=float)
    kw = {f: float(np.average([getattr(r, f) for r in reports], weights=weights))
          for f in _MEAN_FIELDS}
    out = aggregate_reports(reports)
    for f, v in kw.items():
        setattr(out, f, v)
    out.neg_pos_gap = out.neg_cos_dist - out.pos_cos_dist
    out.hard_neg_pos_gap = out.hard_neg_cos_dist - out.pos_cos_dist
    return out


def robustness_sweep(encoder, instance: InstanceSample, levels=LEVELS, seed=0,
                     modalities: tuple | None = None) -> list[RobustnessRow]:
    """Perturb one modality rigidly at each level and re-evaluate alignment.

    ``modalities = (fixed, moved)`` defaults to the first two modalities.
    """
    if len(instance.modalities) < 2:
        raise ValueError("robustness sweep needs an instance with >= 2 modalities")
    fixed, moved = modalities or tuple(instance.modalities[:2])
    z_fixed = encoder.tokens(instance.volumes[fixed])
    rows = []
    for level in levels:
        vol = instance.volumes[moved]
        if level != "clean":
            vol = apply_rigid_perturbation(vol, sample_rigid_perturbation(level, seed))
        rep = alignment_metrics(z_fixed, encoder.tokens(vol))
        rows.append(RobustnessRow(level, rep.pos_cos_dist, rep.top1_retrieval,
                                  rep.mnn_selected_ratio))
    return rows


def robustness_table(encoder, instances: list[InstanceSample], levels=LEVELS,
                     seeds=range(5)) -> list[RobustnessRow]:
    """Robustness rows averaged over instances and perturbation seeds."""
    acc = {lv: [] for lv in levels}
    for s in instances:
        for seed in seeds:
            for row in robustness_sweep(encoder, s, levels, [int(seed), s.instance_id]):
                acc[row.level].append(row)
    return [RobustnessRow(lv,
                          float(np.mean([r.pos_cos_dist for r in acc[lv]])),
                          float(np.mean([r.top1_retrieval for r in acc[lv]])),
                          float(np.mean([r.mnn_selected_ratio for r in acc[lv]])))
            for lv in levels]


def mnn_region_agreement(za, zb, labels_a, labels_b) -> float:
    """Fraction (%) of mutual-nearest-neighbor pairs whose region labels agree."""
    pairs = mutual_nearest_matches(za, zb).pairs
    if len(pairs) == 0:
        return 0.0
    la, lb = np.asarray(labels_a), np.asarray(labels_b)
    return 100.0 * float(np.mean(la[pairs[:, 0]] == lb[pairs[:, 1]]))


def cross_instance_agreement(encoder, instances: list[InstanceSample]) -> float:
    """Mean MNN-vs-region agreement over ordered pairs of distinct instances and all modality pairs."""
    tokens = {(s.instance_id, m): encoder.tokens(s.volumes[m]) for s in instances for m in s.modalities}
    labels = {s.instance_id: token_region_labels(s.labels, encoder.grid) for s in instances}
    vals = [mnn_region_agreement(tokens[(a.instance_id, i)], tokens[(b.instance_id, t)],
                                 labels[a.instance_id], labels[b.instance_id])
            for a in instances for b in instances if a.instance_id != b.instance_id
            for i in a.modalities for t in b.modalities]
    if not vals:
        raise ValueError("cross-instance agreement needs at least 2 instances")
    return float(np.mean(vals))


def anatomy_cluster_purity(tokens, token_labels, k_clusters: int | None = None, seed: int = 0,
                           max_iter: int = 100) -> float:
    """k-means purity of L2-normalised tokens against region labels.

    purity = sum over clusters of the majority-label count, divided by K.
    """
    x = np.asarray(getattr(tokens, "values", tokens), dtype=np.float64)
    labels = np.asarray(token_labels)
    if k_clusters is None:
        k_clusters = len(np.unique(labels))
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if (norms < 1e-12).any():
        raise ValueError("zero-norm token in purity input")
    x = x / norms
    if len(np.unique(x, axis=0)) < k_clusters:
        raise ValueError(f"fewer distinct tokens than clusters ({k_clusters})")
    km = KMeans(n_clusters=k_clusters, init="k-means++", n_init=1, max_iter=max_iter,
                random_state=seed, algorithm="lloyd")
    assign = km.fit_predict(x)
    return purity_score(assign, labels)


def purity_score(assign: np.ndarray, labels: np.ndarray) -> float:
    _, lab = np.unique(labels, return_inverse=True)
    table = np.zeros((assign.max() + 1, lab.max() + 1), dtype=np.int64)
    np.add.at(table, (assign, lab), 1)
    return float(table.max(axis=1).sum() / len(labels))


def purity_null_band(token_labels, dim: int, n_trials: int = 1000, seed: int = 0,
                     k_clusters: int | None = None, quantiles=(0.005, 0.995)) -> tuple:
    """Monte-Carlo purity of random Gaussian tokens with the same labels.

    Returns ``(low, high, mean)`` at the given quantiles.
    """
    labels = np.asarray(token_labels)
    rng = np.random.default_rng(seed)
    vals = np.array([
        anatomy_cluster_purity(rng.standard_normal((len(labels), dim)), labels, k_clusters,
                               seed=t)
        for t in range(n_trials)
    ])
    lo, hi = np.quantile(vals, quantiles)
    return float(lo), float(hi), float(vals.mean())


def pca_fit(tokens, dims: int = 2):
    """Mean-centred PCA via eigen-decomposition of the F x F covariance (1/K).

    Returns ``(coords, eigenvalues_desc, components)``.  Each component is
    signed so that its largest-magnitude entry is positive.
    """
    x = np.asarray(getattr(tokens, "values", tokens), dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("pca needs a K x F matrix with K >= 2")
    xc = x - x.mean(axis=0)
    if not np.any(np.abs(xc) > 0):
        raise ValueError("rank-0 input: all tokens identical")
    cov = xc.T @ xc / x.shape[0]
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    comps = evecs[:, :dims].copy()
    for c in range(comps.shape[1]):
        lead = np.argmax(np.abs(comps[:, c]))
        if comps[lead, c] < 0:
            comps[:, c] *= -1
    if comps.shape[1] < dims:
        comps = np.pad(comps, ((0, 0), (0, dims - comps.shape[1])))
    return xc @ comps, evals, comps


def pca_project(tokens, dims: int = 2) -> np.ndarray:
    return pca_fit(tokens, dims)[0]


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------

def report_json(obj) -> str:
    def plain(o):
        if dataclasses.is_dataclass(o):
            return o.to_dict() if hasattr(o, "to_dict") else dataclasses.asdict(o)
        if isinstance(o, dict):
            return {k: plain(v) for k, v in o.items()}
        if isinstance(o, (list, tuple)):
            return [plain(v) for v in o]
        if isinstance(o, np.generic):
            return o.item()
        return o

    return json.dumps(plain(obj), indent=2, sort_keys=True) + "\n"


def write_report(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report_json(obj))
    return path


def robustness_csv(rows: list[RobustnessRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["level", "pos_cos_dist", "top1_retrieval", "mnn_selected_ratio"])
    for r in rows:
        w.writerow([r.level, repr(r.pos_cos_dist), repr(r.top1_retrieval),
                    repr(r.mnn_selected_ratio)])
    return buf.getvalue()


def embedding_csv(encoder, instance: InstanceSample, modalities=None) -> str:
    """PCA coordinates of one instance's tokens, pooled over modalities."""
    modalities = list(modalities or instance.modalities)
    region = token_region_labels(instance.labels, encoder.grid)
    tokens = np.concatenate([encoder.tokens(instance.volumes[m]) for m in modalities])
    coords = pca_project(tokens, 2)
    k = len(region)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["token_id", "region_label", "modality", "pc1", "pc2"])
    for n, m in enumerate(modalities):
        for t in range(k):
            pc1, pc2 = coords[n * k + t]
            w.writerow([t, int(region[t]), m, repr(float(pc1)), repr(float(pc2))])
    return buf.getvalue()
