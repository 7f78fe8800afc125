"""Reconstruction, intra-instance and inter-instance ranking losses.

Token features are passed around as a mapping ``{(instance_id, modality): Tensor}``.
Selection (neighborhoods, negatives, MNN matches) always runs on detached
values; gradients flow only through the triplet distances evaluated on the
live target matrix.
"""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .topology import (
    Correspondence,
    MatchSet,
    TripletSet,
    build_inter_triplets,
    build_intra_triplets,
    cosine_distances,
    mutual_nearest_matches,
    sample_negatives,
    topk_neighbors,
)

logger = logging.getLogger(__name__)

DEFAULT_DELTA = 0.3
DEFAULT_OMEGA = 5


@dataclass
class TripletStats:
    n_triplets: int = 0
    n_active: int = 0

    def __iadd__(self, other):
        self.n_triplets += other.n_triplets
        self.n_active += other.n_active
        return self


@dataclass
class LossReport:
    """Scalar loss values for one step plus the differentiable total."""

    l_uni: float
    l_intra: float
    l_inter: float
    l_total: float
    triplet_counts: dict = field(default_factory=dict)
    active_fraction: float = 0.0
    total: Tensor | None = field(default=None, repr=False, compare=False)


def pair_seed(seed: int, step: int, h: int, i: int, g: int, t: int) -> list[int]:
    """Seed key for negative sampling of the directed term (h, i) -> (g, t).

    An intra term (h, i -> j) uses the key of (h, i) -> (h, j), so it draws the
    same negatives as the inter term with g == h.
    """
    return [int(seed), int(step), int(h), int(i), int(g), int(t)]


def reconstruction_loss(xhat, x) -> Tensor:
    return ad.mse(xhat, x)


def _check_delta(delta: float) -> None:
    if not 0 < delta < 2:
        raise ValueError(f"margin delta must lie in (0, 2), got {delta}")


def triplet_hinge_terms(z_target, triples: TripletSet, delta: float) -> Tensor:
    """Per-triplet ``[d(a, p) - d(a, n) + delta]_+`` on the live target matrix."""
    d_pos = ad.cosine_distance_pairs(z_target, triples.anchors, triples.positives)
    d_neg = ad.cosine_distance_pairs(z_target, triples.anchors, triples.negatives)
    return ad.hinge(d_pos - d_neg + delta)


def triplet_hinge_mean(z_target, triples: TripletSet, delta: float = DEFAULT_DELTA,
                       stats: TripletStats | None = None) -> Tensor:
    """Mean hinge over ``triples``; exactly 0 for an empty set."""
    if len(triples) == 0:
        return Tensor(0.0)
    terms = triplet_hinge_terms(z_target, triples, delta)
    if stats is not None:
        stats += TripletStats(len(triples), int(np.count_nonzero(terms.values > 0)))
    return ad.tmean(terms)


def _directed_term(z_src, z_tgt, omega, delta, rng, matches: MatchSet | None,
                   nbrs=None, stats=None, source=None) -> Tensor:
    if nbrs is None:
        nbrs = topk_neighbors(cosine_distances(z_src, z_src), omega)
    negs = sample_negatives(nbrs, omega, rng)
    if matches is None:
        triples = build_intra_triplets(nbrs, negs, Correspondence(), source)
    else:
        triples = build_inter_triplets(nbrs, negs, matches, source)
    return triplet_hinge_mean(z_tgt, triples, delta, stats)


def _by_instance(features: Mapping) -> dict:
    groups = defaultdict(list)
    for h, m in features:
        groups[h].append(m)
    return {h: sorted(ms) for h, ms in sorted(groups.items())}


def intra_loss_with_stats(features: Mapping, omega: int = DEFAULT_OMEGA,
                          delta: float = DEFAULT_DELTA, seed: int = 0, step: int = 0):
    _check_delta(delta)
    stats = TripletStats()
    terms = []
    for h, mods in _by_instance(features).items():
        if len(mods) < 2:
            logger.warning("instance %s has a single modality; skipped in intra loss", h)
            continue
        for i in mods:
            z_i = features[(h, i)]
            nbrs = topk_neighbors(cosine_distances(z_i, z_i), omega)
            for j in mods:
                if j == i:
                    continue
                z_j = features[(h, j)]
                if z_j.shape[0] != z_i.shape[0]:
                    raise ValueError(f"instance {h}: token counts differ across modalities")
                rng = np.random.default_rng(pair_seed(seed, step, h, i, h, j))
                terms.append(_directed_term(z_i, z_j, omega, delta, rng, None, nbrs, stats,
                                            {"h": h, "i": i, "j": j}))
    if not terms:
        return Tensor(0.0), stats
    return _mean_of(terms), stats


def directional_intra_term(z_i, z_j, h: int, i: int, j: int, omega: int = DEFAULT_OMEGA,
                           delta: float = DEFAULT_DELTA, seed: int = 0, step: int = 0) -> Tensor:
    """The single intra term that enforces modality ``i``'s neighborhoods on modality ``j`` of instance ``h``."""
    _check_delta(delta)
    z_i, z_j = ad.as_tensor(z_i), ad.as_tensor(z_j)
    rng = np.random.default_rng(pair_seed(seed, step, h, i, h, j))
    return _directed_term(z_i, z_j, omega, delta, rng, None)


def intra_loss(features: Mapping, omega: int = DEFAULT_OMEGA, delta: float = DEFAULT_DELTA,
               seed: int = 0, step: int = 0) -> Tensor:
    """Cross-modal neighborhood-ranking loss within each instance.

    Neighborhoods come from the detached source modality; the triplets are
    scored on the target modality of the same instance under the identity
    token correspondence.  Averaged over instances and ordered modality pairs.
    """
    return intra_loss_with_stats(features, omega, delta, seed, step)[0]


def inter_loss_with_stats(features: Mapping, pairing: Sequence, omega: int = DEFAULT_OMEGA,
                          delta: float = DEFAULT_DELTA, seed: int = 0, step: int = 0,
                          matches: Mapping | None = None):
    _check_delta(delta)
    stats = TripletStats()
    terms = []
    for h, i, g, t in pairing:
        forced = None if matches is None else matches.get((h, i, g, t))
        if h == g and forced is None:
            raise ValueError(f"inter pairing ({h}, {i}, {g}, {t}) pairs an instance with itself")
        z_src, z_tgt = features[(h, i)], features[(g, t)]
        found = forced if forced is not None else mutual_nearest_matches(z_src, z_tgt)
        rng = np.random.default_rng(pair_seed(seed, step, h, i, g, t))
        terms.append(_directed_term(z_src, z_tgt, omega, delta, rng, found, stats=stats,
                                    source={"h": h, "i": i, "g": g, "t": t}))
    if not terms:
        return Tensor(0.0), stats
    return _mean_of(terms), stats


def inter_loss(features: Mapping, pairing: Sequence, omega: int = DEFAULT_OMEGA,
               delta: float = DEFAULT_DELTA, seed: int = 0, step: int = 0,
               matches: Mapping | None = None) -> Tensor:
    """Cross-instance ranking loss through mutual-nearest-neighbor pseudo-correspondence.

    ``pairing`` lists directed terms ``(h, i, g, t)``: neighborhoods from
    instance ``h`` / modality ``i`` are enforced on instance ``g`` / modality
    ``t``.  Pairs whose triplet set comes out empty contribute 0 but still
    count in the average.  ``matches`` optionally forces the MatchSet of
    specific pairs (used to check the ``h == g`` identity special case).
    """
    return inter_loss_with_stats(features, pairing, omega, delta, seed, step, matches)[0]


def _mean_of(terms: list) -> Tensor:
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total * (1.0 / len(terms))


def total_loss(l_uni, l_intra, l_inter, stats: Mapping | None = None) -> LossReport:
    """Unweighted sum of the three objectives."""
    parts = [ad.as_tensor(x) for x in (l_uni, l_intra, l_inter)]
    total = parts[0] + parts[1] + parts[2]
    counts = {}
    active = n = 0
    for name, st in (stats or {}).items():
        counts[name] = st.n_triplets
        active += st.n_active
        n += st.n_triplets
    return LossReport(
        l_uni=float(parts[0].values),
        l_intra=float(parts[1].values),
        l_inter=float(parts[2].values),
        l_total=float(total.values),
        triplet_counts=counts,
        active_fraction=active / n if n else 0.0,
        total=total,
    )
