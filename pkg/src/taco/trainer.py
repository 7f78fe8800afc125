"""Pretraining loop: AdamW, warmup + cosine schedule, batching, checkpoints."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .exceptions import ConfigError, TrainingError
from .losses import LossReport, inter_loss_with_stats, intra_loss_with_stats, total_loss
from .model import TokenAutoEncoder, decode_patches, encode, patchify, save_checkpoint

logger = logging.getLogger(__name__)

LOSS_LOG_HEADER = "step,l_uni,l_intra,l_inter,l_total,lr"


@dataclass
class TrainConfig:
    learning_rate: float = 3e-4
    weight_decay: float = 1e-5
    iterations: int = 2000
    batch_instances: int = 2
    omega: int = 5
    delta: float = 0.3
    warmup_fraction: float = 0.1
    seed: int = 0
    patch_size: int = 4
    feature_dim: int = 32
    depth: int = 3
    decoder_depth: int = 2
    mix: bool = True
    use_intra: bool = True
    use_inter: bool = True
    full_inter_pairs: bool = False
    checkpoint_every: int = 500
    data: str = ""
    out: str = ""

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate must be > 0 and weight_decay >= 0")
        if not 0 <= self.warmup_fraction < 1:
            raise ConfigError("warmup_fraction must lie in [0, 1)")
        if self.omega < 1:
            raise ConfigError("omega must be >= 1")
        if not 0 < self.delta < 2:
            raise ConfigError("delta must lie in (0, 2)")
        if self.iterations < 0 or self.batch_instances < 1:
            raise ConfigError("iterations must be >= 0 and batch_instances >= 1")

    @classmethod
    def from_file(cls, path, **overrides) -> "TrainConfig":
        return cls.from_mapping({**parse_config_text(Path(path).read_text()), **overrides})

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in values.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(key, value, types[key])
        return cls(**kwargs)

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in dataclasses.asdict(self).items())


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(key, value, kind):
    if not isinstance(value, str):
        return value
    kind = kind if isinstance(kind, str) else kind.__name__
    try:
        if kind == "bool":
            low = value.strip().lower()
            if low not in {"true", "false", "1", "0", "yes", "no"}:
                raise ValueError(value)
            return low in {"true", "1", "yes"}
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
    except ValueError as exc:
        raise ConfigError(f"config key {key!r}: cannot parse {value!r} as {kind}") from exc
    return value.strip()


def parse_config_text(text: str) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {n}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


@dataclass
class OptimizerState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def zeros_like(cls, params) -> "OptimizerState":
        return cls([np.zeros_like(p.values) for p in params],
                   [np.zeros_like(p.values) for p in params])


def adamw_step(params, grads, state: OptimizerState, lr: float, weight_decay: float,
               betas=(0.9, 0.999), eps: float = 1e-8) -> OptimizerState:
    """One AdamW update with decoupled weight decay and bias-corrected moments.

    Parameters are rebound to new arrays; ``state`` is updated in place and returned.
    """
    for k, g in enumerate(grads):
        if g is not None and not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter {k} at step {state.step + 1}")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.values)
        state.m[k] = b1 * state.m[k] + (1 - b1) * g
        state.v[k] = b2 * state.v[k] + (1 - b2) * g * g
        w = p.values * (1.0 - lr * weight_decay) if weight_decay else p.values
        p.values = w - lr * (state.m[k] / c1) / (np.sqrt(state.v[k] / c2) + eps)
    return state


def lr_schedule(step: int, total: int, base_lr: float, warmup_fraction: float = 0.1) -> float:
    """Linear warmup from 0, then half-cosine decay to 0 at ``total``."""
    if total <= 0:
        return base_lr
    step = min(max(step, 0), total)
    warmup = int(round(warmup_fraction * total))
    if warmup and step < warmup:
        return base_lr * step / warmup
    span = total - warmup
    progress = (step - warmup) / span if span else 1.0
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def inter_pairing(batch: list, modalities: list, seed: int, step: int,
                  full: bool = False) -> list[tuple]:
    """Directed cross-instance terms ``(h, i, g, t)`` for one batch.

    Round-robin: instance ``batch[k]`` is paired with ``batch[k + 1 mod B]``
    and one modality per side is drawn at random.  ``full`` enumerates every
    ordered instance pair and modality combination instead.
    """
    if len(batch) < 2:
        return []
    if full:
        return [(h, i, g, t) for h in batch for g in batch if g != h
                for i in modalities for t in modalities]
    out = []
    for k, h in enumerate(batch):
        g = batch[(k + 1) % len(batch)]
        rng = np.random.default_rng([int(seed), int(step), int(h), int(g), 0x1E7])
        i, t = rng.choice(modalities, size=2, replace=True)
        out.append((h, int(i), g, int(t)))
    return out


@dataclass
class TrainResult:
    model: TokenAutoEncoder
    log: list = field(default_factory=list)
    lrs: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)


def loss_log_csv(log: list, lrs: list) -> str:
    lines = [LOSS_LOG_HEADER]
    for k, (rep, lr) in enumerate(zip(log, lrs), start=1):
        lines.append(f"{k},{rep.l_uni!r},{rep.l_intra!r},{rep.l_inter!r},{rep.l_total!r},{lr!r}")
    return "\n".join(lines) + "\n"


def train_step(model: TokenAutoEncoder, patches: dict, batch: list, config: TrainConfig,
               step: int) -> LossReport:
    """Forward all losses for one batch and run backward (grads left on params)."""
    feats = {}
    uni_terms = []
    for h in batch:
        for m, x in patches[h].items():
            z = encode(x, model.encoder)
            feats[(h, m)] = z
            uni_terms.append(ad.mse(decode_patches(z, model.decoder), x))
    l_uni = uni_terms[0]
    for term in uni_terms[1:]:
        l_uni = l_uni + term
    l_uni = l_uni * (1.0 / len(uni_terms))

    stats = {}
    if config.use_intra:
        l_intra, stats["intra"] = intra_loss_with_stats(feats, config.omega, config.delta,
                                                        config.seed, step)
    else:
        l_intra = ad.Tensor(0.0)
    if config.use_inter:
        mods = sorted({m for _, m in feats})
        pairs = inter_pairing(batch, mods, config.seed, step, config.full_inter_pairs)
        l_inter, stats["inter"] = inter_loss_with_stats(feats, pairs, config.omega,
                                                        config.delta, config.seed, step)
    else:
        l_inter = ad.Tensor(0.0)
    report = total_loss(l_uni, l_intra, l_inter, stats)
    if not math.isfinite(report.l_total):
        raise TrainingError(f"non-finite loss at step {step}: {report}")
    model.zero_grad()
    ad.backward(report.total)
    return report


def fit_model(volumes: dict, config: TrainConfig, model: TokenAutoEncoder | None = None,
              on_checkpoint: Callable | None = None) -> TrainResult:
    """Train on ``volumes[instance_id][modality] -> (Dz, Dy, Dx) array``.

    ``on_checkpoint(model, step)`` is called every ``checkpoint_every`` steps
    and after the last step.
    """
    ids = sorted(volumes)
    if not ids:
        raise ConfigError("no training instances")
    shape = next(iter(volumes[ids[0]].values())).shape
    if model is None:
        model = TokenAutoEncoder.create(shape, config.patch_size, config.feature_dim, config.depth,
                                        config.decoder_depth, config.mix, seed=config.seed)
    patches = {h: {m: patchify(np.asarray(v, dtype=np.float64), model.grid)
                   for m, v in sorted(volumes[h].items())} for h in ids}
    if config.batch_instances > len(ids):
        raise ConfigError(f"batch_instances={config.batch_instances} exceeds {len(ids)} instances")
    params = model.parameters()
    state = OptimizerState.zeros_like(params)
    result = TrainResult(model)
    total = config.iterations
    for step in range(1, total + 1):
        rng = np.random.default_rng([int(config.seed), step, 0xBA7C])
        batch = [ids[k] for k in rng.choice(len(ids), size=config.batch_instances, replace=False)]
        lr = lr_schedule(step, total, config.learning_rate, config.warmup_fraction)
        try:
            report = train_step(model, patches, batch, config, step)
            adamw_step(params, [p.grad for p in params], state, lr, config.weight_decay)
        except TrainingError:
            logger.error("training aborted at step %d; last good parameters retained", step)
            if on_checkpoint is not None:
                on_checkpoint(model, step - 1)
            raise
        report.total = None
        result.log.append(report)
        result.lrs.append(lr)
        if step % 100 == 0:
            logger.info("step %d  total %.5f  uni %.5f  intra %.5f  inter %.5f", step,
                        report.l_total, report.l_uni, report.l_intra, report.l_inter)
        if on_checkpoint is not None and config.checkpoint_every and step % config.checkpoint_every == 0 \
                and step != total:
            on_checkpoint(model, step)
            result.checkpoints.append(step)
    if on_checkpoint is not None:
        on_checkpoint(model, total)
        result.checkpoints.append(total)
    return result


def train(config: TrainConfig, volumes: dict | None = None) -> TrainResult:
    """Train from ``config.data`` (or ``volumes``) and write artifacts to ``config.out``.

    Writes ``checkpoint.bin`` (plus ``checkpoint_<step>.bin`` snapshots) and
    ``loss_log.csv``.
    """
    if volumes is None:
        from .synthdata import load_cohort

        if not config.data:
            raise ConfigError("no data directory given")
        volumes = {s.instance_id: s.volumes for s in load_cohort(config.data)}
    out = Path(config.out) if config.out else None

    def save(model, step):
        if out is None:
            return
        save_checkpoint(out / "checkpoint.bin", model, config.seed, step)
        if step and step != config.iterations:
            save_checkpoint(out / f"checkpoint_{step:06d}.bin", model, config.seed, step)

    result = fit_model(volumes, config, on_checkpoint=save)
    if out is not None:
        (out / "loss_log.csv").write_text(loss_log_csv(result.log, result.lrs))
    return result
