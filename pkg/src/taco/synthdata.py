"""Synthetic multi-modal phantoms with shared anatomy.

Every instance is a smooth warp of one ellipsoid template, so region layout
and adjacency are the same across the cohort.  Modalities of an instance
share one latent tissue field (a per-region level plus a micro-texture
whose correlation length depends on the region); each modality renders it
through its own monotone transfer curve and adds independent noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from .exceptions import ConfigError
from .model import PatchGrid

LEVEL_BOUNDS = {
    "clean": (0.0, 0.0),
    "mild": (2.0, 2.0),
    "moderate": (4.0, 5.0),
    "strong": (8.0, 10.0),
}
LEVELS = tuple(LEVEL_BOUNDS)
# texture smoothing sigma (voxels) per label; background and the large
# outer region sit at opposite ends so they differ in texture, not only intensity
TEXTURE_SCALES = (0.5, 2.0, 1.0, 1.5, 0.75, 1.25, 1.75)
# modality gammas lie in [2**-GAMMA_SPREAD, 2**GAMMA_SPREAD]
GAMMA_SPREAD = 0.4
# latent tissue value per label in [-1, 1]; touching regions get distinct values
TISSUE_LEVELS = (-1.0, 0.0, -0.55, 0.45, 0.95, -0.3, 0.7)


@dataclass(frozen=True)
class Ellipsoid:
    center: tuple
    radii: tuple


def _default_regions() -> tuple:
    # canonical cube [-1, 1]^3, axis order (z, y, x); later regions are painted on top.
    # Contacts are either clear overlaps or gaps of >= 2 voxels at 32^3 so that
    # small warps cannot create or break an adjacency.
    return (
        Ellipsoid((0.0, 0.0, 0.0), (0.95, 0.9, 0.95)),      # 1 outer tissue
        Ellipsoid((0.0, 0.0, -0.25), (0.5, 0.5, 0.42)),     # 2 left lobe
        Ellipsoid((0.0, 0.0, 0.25), (0.5, 0.5, 0.42)),      # 3 right lobe
        Ellipsoid((0.0, 0.0, 0.0), (0.2, 0.2, 0.22)),       # 4 medial core
        Ellipsoid((0.55, 0.0, 0.0), (0.22, 0.3, 0.55)),     # 5 dorsal band
        Ellipsoid((-0.55, 0.0, 0.0), (0.22, 0.28, 0.3)),    # 6 ventral nucleus
    )


@dataclass
class AnatomyTemplate:
    """Ordered ellipsoid regions (label = position + 1, 0 = background)."""

    regions: tuple = field(default_factory=_default_regions)
    max_affine: float = 0.05
    max_rotation_deg: float = 3.0
    warp_amplitude: float = 0.02

    @property
    def n_regions(self) -> int:
        return len(self.regions)

    def labels_at(self, coords: np.ndarray) -> np.ndarray:
        """Region label for canonical coordinates ``(..., 3)``."""
        labels = np.zeros(coords.shape[:-1], dtype=np.uint16)
        for r, ell in enumerate(self.regions, start=1):
            q = (coords - np.asarray(ell.center)) / np.asarray(ell.radii)
            labels[np.einsum("...i,...i->...", q, q) <= 1.0] = r
        return labels

    def rasterize(self, volume_shape) -> np.ndarray:
        return self.labels_at(canonical_grid(volume_shape))

    def adjacency(self, volume_shape=(32, 32, 32)) -> frozenset:
        return adjacency_table(self.rasterize(volume_shape))


def canonical_grid(volume_shape) -> np.ndarray:
    axes = [(np.arange(n) + 0.5) / n * 2.0 - 1.0 for n in volume_shape]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def adjacency_table(labels: np.ndarray) -> frozenset:
    """Unordered label pairs that share a face somewhere in the volume."""
    pairs = set()
    for axis in range(labels.ndim):
        a = np.moveaxis(labels, axis, 0)
        lo, hi = a[:-1].ravel(), a[1:].ravel()
        diff = lo != hi
        for x, y in set(zip(lo[diff].tolist(), hi[diff].tolist())):
            pairs.add((min(x, y), max(x, y)))
    return frozenset(pairs)


@dataclass
class InstanceSample:
    instance_id: int
    volumes: dict
    labels: np.ndarray
    deformation: dict = field(default_factory=dict)

    @property
    def modalities(self) -> list:
        return sorted(self.volumes)


@dataclass(frozen=True)
class RigidPerturbation:
    """Rigid transform about the volume centre: voxel translation + Euler angles (deg)."""

    translation: tuple = (0.0, 0.0, 0.0)
    rotation: tuple = (0.0, 0.0, 0.0)
    level: str = "clean"

    def __post_init__(self):
        if self.level not in LEVEL_BOUNDS:
            raise ConfigError(f"unknown perturbation level {self.level!r}")
        max_t, max_r = LEVEL_BOUNDS[self.level]
        t = np.abs(np.asarray(self.translation, dtype=float))
        r = np.abs(np.asarray(self.rotation, dtype=float))
        if t.shape != (3,) or r.shape != (3,):
            raise ConfigError("translation and rotation need 3 components each")
        if (t > max_t + 1e-12).any() or (r > max_r + 1e-12).any():
            raise ConfigError(
                f"{self.level} perturbation exceeds bounds ({max_t} vox, {max_r} deg): "
                f"t={tuple(self.translation)}, r={tuple(self.rotation)}"
            )

    @property
    def is_identity(self) -> bool:
        return not (np.any(self.translation) or np.any(self.rotation))


def sample_rigid_perturbation(level: str, seed) -> RigidPerturbation:
    """Uniform draw within the level's per-axis bounds.

    The unit draw depends only on ``seed``, so the same seed gives
    proportionally scaled transforms across levels.
    """
    if level not in LEVEL_BOUNDS:
        raise ConfigError(f"unknown perturbation level {level!r}")
    u = np.random.default_rng(seed).uniform(-1.0, 1.0, size=6)
    max_t, max_r = LEVEL_BOUNDS[level]
    return RigidPerturbation(tuple(u[:3] * max_t), tuple(u[3:] * max_r), level)


def apply_rigid_perturbation(volume: np.ndarray, p: RigidPerturbation) -> np.ndarray:
    """Resample ``volume`` under ``p`` with trilinear interpolation and zero fill."""
    volume = np.asarray(volume)
    if p.level == "clean" or p.is_identity:
        return volume.copy()
    rot = Rotation.from_euler("xyz", p.rotation, degrees=True).as_matrix()
    center = (np.asarray(volume.shape) - 1) / 2.0
    inv = rot.T
    offset = center - inv @ (center + np.asarray(p.translation, dtype=float))
    out = ndimage.affine_transform(volume.astype(np.float64), inv, offset=offset, order=1,
                                   mode="grid-constant", cval=0.0)
    return out.astype(volume.dtype, copy=False)


@dataclass(frozen=True)
class ModalityTransfer:
    """Monotone increasing map ``q -> low + (high - low) * clip(q, 0, 1) ** gamma``."""

    gamma: float
    low: float
    high: float

    def __call__(self, q: np.ndarray) -> np.ndarray:
        return self.low + (self.high - self.low) * np.clip(q, 0.0, 1.0) ** self.gamma


def modality_transfer(modality: int) -> ModalityTransfer:
    """Fixed, seeded transfer curve of modality ``modality``."""
    rng = np.random.default_rng([0x7AC0, modality])
    # golden-ratio spacing keeps the exponents of any few modalities far apart in [1/2, 2]
    gamma = float(2.0 ** (GAMMA_SPREAD * (2.0 * ((0.5 + modality * 0.618034) % 1.0) - 1.0)))
    return ModalityTransfer(gamma, float(rng.uniform(0.0, 0.1)), float(rng.uniform(0.85, 1.0)))


def tissue_levels(n_labels: int, contrast: float) -> np.ndarray:
    """Latent tissue value per label, centred on 0.5 with half-range ``contrast``."""
    return 0.5 + contrast * np.resize(np.asarray(TISSUE_LEVELS), n_labels)


def _warp(template: AnatomyTemplate, shape, rng) -> tuple[np.ndarray, dict]:
    coords = canonical_grid(shape)
    scale = 1.0 + rng.uniform(-template.max_affine, template.max_affine, size=3)
    angles = rng.uniform(-template.max_rotation_deg, template.max_rotation_deg, size=3)
    shift = rng.uniform(-template.max_affine, template.max_affine, size=3)
    freq = rng.uniform(0.5, 1.5, size=(3, 3))
    phase = rng.uniform(0, 2 * np.pi, size=3)
    rot = Rotation.from_euler("xyz", angles, degrees=True).as_matrix()
    # inverse map: voxel -> canonical template coordinates
    u = ((coords - shift) @ rot) / scale
    wobble = np.stack(
        [np.sin(np.pi * coords @ freq[k] + phase[k]) for k in range(3)], axis=-1
    )
    u = u + template.warp_amplitude * wobble
    params = {"scale": scale.tolist(), "rotation_deg": angles.tolist(), "shift": shift.tolist(),
              "freq": freq.tolist(), "phase": phase.tolist()}
    return template.labels_at(u), params


def texture_field(shape, rng, smoothing: float = 1.0) -> np.ndarray:
    """Zero-mean, unit-variance smoothed Gaussian field."""
    field_ = ndimage.gaussian_filter(rng.standard_normal(shape), smoothing, mode="wrap")
    return (field_ - field_.mean()) / field_.std()


def region_texture(labels: np.ndarray, rng, scales=TEXTURE_SCALES) -> np.ndarray:
    """One white-noise draw smoothed at a label-specific scale, unit std per scale."""
    white = rng.standard_normal(labels.shape)
    sigmas = np.resize(np.asarray(scales, dtype=float), int(labels.max()) + 1)
    out = np.zeros(labels.shape)
    for r in np.unique(labels):
        f = ndimage.gaussian_filter(white, sigmas[r], mode="wrap")
        mask = labels == r
        out[mask] = ((f - f.mean()) / f.std())[mask]
    return out


def generate_instance(template: AnatomyTemplate, instance_id: int, modalities: int,
                      volume_shape=(32, 32, 32), seed: int = 0, noise: float = 0.01,
                      texture: float = 0.06, contrast: float = 0.3) -> InstanceSample:
    shape = tuple(int(s) for s in volume_shape)
    rng = np.random.default_rng([int(seed), int(instance_id)])
    labels, params = _warp(template, shape, rng)
    want = template.adjacency(shape)
    got = adjacency_table(labels)
    if got != want:
        raise ConfigError(
            f"instance {instance_id}: warp changed region adjacency "
            f"(missing {sorted(want - got)}, extra {sorted(got - want)})"
        )
    tissue = tissue_levels(template.n_regions + 1, contrast)[labels] + texture * region_texture(labels, rng)
    volumes = {}
    for m in range(modalities):
        img = modality_transfer(m)(tissue)
        if noise > 0:
            img = img + noise * np.random.default_rng([int(seed), int(instance_id), m, 1]).standard_normal(shape)
        volumes[m] = np.clip(img, 0.0, 1.0).astype(np.float32).astype(np.float64)
    return InstanceSample(int(instance_id), volumes, labels, params)


def generate_cohort(template: AnatomyTemplate | None = None, n_instances: int = 8,
                    modalities: int = 3, volume_shape=(32, 32, 32), seed: int = 0,
                    noise: float = 0.01, start_id: int = 0, texture: float = 0.06,
                    contrast: float = 0.3) -> list[InstanceSample]:
    """Deterministic cohort; instance ``h`` depends only on ``(seed, h)``.

    ``start_id`` lets held-out instances come from the same seed stream.
    """
    if n_instances < 1 or modalities < 2:
        raise ConfigError("need n_instances >= 1 and at least 2 modalities")
    if any(int(s) < 8 for s in volume_shape):
        raise ConfigError(f"volume shape {volume_shape} too small")
    template = template or AnatomyTemplate()
    return [generate_instance(template, h, modalities, volume_shape, seed, noise, texture, contrast)
            for h in range(start_id, start_id + n_instances)]


def token_region_labels(labels: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """Majority region label per token (ties go to the lowest label)."""
    from .model import patchify

    rows = patchify(np.asarray(labels), grid).astype(np.int64)
    n = int(rows.max()) + 1
    counts = np.zeros((rows.shape[0], n), dtype=np.int64)
    np.add.at(counts, (np.repeat(np.arange(rows.shape[0]), rows.shape[1]), rows.ravel()), 1)
    return counts.argmax(axis=1)


def cohort_array(cohort: list[InstanceSample]) -> np.ndarray:
    """Stack a cohort into ``(n_instances, n_modalities, Dz, Dy, Dx)``."""
    return np.stack([np.stack([s.volumes[m] for m in s.modalities]) for s in cohort])


# ---------------------------------------------------------------------------
# on-disk format: <name>.raw (LE float32) / labels.u16 (LE uint16) + .txt sidecars
# ---------------------------------------------------------------------------

def _write_meta(path: Path, meta: dict) -> None:
    path.write_text("".join(f"{k} = {v}\n" for k, v in meta.items()), encoding="ascii")


def read_meta(path) -> dict:
    meta = {}
    for line in Path(path).read_text(encoding="ascii").splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            key, _, value = line.partition("=")
            meta[key.strip()] = value.strip()
    return meta


def _shape_str(shape) -> str:
    return "x".join(str(int(s)) for s in shape)


def _parse_shape(text: str) -> tuple:
    return tuple(int(s) for s in text.split("x"))


def write_volume(path, volume: np.ndarray, **meta) -> None:
    path = Path(path)
    path.write_bytes(np.asarray(volume, dtype="<f4").tobytes(order="C"))
    _write_meta(path.with_suffix(".txt"),
                {"shape": _shape_str(volume.shape), "dtype": "float32-le", "order": "z-major", **meta})


def read_volume(path) -> np.ndarray:
    path = Path(path)
    meta = read_meta(path.with_suffix(".txt"))
    data = np.frombuffer(path.read_bytes(), dtype="<f4")
    return data.reshape(_parse_shape(meta["shape"])).astype(np.float64)


def write_labels(path, labels: np.ndarray, **meta) -> None:
    path = Path(path)
    path.write_bytes(np.asarray(labels, dtype="<u2").tobytes(order="C"))
    _write_meta(path.with_suffix(".txt"),
                {"shape": _shape_str(labels.shape), "dtype": "uint16-le", "order": "z-major", **meta})


def read_labels(path) -> np.ndarray:
    path = Path(path)
    meta = read_meta(path.with_suffix(".txt"))
    return np.frombuffer(path.read_bytes(), dtype="<u2").reshape(_parse_shape(meta["shape"])).copy()


def save_cohort(directory, cohort: list[InstanceSample], seed: int) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    first = cohort[0]
    _write_meta(directory / "cohort.txt", {
        "instances": " ".join(str(s.instance_id) for s in cohort),
        "modalities": len(first.modalities),
        "shape": _shape_str(first.labels.shape),
        "seed": seed,
    })
    for s in cohort:
        sub = directory / f"instance_{s.instance_id:04d}"
        sub.mkdir(exist_ok=True)
        write_labels(sub / "labels.u16", s.labels, instance=s.instance_id, seed=seed)
        for m in s.modalities:
            write_volume(sub / f"modality_{m}.raw", s.volumes[m], modality=f"modality_{m}",
                         instance=s.instance_id, seed=seed)
    return directory


def load_cohort(directory) -> list[InstanceSample]:
    directory = Path(directory)
    manifest = directory / "cohort.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"no cohort manifest at {manifest}")
    meta = read_meta(manifest)
    n_mod = int(meta["modalities"])
    out = []
    for h in (int(x) for x in meta["instances"].split()):
        sub = directory / f"instance_{h:04d}"
        vols = {m: read_volume(sub / f"modality_{m}.raw") for m in range(n_mod)}
        out.append(InstanceSample(h, vols, read_labels(sub / "labels.u16")))
    return out
