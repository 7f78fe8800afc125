"""Patch tokenizer and token-wise MLP autoencoder.

A volume is cut into non-overlapping patches (z-major, then y, then x), each
patch is flattened into one row, and a shared MLP maps rows to token
features.  The decoder is another token-wise MLP back to patch voxels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import CheckpointError, ConfigError, DimensionError

CHECKPOINT_MAGIC = b"TACOCKPT"
CHECKPOINT_VERSION = 1


def _triple(x) -> tuple[int, int, int]:
    if np.isscalar(x):
        return (int(x),) * 3
    t = tuple(int(v) for v in x)
    if len(t) != 3:
        raise ConfigError(f"expected 3 extents, got {x!r}")
    return t


@dataclass(frozen=True)
class PatchGrid:
    volume_shape: tuple
    patch_size: tuple

    def __post_init__(self):
        vs, ps = _triple(self.volume_shape), _triple(self.patch_size)
        object.__setattr__(self, "volume_shape", vs)
        object.__setattr__(self, "patch_size", ps)
        if any(p < 1 for p in ps) or any(v < 1 for v in vs):
            raise ConfigError("volume and patch extents must be positive")
        if any(v % p for v, p in zip(vs, ps)):
            raise ConfigError(f"patch size {ps} does not divide volume shape {vs}")

    @property
    def grid_shape(self) -> tuple:
        return tuple(v // p for v, p in zip(self.volume_shape, self.patch_size))

    @property
    def n_tokens(self) -> int:
        return int(np.prod(self.grid_shape))

    @property
    def patch_dim(self) -> int:
        return int(np.prod(self.patch_size))

    def token_centers(self) -> np.ndarray:
        """Voxel-space centre of each token, ``(K, 3)``."""
        idx = np.indices(self.grid_shape).reshape(3, -1).T
        return (idx + 0.5) * np.array(self.patch_size) - 0.5


def _split_shape(grid: PatchGrid) -> tuple:
    (gz, gy, gx), (pz, py, px) = grid.grid_shape, grid.patch_size
    return (gz, pz, gy, py, gx, px)


def patchify(volume, grid: PatchGrid):
    """``(Dz, Dy, Dx)`` volume -> ``(K, pz*py*px)`` patch rows.

    Accepts a numpy array (returns an array) or a Tensor (stays on the tape).
    """
    shape = tuple(volume.shape)
    if shape != grid.volume_shape:
        raise ConfigError(f"volume shape {shape} does not match grid {grid.volume_shape}")
    out_shape = (grid.n_tokens, grid.patch_dim)
    if isinstance(volume, Tensor):
        v = ad.reshape(volume, _split_shape(grid))
        return ad.reshape(ad.transpose(v, (0, 2, 4, 1, 3, 5)), out_shape)
    v = np.asarray(volume).reshape(_split_shape(grid))
    return v.transpose(0, 2, 4, 1, 3, 5).reshape(out_shape)


def depatchify(patches, grid: PatchGrid):
    """Inverse of :func:`patchify`."""
    if tuple(patches.shape) != (grid.n_tokens, grid.patch_dim):
        raise DimensionError(f"patch matrix {tuple(patches.shape)} does not fit grid")
    (gz, gy, gx), (pz, py, px) = grid.grid_shape, grid.patch_size
    if isinstance(patches, Tensor):
        v = ad.reshape(patches, (gz, gy, gx, pz, py, px))
        return ad.reshape(ad.transpose(v, (0, 3, 1, 4, 2, 5)), grid.volume_shape)
    v = np.asarray(patches).reshape(gz, gy, gx, pz, py, px)
    return v.transpose(0, 3, 1, 4, 2, 5).reshape(grid.volume_shape)


@dataclass
class EncoderParams:
    """Weights of the token-wise encoder MLP.

    ``layers`` holds ``(weight, bias)`` pairs; ReLU sits between layers and
    the last layer is linear.  With ``mix`` the input of the last layer is
    widened by the token-mean of that input, broadcast to every token.
    """

    layers: list
    mix: bool = True

    @property
    def feature_dim(self) -> int:
        return self.layers[-1][0].shape[1]


@dataclass
class DecoderParams:
    layers: list


def _init_layer(rng, fan_in, fan_out):
    bound = 1.0 / np.sqrt(fan_in)
    w = Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True)
    b = Tensor(rng.uniform(-bound, bound, size=(fan_out,)), requires_grad=True)
    return w, b


def init_encoder(patch_dim: int, feature_dim: int = 32, depth: int = 3, mix: bool = True,
                 seed=0) -> EncoderParams:
    if depth < 1:
        raise ConfigError("encoder depth must be >= 1")
    rng = np.random.default_rng(seed)
    layers = []
    fan_in = patch_dim
    for k in range(depth):
        last = k == depth - 1
        layers.append(_init_layer(rng, fan_in * 2 if (last and mix) else fan_in, feature_dim))
        fan_in = feature_dim
    return EncoderParams(layers, mix)


def init_decoder(feature_dim: int, patch_dim: int, depth: int = 2, hidden: int | None = None,
                 seed=0) -> DecoderParams:
    if depth < 1:
        raise ConfigError("decoder depth must be >= 1")
    hidden = hidden or feature_dim
    rng = np.random.default_rng(seed)
    dims = [feature_dim] + [hidden] * (depth - 1) + [patch_dim]
    return DecoderParams([_init_layer(rng, a, b) for a, b in zip(dims, dims[1:])])


def _mlp(x, layers, mix=False):
    h = x
    for k, (w, b) in enumerate(layers):
        last = k == len(layers) - 1
        if last and mix:
            ctx = ad.broadcast_to(ad.tmean(h, axis=0, keepdims=True), h.shape)
            h = ad.concat([h, ctx], axis=1)
        if h.shape[1] != w.shape[0]:
            raise DimensionError(f"layer {k}: input width {h.shape[1]} != weight rows {w.shape[0]}")
        h = ad.matmul(h, w) + b
        if not last:
            h = ad.relu(h)
    return h


def encode(patches, params: EncoderParams) -> Tensor:
    """Patch rows ``(K, P)`` -> token features ``(K, F)``."""
    return _mlp(ad.as_tensor(patches), params.layers, params.mix)


def decode(tokens, params: DecoderParams, grid: PatchGrid):
    """Token features -> reconstructed volume (a Tensor on the tape)."""
    return depatchify(decode_patches(tokens, params), grid)


def decode_patches(tokens, params: DecoderParams) -> Tensor:
    return _mlp(ad.as_tensor(tokens), params.layers)


@dataclass
class TokenAutoEncoder:
    """Grid + encoder + decoder sharing one parameter store across modalities."""

    grid: PatchGrid
    encoder: EncoderParams
    decoder: DecoderParams
    meta: dict = field(default_factory=dict)

    @classmethod
    def create(cls, volume_shape=(32, 32, 32), patch_size=4, feature_dim=32, depth=3,
               decoder_depth=2, mix=True, seed=0) -> "TokenAutoEncoder":
        grid = PatchGrid(volume_shape, patch_size)
        ss = np.random.SeedSequence(seed)
        enc_seed, dec_seed = ss.spawn(2)
        enc = init_encoder(grid.patch_dim, feature_dim, depth, mix, enc_seed)
        dec = init_decoder(feature_dim, grid.patch_dim, decoder_depth, seed=dec_seed)
        return cls(grid, enc, dec, {"seed": seed})

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for prefix, layers in (("encoder", self.encoder.layers), ("decoder", self.decoder.layers)):
            for k, (w, b) in enumerate(layers):
                out.append((f"{prefix}.{k}.weight", w))
                out.append((f"{prefix}.{k}.bias", b))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    @property
    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def encode_volume(self, volume) -> Tensor:
        return encode(patchify(np.asarray(volume, dtype=np.float64), self.grid), self.encoder)

    def tokens(self, volume) -> np.ndarray:
        """Detached token features for one volume."""
        return self.encode_volume(volume).values.copy()

    def reconstruct(self, volume) -> np.ndarray:
        return decode(self.encode_volume(volume), self.decoder, self.grid).values.copy()


# ---------------------------------------------------------------------------
# checkpoint file: magic, one JSON header line, little-endian float64 blob
# ---------------------------------------------------------------------------

def _header(model: TokenAutoEncoder, seed, step) -> dict:
    return {
        "format_version": CHECKPOINT_VERSION,
        "volume_shape": list(model.grid.volume_shape),
        "patch_size": list(model.grid.patch_size),
        "mix": bool(model.encoder.mix),
        "layers": [[name, list(p.shape)] for name, p in model.named_parameters()],
        "seed": seed,
        "step": int(step),
    }


def checkpoint_bytes(model: TokenAutoEncoder, seed=None, step: int = 0) -> bytes:
    header = json.dumps(_header(model, seed, step), sort_keys=True, separators=(",", ":"))
    blob = b"".join(p.values.astype("<f8").tobytes() for p in model.parameters())
    return CHECKPOINT_MAGIC + b"\n" + header.encode("ascii") + b"\n" + blob


def save_checkpoint(path, model: TokenAutoEncoder, seed=None, step: int = 0) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(model, seed, step))
    return path


def _require(header: dict, key: str, kind):
    if key not in header:
        raise CheckpointError(f"checkpoint header is missing '{key}'", key)
    value = header[key]
    if not isinstance(value, kind) or isinstance(value, bool) and kind is not bool:
        raise CheckpointError(f"checkpoint header field '{key}' has invalid value {value!r}", key)
    return value


def parse_checkpoint(data: bytes) -> tuple[TokenAutoEncoder, dict]:
    if not data.startswith(CHECKPOINT_MAGIC + b"\n"):
        raise CheckpointError("not a checkpoint file (bad magic)", "magic")
    rest = data[len(CHECKPOINT_MAGIC) + 1:]
    line_end = rest.find(b"\n")
    if line_end < 0:
        raise CheckpointError("checkpoint header is not terminated", "header")
    try:
        header = json.loads(rest[:line_end].decode("ascii"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"checkpoint header is not valid JSON: {exc}", "header") from exc
    if not isinstance(header, dict):
        raise CheckpointError("checkpoint header must be an object", "header")
    version = _require(header, "format_version", int)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported format_version {version}", "format_version")
    volume_shape = _require(header, "volume_shape", list)
    patch_size = _require(header, "patch_size", list)
    mix = _require(header, "mix", bool)
    layers = _require(header, "layers", list)
    _require(header, "step", int)
    try:
        grid = PatchGrid(volume_shape, patch_size)
    except (ConfigError, TypeError, ValueError) as exc:
        raise CheckpointError(f"invalid grid in checkpoint: {exc}", "volume_shape") from exc

    blob = rest[line_end + 1:]
    arrays = {}
    offset = 0
    for entry in layers:
        try:
            name, shape = entry
            shape = tuple(int(s) for s in shape)
        except (TypeError, ValueError) as exc:
            raise CheckpointError(f"malformed layer entry {entry!r}", "layers") from exc
        n = int(np.prod(shape)) * 8
        if offset + n > len(blob):
            raise CheckpointError("parameter blob shorter than declared layer shapes", "layers")
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=n // 8, offset=offset).reshape(shape)
        offset += n
    if offset != len(blob):
        raise CheckpointError("parameter blob longer than declared layer shapes", "layers")

    def collect(prefix):
        out = []
        k = 0
        while f"{prefix}.{k}.weight" in arrays:
            w = Tensor(arrays[f"{prefix}.{k}.weight"], requires_grad=True)
            b = Tensor(arrays[f"{prefix}.{k}.bias"], requires_grad=True)
            out.append((w, b))
            k += 1
        if not out:
            raise CheckpointError(f"no {prefix} layers in checkpoint", "layers")
        return out

    model = TokenAutoEncoder(grid, EncoderParams(collect("encoder"), mix),
                             DecoderParams(collect("decoder")), {"seed": header.get("seed")})
    if len(model.named_parameters()) != len(layers):
        raise CheckpointError("unexpected layer names in checkpoint", "layers")
    return model, header


def load_checkpoint(path) -> tuple[TokenAutoEncoder, dict]:
    return parse_checkpoint(Path(path).read_bytes())
