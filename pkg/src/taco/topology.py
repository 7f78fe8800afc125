"""Index machinery behind the ranking losses.

Nothing here is differentiated: neighborhoods, negative pools, mutual
nearest-neighbor matches and triplet index sets are computed from detached
distances and then handed to :mod:`taco.losses` as integer arrays.

Ties in every argmin/argsort are broken toward the lowest index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, cosine_distance_matrix
from .exceptions import DimensionError, InsufficientTokensError

IDENTITY = "identity"
MNN = "mnn"


def _values(z) -> np.ndarray:
    return z.values if isinstance(z, Tensor) else np.asarray(z, dtype=np.float64)


def as_rng(seed) -> np.random.Generator:
    """Accept a Generator, an int, or a sequence of ints (hashed into a seed)."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def cosine_distances(za, zb) -> np.ndarray:
    """Detached cosine-distance matrix as a plain array."""
    return cosine_distance_matrix(_values(za), _values(zb)).values


@dataclass
class NeighborSets:
    """Top-``omega`` neighbors and the negative candidate pool of each anchor.

    ``neighbors`` is ``(K, omega)``.  The pool is either given explicitly as a
    ``(K, P)`` array or implied by ``excluded``: a sorted ``(K, m)`` array of
    indices (anchor, neighbors, buffer) removed from ``0..K-1``.
    """

    omega: int
    neighbors: np.ndarray
    explicit_pool: np.ndarray | None = None
    excluded: np.ndarray | None = None
    n_candidates: int | None = None

    def __post_init__(self):
        self.neighbors = np.asarray(self.neighbors, dtype=np.intp)
        if self.explicit_pool is not None:
            self.explicit_pool = np.asarray(self.explicit_pool, dtype=np.intp)
            if self.explicit_pool.ndim == 1:
                self.explicit_pool = self.explicit_pool[None, :]
        elif self.excluded is None:
            raise ValueError("NeighborSets needs an explicit pool or an excluded set")
        elif self.n_candidates is None:
            self.n_candidates = self.neighbors.shape[0]

    @property
    def n_tokens(self) -> int:
        return self.neighbors.shape[0]

    @property
    def pool_size(self) -> int:
        if self.explicit_pool is not None:
            return self.explicit_pool.shape[1]
        return self.n_candidates - self.excluded.shape[1]

    @property
    def negative_pool(self) -> np.ndarray:
        """``(K, P)`` candidate negatives, ascending index order."""
        if self.explicit_pool is not None:
            return self.explicit_pool
        return self.pool_at(np.broadcast_to(np.arange(self.pool_size),
                                            (self.n_tokens, self.pool_size)))

    def pool_at(self, pos: np.ndarray) -> np.ndarray:
        """Map per-row pool positions ``(K, r)`` to token indices."""
        if self.explicit_pool is not None:
            return np.take_along_axis(self.explicit_pool, pos, axis=1)
        # j-th element of the complement of sorted e: j + #{k : e_k - k <= j}
        adj = self.excluded - np.arange(self.excluded.shape[1])
        return pos + (adj[:, None, :] <= pos[:, :, None]).sum(axis=2)


@dataclass
class MatchSet:
    """Mutual-nearest-neighbor pairs ``(a, a')`` between a source and a target matrix."""

    pairs: np.ndarray
    source_count: int
    target_count: int

    def __post_init__(self):
        self.pairs = np.asarray(self.pairs, dtype=np.intp).reshape(-1, 2)

    def __len__(self):
        return len(self.pairs)

    def source_to_target(self) -> np.ndarray:
        """Length-K_src map; -1 marks unmatched source indices."""
        out = np.full(self.source_count, -1, dtype=np.intp)
        out[self.pairs[:, 0]] = self.pairs[:, 1]
        return out

    def as_set(self) -> set[tuple[int, int]]:
        return {(int(a), int(b)) for a, b in self.pairs}

    @classmethod
    def identity(cls, k: int) -> "MatchSet":
        idx = np.arange(k)
        return cls(np.stack([idx, idx], axis=1), k, k)


@dataclass
class Correspondence:
    """Token correspondence between two matrices: positional identity or MNN-based."""

    kind: str = IDENTITY
    matches: MatchSet | None = None

    def __call__(self, index: int) -> int | None:
        if self.kind == IDENTITY:
            return int(index)
        lut = self.matches.source_to_target()
        target = lut[index]
        return None if target < 0 else int(target)

    def map_array(self, idx: np.ndarray) -> np.ndarray:
        """Vectorised lookup; unmatched entries become -1."""
        idx = np.asarray(idx, dtype=np.intp)
        if self.kind == IDENTITY:
            return idx.copy()
        return self.matches.source_to_target()[idx]


@dataclass
class TripletSet:
    """(anchor, positive, negative) rows indexing the target token matrix."""

    triples: np.ndarray
    source: dict = field(default_factory=dict)

    def __post_init__(self):
        self.triples = np.asarray(self.triples, dtype=np.intp).reshape(-1, 3)

    def __len__(self):
        return len(self.triples)

    @property
    def anchors(self) -> np.ndarray:
        return self.triples[:, 0]

    @property
    def positives(self) -> np.ndarray:
        return self.triples[:, 1]

    @property
    def negatives(self) -> np.ndarray:
        return self.triples[:, 2]


def _smallest_sorted(d: np.ndarray, m: int) -> np.ndarray:
    """Per row, the column indices of the ``m`` smallest entries ordered by (value, index).

    Same result as a stable full argsort truncated at ``m``, without sorting
    whole rows.
    """
    k, n = d.shape
    if m >= n:
        return np.argsort(d, axis=1, kind="stable")
    thr = np.partition(d, m - 1, axis=1)[:, m - 1:m]
    selected = d <= thr
    excess = np.flatnonzero(selected.sum(axis=1) > m)
    if excess.size:
        # more ties at the threshold than slots: keep the lowest indices
        sub = d[excess]
        below = sub < thr[excess]
        tied = sub == thr[excess]
        need = m - below.sum(axis=1, keepdims=True)
        selected[excess] = below | (tied & (np.cumsum(tied, axis=1) <= need))
    cols = np.nonzero(selected)[1].reshape(k, m)
    vals = np.take_along_axis(d, cols, axis=1)
    return np.take_along_axis(cols, np.argsort(vals, axis=1, kind="stable"), axis=1)


def topk_neighbors(dist, omega: int) -> NeighborSets:
    """Neighborhoods from a square distance matrix.

    Each row is ranked with the anchor forced to position 0 and ties going
    to the lowest index.  Positions ``1..omega`` are the neighbors, position
    ``omega + 1`` is skipped as a buffer, and positions ``omega + 2`` onward
    form the negative pool.
    """
    d = _values(dist)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise DimensionError(f"distance matrix must be square, got {d.shape}")
    if omega < 1:
        raise ValueError("omega must be >= 1")
    k = d.shape[0]
    if k < omega + 3:
        raise InsufficientTokensError(f"need K >= omega + 3 = {omega + 3} tokens, got {k}")
    d = d.copy()
    np.fill_diagonal(d, -np.inf)
    order = _smallest_sorted(d, omega + 2)
    return NeighborSets(omega, order[:, 1:omega + 1], excluded=np.sort(order, axis=1),
                        n_candidates=k)


def sample_negatives(pool: NeighborSets, omega: int, seed) -> np.ndarray:
    """Draw ``omega`` negatives per anchor, uniformly from its pool.

    Without replacement when the pool is large enough, with replacement
    otherwise.  Returns a ``(K, omega)`` index array.
    """
    rng = as_rng(seed)
    k, size = pool.n_tokens, pool.pool_size
    if size <= 0:
        raise InsufficientTokensError("empty negative pool")
    pos = rng.integers(0, size, size=(k, omega))
    if size >= omega:
        while True:
            srt = np.sort(pos, axis=1)
            dup = np.flatnonzero((srt[:, 1:] == srt[:, :-1]).any(axis=1))
            if not dup.size:
                break
            pos[dup] = rng.integers(0, size, size=(dup.size, omega))
    return pool.pool_at(pos)


def mutual_nearest_matches(za, zb) -> MatchSet:
    """Mutual nearest neighbors under cosine distance.

    ``a' = argmin_o D[a, o]`` and ``a = argmin_o D[o, a']``, computed as
    ``arange(K) == argmin0[argmin1]``.
    """
    d = cosine_distances(za, zb)
    if d.size == 0:
        raise InsufficientTokensError("mutual_nearest_matches needs non-empty token sets")
    nn_ab = np.argmin(d, axis=1)
    nn_ba = np.argmin(d, axis=0)
    src = np.arange(d.shape[0])
    mask = src == nn_ba[nn_ab]
    return MatchSet(np.stack([src[mask], nn_ab[mask]], axis=1), d.shape[0], d.shape[1])


def build_intra_triplets(nbrs: NeighborSets, negs: np.ndarray, corr: Correspondence | None = None,
                         source: dict | None = None) -> TripletSet:
    """Pair the r-th neighbor with the r-th negative for every anchor (K * omega triples)."""
    corr = corr or Correspondence()
    k, omega = nbrs.neighbors.shape
    anchors = np.repeat(np.arange(k), omega)
    raw = np.stack([anchors, nbrs.neighbors.ravel(), np.asarray(negs).ravel()], axis=1)
    mapped = corr.map_array(raw)
    if (mapped < 0).any():
        raise ValueError("intra triplets need a total correspondence")
    return TripletSet(mapped, dict(source or {}))


def build_inter_triplets(nbrs: NeighborSets, negs: np.ndarray, matches: MatchSet,
                         source: dict | None = None) -> TripletSet:
    """Triplets in the target matrix for matched anchors.

    A (positive, negative) rank is kept only when both its positive and its
    negative are matched as well; otherwise it is skipped.
    """
    lut = matches.source_to_target()
    negs = np.asarray(negs)
    rows = []
    for a, a_t in matches.pairs:
        p_t = lut[nbrs.neighbors[a]]
        n_t = lut[negs[a]]
        keep = (p_t >= 0) & (n_t >= 0)
        if keep.any():
            rows.append(np.stack([np.full(keep.sum(), a_t), p_t[keep], n_t[keep]], axis=1))
    triples = np.concatenate(rows) if rows else np.empty((0, 3), dtype=np.intp)
    return TripletSet(triples, dict(source or {}))


def brute_force_mnn_oracle(za, zb) -> MatchSet:
    """Double-loop MNN search in pure Python; test oracle for small inputs."""
    a_rows = _values(za).tolist()
    b_rows = _values(zb).tolist()
    if len(a_rows) > 64 or len(b_rows) > 64:
        raise ValueError("brute_force_mnn_oracle is limited to K <= 64")

    def cos_dist(u, v):
        dot = sum(x * y for x, y in zip(u, v))
        nu = math.sqrt(sum(x * x for x in u))
        nv = math.sqrt(sum(y * y for y in v))
        return 1.0 - dot / (nu * nv)

    d = [[cos_dist(u, v) for v in b_rows] for u in a_rows]

    def first_argmin(vals):
        best = 0
        for i, v in enumerate(vals):
            if v < vals[best]:
                best = i
        return best

    pairs = []
    for a in range(len(a_rows)):
        b = first_argmin(d[a])
        if first_argmin([d[o][b] for o in range(len(a_rows))]) == a:
            pairs.append((a, b))
    return MatchSet(np.array(pairs, dtype=np.intp).reshape(-1, 2), len(a_rows), len(b_rows))
