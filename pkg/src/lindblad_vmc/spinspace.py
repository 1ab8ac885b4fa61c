"""Spin configurations, lattice geometry and index arithmetic.

Spins are stored as int8 values in {+1, -1}. Basis label 0 is spin +1 and
label 1 (the state annihilated by the lowering operator) is spin -1. A joint
configuration of the doubled space is the concatenation ``(alpha, beta)`` of
length 2N, so the same index helpers work on both spaces.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

MAX_SITES = 30


def _as_spins(c) -> np.ndarray:
    c = np.asarray(c)
    if c.size and not np.all(np.abs(c) == 1):
        raise ValueError("spin values must be +1 or -1")
    return c.astype(np.int8, copy=False)


def config_to_index(c) -> np.ndarray | int:
    """Big-endian binary index of one config (1-d) or a batch (2-d).

    Spin -1 (label 1) maps to bit 1, so all-up is index 0.
    """
    c = _as_spins(c)
    n = c.shape[-1]
    if n > 2 * MAX_SITES + 2:
        raise ValueError(f"too many sites for 64-bit indexing: {n}")
    bits = (1 - c.astype(np.int64)) // 2
    weights = np.int64(1) << np.arange(n - 1, -1, -1, dtype=np.int64)
    idx = bits @ weights
    return int(idx) if c.ndim == 1 else idx


def index_to_config(idx, n: int) -> np.ndarray:
    """Inverse of :func:`config_to_index`; accepts a scalar or an array."""
    idx = np.asarray(idx, dtype=np.int64)
    shifts = np.arange(n - 1, -1, -1, dtype=np.int64)
    bits = (idx[..., None] >> shifts) & 1
    return (1 - 2 * bits).astype(np.int8)


def all_configs(n: int) -> np.ndarray:
    """All 2**n configs in index order, shape (2**n, n)."""
    return index_to_config(np.arange(2**n), n)


def split_joint(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = x.shape[-1] // 2
    return x[..., :n], x[..., n:]


def join(alpha: np.ndarray, beta: np.ndarray) -> np.ndarray:
    alpha, beta = np.broadcast_arrays(_as_spins(alpha), _as_spins(beta))
    return np.concatenate([alpha, beta], axis=-1)


def swap_joint(x: np.ndarray) -> np.ndarray:
    """(alpha, beta) -> (beta, alpha)."""
    a, b = split_joint(x)
    return np.concatenate([b, a], axis=-1)


@dataclass(frozen=True)
class LatticeGeometry:
    """Periodic chain ``dims=(N,)`` or periodic grid ``dims=(M, N)``."""

    kind: str
    dims: tuple[int, ...]
    boundary: str = "periodic"

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if self.kind not in ("chain", "grid"):
            raise ValueError(f"unknown lattice kind {self.kind!r}")
        if self.boundary != "periodic":
            raise ValueError("only periodic boundaries are supported")
        if self.kind == "chain" and len(self.dims) != 1:
            raise ValueError("chain needs dims=(N,)")
        if self.kind == "grid" and len(self.dims) != 2:
            raise ValueError("grid needs dims=(M, N)")
        if self.n_sites < 2 or min(self.dims) < 1:
            raise ValueError("lattice needs at least two sites")
        if self.n_sites > MAX_SITES:
            raise ValueError(f"at most {MAX_SITES} sites supported")

    @classmethod
    def chain(cls, n: int) -> "LatticeGeometry":
        return cls("chain", (n,))

    @classmethod
    def grid(cls, m: int, n: int) -> "LatticeGeometry":
        return cls("grid", (m, n))

    @property
    def n_sites(self) -> int:
        return int(np.prod(self.dims))

    def site(self, r: int, c: int) -> int:
        m, n = self.dims
        return (r % m) * n + (c % n)


def snake_order(g: LatticeGeometry) -> list[int]:
    """Boustrophedon walk: even rows left to right, odd rows right to left.

    ``snake_order(g)[k]`` is the row-major index of the k-th site on the walk.
    For a 2 x 2 torus the walk is the lattice's own 4-cycle.
    """
    if g.kind == "chain":
        return list(range(g.n_sites))
    m, n = g.dims
    return [g.site(r, c if r % 2 == 0 else n - 1 - c) for r in range(m) for c in range(n)]


def bonds(g: LatticeGeometry) -> list[tuple[int, int]]:
    """Nearest-neighbour bonds with periodic wrap.

    A chain of N sites has N bonds; for N=2 this keeps both (0,1) and the
    wrap (1,0), i.e. the single pair appears twice. Grid bonds are the unique
    neighbour pairs, so width-2 axes do not double the coupling.
    """
    if g.kind == "chain":
        n = g.n_sites
        return [(i, (i + 1) % n) for i in range(n)]
    m, n = g.dims
    seen = set()
    out = []
    for r, c in product(range(m), range(n)):
        i = g.site(r, c)
        for j in (g.site(r, c + 1), g.site(r + 1, c)):
            key = (min(i, j), max(i, j))
            if i != j and key not in seen:
                seen.add(key)
                out.append((i, j))
    return out


def shift_cyclic(c, k: int, geometry: LatticeGeometry | None = None) -> np.ndarray:
    """Cyclically translate a config (or batch): output[i] = input[i - k].

    For a grid pass ``k=(dr, dc)``; the shift is applied per axis.
    """
    c = np.asarray(c)
    if geometry is None or geometry.kind == "chain":
        return np.roll(c, k, axis=-1)
    m, n = geometry.dims
    dr, dc = k
    grid = c.reshape(c.shape[:-1] + (m, n))
    grid = np.roll(np.roll(grid, dr, axis=-2), dc, axis=-1)
    return grid.reshape(c.shape)


def shift_joint(x, k, geometry: LatticeGeometry | None = None) -> np.ndarray:
    """Shift both copies of a joint config by the same offset."""
    a, b = split_joint(np.asarray(x))
    return np.concatenate(
        [shift_cyclic(a, k, geometry), shift_cyclic(b, k, geometry)], axis=-1
    )
