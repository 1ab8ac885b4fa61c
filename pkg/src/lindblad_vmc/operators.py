"""Few-site operators, model Hamiltonians and the vectorized Lindbladian.

Local matrices are written in the computational basis ordered by label
(label 0 = spin +1, label 1 = spin -1); multi-site matrices are Kronecker
products in the order of the term's ``sites`` tuple. The Lindbladian acts on
the doubled lattice whose sites ``0..N-1`` carry the left (ket) copy and
``N..2N-1`` the right (bra) copy, with the row-major vectorization
``|rho>> = sum rho[a, b] |a>|b>``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from itertools import product

import numpy as np
import scipy.sparse as sp

from .spinspace import LatticeGeometry, all_configs, bonds, config_to_index

SX = np.array([[0, 1], [1, 0]], dtype=complex)
SY = np.array([[0, -1j], [1j, 0]], dtype=complex)
SZ = np.array([[1, 0], [0, -1]], dtype=complex)
ID2 = np.eye(2, dtype=complex)
# maps label 0 (spin +1) to label 1 (spin -1) and kills label 1
SIGMA_MINUS = np.array([[0, 0], [1, 0]], dtype=complex)
PAULI = {"x": SX, "y": SY, "z": SZ}

MAX_TERM_SITES = 4


@dataclass(frozen=True)
class LocalTerm:
    sites: tuple[int, ...]
    matrix: np.ndarray
    coefficient: complex = 1.0

    def __post_init__(self):
        sites = tuple(int(s) for s in self.sites)
        k = len(sites)
        m = np.asarray(self.matrix, dtype=complex)
        if not 1 <= k <= MAX_TERM_SITES:
            raise ValueError(f"terms act on 1..{MAX_TERM_SITES} sites, got {k}")
        if len(set(sites)) != k:
            raise ValueError(f"repeated site in {sites}")
        if m.shape != (2**k, 2**k):
            raise ValueError(f"matrix shape {m.shape} does not match {k} sites")
        if not np.all(np.isfinite(m)):
            raise ValueError("non-finite matrix entries")
        object.__setattr__(self, "sites", sites)
        object.__setattr__(self, "matrix", m)

    @property
    def full_matrix(self) -> np.ndarray:
        return self.coefficient * self.matrix

    def canonical(self) -> "LocalTerm":
        """Same operator with sites sorted ascending and coefficient folded in."""
        order = np.argsort(self.sites)
        k = len(self.sites)
        m = self.full_matrix.reshape((2,) * (2 * k))
        m = m.transpose(list(order) + [k + o for o in order]).reshape(2**k, 2**k)
        return LocalTerm(tuple(np.asarray(self.sites)[order]), m, 1.0)


def pauli_string(ops: dict[int, str], coefficient: complex = 1.0) -> LocalTerm:
    """Product of Paulis, e.g. ``{0: "z", 1: "z"}``."""
    sites = tuple(ops)
    m = np.array([[1.0 + 0j]])
    for s in sites:
        m = np.kron(m, PAULI[ops[s]])
    return LocalTerm(sites, m, coefficient)


@dataclass
class HamiltonianSpec:
    geometry: LatticeGeometry
    couplings: dict[str, float]
    terms: list[LocalTerm] = field(default_factory=list)
    kind: str = "custom"

    @property
    def n_sites(self) -> int:
        return self.geometry.n_sites

    def dense(self) -> np.ndarray:
        return dense_operator(self.terms, self.n_sites)


def _check_finite(**kw):
    for k, v in kw.items():
        if not np.all(np.isfinite(v)):
            raise ValueError(f"{k} must be finite, got {v}")


def build_tfi_chain(n: int, v: float, g: float) -> HamiltonianSpec:
    """H = V/4 sum_i z_i z_{i+1} + g/2 sum_i x_i on a periodic ring."""
    if n < 2:
        raise ValueError("chain needs N >= 2")
    _check_finite(V=v, g=g)
    geom = LatticeGeometry.chain(n)
    terms = [pauli_string({i: "z", j: "z"}, v / 4) for i, j in bonds(geom)]
    terms += [pauli_string({i: "x"}, g / 2) for i in range(n)]
    return HamiltonianSpec(geom, {"V": v, "g": g}, terms, "tfi_chain")


def build_tfi_grid(m: int, n: int, v: float, g: float) -> HamiltonianSpec:
    if m < 2 or n < 2:
        raise ValueError("grid needs M, N >= 2")
    _check_finite(V=v, g=g)
    geom = LatticeGeometry.grid(m, n)
    terms = [pauli_string({i: "z", j: "z"}, v / 4) for i, j in bonds(geom)]
    terms += [pauli_string({i: "x"}, g / 2) for i in range(geom.n_sites)]
    return HamiltonianSpec(geom, {"V": v, "g": g}, terms, "tfi_grid")


def build_heisenberg_chain(n: int, j, b) -> HamiltonianSpec:
    """H = sum_i sum_k (J_k s^k_i s^k_{i+1} + B_k s^k_i), periodic."""
    if n < 2:
        raise ValueError("chain needs N >= 2")
    j = tuple(float(x) for x in j)
    b = tuple(float(x) for x in b)
    if len(j) != 3 or len(b) != 3:
        raise ValueError("J and B need three components (x, y, z)")
    _check_finite(J=j, B=b)
    geom = LatticeGeometry.chain(n)
    terms = []
    for (s1, s2), (k, jk) in product(bonds(geom), zip("xyz", j)):
        terms.append(pauli_string({s1: k, s2: k}, jk))
    for i, (k, bk) in product(range(n), zip("xyz", b)):
        terms.append(pauli_string({i: k}, bk))
    couplings = {f"J{k}": x for k, x in zip("xyz", j)}
    couplings |= {f"B{k}": x for k, x in zip("xyz", b)}
    return HamiltonianSpec(geom, couplings, terms, "heisenberg_chain")


def build_lowering_jumps(n: int, gamma: float) -> list[tuple[LocalTerm, float]]:
    if gamma < 0:
        raise ValueError("rate must be non-negative")
    return [(LocalTerm((i,), SIGMA_MINUS), float(gamma)) for i in range(n)]


def dense_operator(terms, n_sites: int) -> np.ndarray:
    """Dense 2**n x 2**n matrix of a sum of local terms (index arithmetic)."""
    dim = 2**n_sites
    out = np.zeros((dim, dim), dtype=complex)
    configs = all_configs(n_sites)
    for t in terms:
        k = len(t.sites)
        bits = (1 - configs[:, list(t.sites)].astype(np.int64)) // 2
        local = bits @ (1 << np.arange(k - 1, -1, -1))
        rest = configs.copy()
        rest[:, list(t.sites)] = 1
        rest_idx = config_to_index(rest)
        # rows and columns must agree on all sites outside the term
        same = rest_idx[:, None] == rest_idx[None, :]
        out += np.where(same, t.full_matrix[local[:, None], local[None, :]], 0)
    return out


@dataclass
class ConnectedElements:
    """Flattened nonzero row entries for a batch of joint configs.

    Entry ``e`` says ``<x[rows[e]]| L |configs[e]> = amplitudes[e]``.
    """

    rows: np.ndarray
    configs: np.ndarray
    amplitudes: np.ndarray

    def __len__(self):
        return len(self.rows)


class SuperOperator:
    """Vectorized Lindbladian as merged few-site terms on the doubled lattice."""

    def __init__(self, terms: list[LocalTerm], n_sites: int):
        self.n_sites = n_sites
        self.site_count = 2 * n_sites
        merged: dict[tuple[int, ...], np.ndarray] = {}
        for t in terms:
            c = t.canonical()
            if max(c.sites) >= self.site_count:
                raise ValueError(f"term {c.sites} outside the doubled lattice")
            left = [s < n_sites for s in c.sites]
            if not (all(left) or not any(left)):
                if not (len(c.sites) == 2 and c.sites[1] == c.sites[0] + n_sites):
                    raise ValueError(f"cross term {c.sites} is not a matched pair")
            merged[c.sites] = merged.get(c.sites, 0) + c.matrix
        self.terms = [
            LocalTerm(s, m) for s, m in merged.items() if np.any(np.abs(m) > 0)
        ]
        self._tables = [self._row_table(t) for t in self.terms]

    @staticmethod
    def _row_table(t: LocalTerm):
        k = len(t.sites)
        cols = [c for c in range(2**k) if np.any(t.matrix[:, c] != 0)]
        col_spins = [1 - 2 * ((c >> np.arange(k - 1, -1, -1)) & 1) for c in cols]
        return k, np.array(cols), np.array(col_spins, dtype=np.int8).reshape(-1, k)

    def connected_elements(self, x: np.ndarray) -> ConnectedElements:
        """All nonzero entries in rows ``x`` (batch of joint configs)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.int8))
        if x.shape[1] != self.site_count:
            raise ValueError(f"expected joint configs of length {self.site_count}")
        rows, confs, amps = [], [], []
        for t, (k, cols, col_spins) in zip(self.terms, self._tables):
            sites = list(t.sites)
            bits = (1 - x[:, sites].astype(np.int64)) // 2
            local = bits @ (1 << np.arange(k - 1, -1, -1))
            vals = t.matrix[local[:, None], cols[None, :]]  # (b, ncols)
            rr, cc = np.nonzero(vals)
            new = x[rr].copy()
            new[:, sites] = col_spins[cc]
            rows.append(rr)
            confs.append(new)
            amps.append(vals[rr, cc])
        rows = np.concatenate(rows)
        confs = np.concatenate(confs)
        amps = np.concatenate(amps)
        # merge coincident (row, x') pairs
        idx = config_to_index(confs)
        order = np.lexsort((idx, rows))
        rows, idx, confs, amps = rows[order], idx[order], confs[order], amps[order]
        start = np.ones(len(rows), dtype=bool)
        start[1:] = (rows[1:] != rows[:-1]) | (idx[1:] != idx[:-1])
        seg = np.flatnonzero(start)
        amps = np.add.reduceat(amps, seg) if len(amps) else amps
        rows, confs = rows[seg], confs[seg]
        keep = amps != 0
        return ConnectedElements(rows[keep], confs[keep], amps[keep])

    @cached_property
    def sparse(self) -> sp.csr_matrix:
        """Full 4**N x 4**N matrix assembled row by row from connected elements."""
        if self.n_sites > 8:
            raise ValueError("sparse assembly limited to N <= 8")
        x = all_configs(self.site_count)
        ce = self.connected_elements(x)
        dim = 4**self.n_sites
        cols = config_to_index(ce.configs)
        return sp.csr_matrix((ce.amplitudes, (ce.rows, cols)), shape=(dim, dim))

    def dense(self) -> np.ndarray:
        return self.sparse.toarray()

    def apply_dense(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v)
        if v.shape[0] != 4**self.n_sites:
            raise ValueError(f"vector length {v.shape[0]} != 4**{self.n_sites}")
        return self.sparse @ v


def relabel_sites(h: HamiltonianSpec, order) -> HamiltonianSpec:
    """Same model with site ``order[k]`` renamed to ``k``."""
    order = [int(i) for i in order]
    if sorted(order) != list(range(h.n_sites)):
        raise ValueError("order must be a permutation of the sites")
    new = {old: k for k, old in enumerate(order)}
    terms = [LocalTerm(tuple(new[i] for i in t.sites), t.matrix, t.coefficient) for t in h.terms]
    return HamiltonianSpec(h.geometry, dict(h.couplings), terms, h.kind)


def vectorized_lindbladian(h: HamiltonianSpec, jumps) -> SuperOperator:
    """-i(H x 1 - 1 x H^T) + sum_i g_i [L x L* - (L^dag L x 1 + 1 x L^T L*)/2]."""
    return _lindbladian(h.terms, h.n_sites, jumps)


def single_site_lindbladian(g: float, gamma: float = 1.0) -> SuperOperator:
    """One driven, decaying spin: H = (g/2) sigma^x with a sigma^- jump."""
    _check_finite(g=g, gamma=gamma)
    return _lindbladian([pauli_string({0: "x"}, g / 2)], 1, [(LocalTerm((0,), SIGMA_MINUS), gamma)])


def _lindbladian(h_terms, n: int, jumps) -> SuperOperator:
    terms = []
    for t in h_terms:
        m = t.full_matrix
        terms.append(LocalTerm(t.sites, -1j * m))
        terms.append(LocalTerm(tuple(s + n for s in t.sites), 1j * m.T))
    for jump, rate in jumps:
        if max(jump.sites) >= n:
            raise ValueError("jump operator outside the Hamiltonian's lattice")
        if len(jump.sites) != 1:
            raise ValueError("only single-site jump operators are supported")
        (i,) = jump.sites
        ell = jump.full_matrix
        ldl = ell.conj().T @ ell
        terms.append(LocalTerm((i, i + n), rate * np.kron(ell, ell.conj())))
        terms.append(LocalTerm((i,), -0.5 * rate * ldl))
        terms.append(LocalTerm((i + n,), -0.5 * rate * (ell.T @ ell.conj())))
    return SuperOperator(terms, n)


def magnetization_terms(n: int, axis: str) -> list[LocalTerm]:
    """Site-averaged Pauli (1/N) sum_i sigma^k_i."""
    return [pauli_string({i: axis}, 1.0 / n) for i in range(n)]
