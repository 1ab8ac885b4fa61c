"""Reference steady-state solvers and exact expectation values."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .operators import LocalTerm, SuperOperator, dense_operator

log = logging.getLogger(__name__)

ED_MAX_SITES = 6
BICGSTAB_MAX_SITES = 7


class SteadyStateError(RuntimeError):
    pass


class NoSteadyStateError(SteadyStateError):
    """Smallest eigenvalue of L^dag L is not numerically zero."""


class ConvergenceError(SteadyStateError):
    def __init__(self, msg, residual):
        super().__init__(f"{msg} (residual {residual:.3e})")
        self.residual = residual


@dataclass
class DensityMatrix:
    """Normalized, Hermitized density matrix plus solver diagnostics."""

    entries: np.ndarray
    info: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    @property
    def n_sites(self) -> int:
        return int(round(np.log2(self.dim)))

    def vec(self) -> np.ndarray:
        return self.entries.reshape(-1)

    @property
    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.entries)[0])


def devectorize(v: np.ndarray) -> DensityMatrix:
    d = int(round(np.sqrt(len(v))))
    rho = v.reshape(d, d)
    rho = 0.5 * (rho + rho.conj().T)
    rho = rho / np.trace(rho).real
    return DensityMatrix(rho)


def _residual(s: SuperOperator, rho: DensityMatrix) -> float:
    v = rho.vec()
    return float(np.linalg.norm(s.apply_dense(v)) / np.linalg.norm(v))


def steady_state_ed(s: SuperOperator) -> DensityMatrix:
    """Null vector of L^dag L by Hermitian eigensolve.

    Full diagonalization up to N=4, shift-invert Lanczos for N=5 and 6.
    """
    n = s.n_sites
    if n > ED_MAX_SITES:
        raise ValueError(f"ED supports N <= {ED_MAX_SITES} sites, got {n}")
    t0 = time.perf_counter()
    lmat = s.sparse
    big_l = (lmat.conj().T @ lmat).tocsc()
    norm = float(spla.norm(big_l, 1))
    if n <= 4:
        w, v = sla.eigh(big_l.toarray(), subset_by_index=[0, 0])
        lam, vec = float(w[0]), v[:, 0]
    else:
        sigma = -1e-6 * norm
        w, v = spla.eigsh(big_l, k=1, sigma=sigma, which="LM", tol=1e-12)
        lam, vec = float(w[0]), v[:, 0]
    if lam > 1e-10 * norm:
        raise NoSteadyStateError(
            f"no steady state found: smallest eigenvalue {lam:.3e} "
            f"exceeds {1e-10 * norm:.3e}"
        )
    # fix the global phase so the trace is real and positive
    d = 2**n
    tr = vec.reshape(d, d).trace()
    if abs(tr) < 1e-14:
        raise NoSteadyStateError("null vector has zero trace")
    rho = devectorize(vec * (abs(tr) / tr))
    rho.info.update(
        method="ed",
        eigenvalue=lam,
        residual=_residual(s, rho),
        seconds=time.perf_counter() - t0,
    )
    return rho


def _trace_augmented(s: SuperOperator, ref: int = 0):
    """Operator L with row ``ref`` (a diagonal config) replaced by the trace row."""
    n = s.n_sites
    d = 2**n
    dim = d * d
    diag = np.arange(d) * (d + 1)
    if ref not in diag:
        raise ValueError("reference row must be a diagonal configuration")
    lmat = s.sparse.tolil(copy=True)
    lmat[ref, :] = 0
    lmat = lmat.tocsr()
    trace_row = sp.csr_matrix((np.ones(d), (np.full(d, ref), diag)), shape=(dim, dim))
    return (lmat + trace_row).tocsr()


def bicgstab(matvec, b, x0=None, tol=1e-10, max_iter=1000, precond=None):
    """Right-preconditioned BiCGStab.

    Returns ``(x, residual_norm, iterations)``. A zero inner product with the
    shadow residual triggers one restart with a perturbed shadow vector before
    giving up.
    """
    n = len(b)
    x = np.zeros(n, dtype=complex) if x0 is None else np.array(x0, dtype=complex)
    m = precond if precond is not None else (lambda v: v)
    r = b - matvec(x)
    bnorm = np.linalg.norm(b) or 1.0
    rnorm = np.linalg.norm(r)
    if rnorm <= tol * bnorm:
        return x, rnorm, 0
    r_hat = r.copy()
    restarted = False
    rho_old = alpha = omega = 1.0 + 0j
    v = p = np.zeros(n, dtype=complex)
    it = 0
    while it < max_iter:
        it += 1
        rho_new = np.vdot(r_hat, r)
        if abs(rho_new) < 1e-300 or abs(omega) < 1e-300:
            if restarted:
                raise ConvergenceError("BiCGStab breakdown", rnorm / bnorm)
            restarted = True
            rng = np.random.default_rng(it)
            r_hat = r + 1e-3 * np.linalg.norm(r) * rng.standard_normal(n) / np.sqrt(n)
            rho_old = alpha = omega = 1.0 + 0j
            v = p = np.zeros(n, dtype=complex)
            continue
        beta = (rho_new / rho_old) * (alpha / omega)
        p = r + beta * (p - omega * v)
        p_hat = m(p)
        v = matvec(p_hat)
        denom = np.vdot(r_hat, v)
        if abs(denom) < 1e-300:
            if restarted:
                raise ConvergenceError("BiCGStab breakdown", rnorm / bnorm)
            restarted = True
            r_hat = r.copy() + 1e-3 * np.linalg.norm(r)
            rho_old = alpha = omega = 1.0 + 0j
            v = p = np.zeros(n, dtype=complex)
            continue
        alpha = rho_new / denom
        s_vec = r - alpha * v
        if np.linalg.norm(s_vec) <= tol * bnorm:
            x = x + alpha * p_hat
            r = s_vec
            rnorm = np.linalg.norm(r)
            break
        s_hat = m(s_vec)
        t = matvec(s_hat)
        tt = np.vdot(t, t).real
        omega = np.vdot(t, s_vec) / tt if tt > 0 else 0.0
        x = x + alpha * p_hat + omega * s_hat
        r = s_vec - omega * t
        rho_old = rho_new
        rnorm = np.linalg.norm(r)
        if rnorm <= tol * bnorm:
            break
    return x, rnorm, it


def steady_state_bicgstab(
    s: SuperOperator,
    tol: float = 1e-7,
    x0: np.ndarray | None = None,
    max_iter: int | None = None,
) -> DensityMatrix:
    """Solve the trace-augmented system iteratively.

    Convergence is judged on the original operator: ``||L rho|| <= tol ||rho||``.
    """
    n = s.n_sites
    if n > BICGSTAB_MAX_SITES:
        raise ValueError(f"BiCGStab supports N <= {BICGSTAB_MAX_SITES}, got {n}")
    t0 = time.perf_counter()
    d = 2**n
    dim = d * d
    if max_iter is None:
        max_iter = min(20 * dim, 2_000_000)
    ref = 0
    a = _trace_augmented(s, ref)
    b = np.zeros(dim, dtype=complex)
    b[ref] = 1.0
    diag = a.diagonal()
    inv = np.where(np.abs(diag) > 1e-12, 1.0 / np.where(diag == 0, 1, diag), 1.0)
    precond = lambda v: inv * v  # noqa: E731

    if x0 is not None:
        x0 = np.asarray(x0, dtype=complex).reshape(-1)
        x0 = x0 / x0.reshape(d, d).trace()
    x = x0
    inner_tol = tol
    total = 0
    while True:
        x, rnorm, its = bicgstab(
            a.dot, b, x0=x, tol=inner_tol, max_iter=max_iter - total, precond=precond
        )
        total += its
        res = np.linalg.norm(s.apply_dense(x)) / np.linalg.norm(x)
        if res <= tol:
            break
        if total >= max_iter or inner_tol < 1e-15:
            raise ConvergenceError(f"BiCGStab did not converge in {total} iterations", res)
        inner_tol /= 10
    rho = devectorize(x)
    rho.info.update(
        method="bicgstab",
        iterations=total,
        residual=_residual(s, rho),
        seconds=time.perf_counter() - t0,
    )
    return rho


def expectation_exact(terms: list[LocalTerm], rho: DensityMatrix | np.ndarray) -> float:
    """Tr(O rho) / Tr(rho) for a Hermitian sum of local terms."""
    m = rho.entries if isinstance(rho, DensityMatrix) else np.asarray(rho)
    n = int(round(np.log2(m.shape[0])))
    op = dense_operator(terms, n)
    val = np.trace(op @ m) / np.trace(m)
    if abs(val.imag) > 1e-9 * max(1.0, abs(val.real)):
        log.warning("expectation has imaginary part %.3e", val.imag)
    return float(val.real)


def purity_exact(rho: DensityMatrix | np.ndarray) -> float:
    m = rho.entries if isinstance(rho, DensityMatrix) else np.asarray(rho)
    return float(np.real(np.vdot(m.conj().T, m)))


def single_qubit_steady(g: float) -> np.ndarray:
    """Closed-form steady state for H = (g/2) sigma^x with decay rate 1."""
    d = 1 + 2 * g * g
    return np.array([[g * g, -1j * g], [1j * g, 1 + g * g]], dtype=complex) / d
