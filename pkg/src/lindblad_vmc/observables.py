"""Observable estimation from a trained ansatz.

Expectation values use the diagonal of rho as a sampling weight:
<A> = sum_a rho(a, a) A~(a) / sum_a rho(a, a) with the local estimator
A~(a) = sum_b rho(a, b) / rho(a, a) <b|A|a>. Chains sample |rho(a, a)|; the
sign of rho(a, a) is folded back in as a reweighting factor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ansatz import ENUMERATE_MAX_SITES, ParameterSet, enumerate_full_matrix, log_density
from .operators import LocalTerm, dense_operator, magnetization_terms
from .sampler import LogDensityMemo, SamplerConfig, sample_diagonal
from .spinspace import all_configs, join


@dataclass
class ObservableSpec:
    name: str
    terms: list[LocalTerm]
    site_average: bool = False

    def __post_init__(self):
        n = 1 + max(max(t.sites) for t in self.terms)
        if n <= 8:
            m = dense_operator(self.terms, n)
            if not np.allclose(m, m.conj().T, atol=1e-12):
                raise ValueError(f"observable {self.name!r} is not Hermitian")


def magnetization(n: int, axis: str) -> ObservableSpec:
    return ObservableSpec(f"sigma_{axis}", magnetization_terms(n, axis), site_average=True)


def _terms(obs) -> list[LocalTerm]:
    return obs.terms if isinstance(obs, ObservableSpec) else list(obs)


def local_observable_estimator(params: ParameterSet, alpha: np.ndarray, obs, evaluate=None):
    """A~(alpha) for a batch of N-site configs."""
    alpha = np.atleast_2d(np.asarray(alpha, dtype=np.int8))
    evaluate = evaluate or (lambda c: log_density(params, c))
    log_diag = evaluate(join(alpha, alpha))
    out = np.zeros(len(alpha), dtype=complex)
    betas, rows, amps = [], [], []
    for t in _terms(obs):
        sites = list(t.sites)
        k = len(sites)
        m = t.full_matrix
        bits = (1 - alpha[:, sites].astype(np.int64)) // 2
        col = bits @ (1 << np.arange(k - 1, -1, -1))
        for r in range(2**k):
            amp = m[r, col]
            nz = np.flatnonzero(amp)
            if not len(nz):
                continue
            beta = alpha[nz].copy()
            beta[:, sites] = 1 - 2 * ((r >> np.arange(k - 1, -1, -1)) & 1)
            betas.append(beta)
            rows.append(nz)
            amps.append(amp[nz])
    if betas:
        rows = np.concatenate(rows)
        betas = np.concatenate(betas)
        logs = evaluate(join(alpha[rows], betas))
        np.add.at(out, rows, np.concatenate(amps) * np.exp(logs - log_diag[rows]))
    return out


def _diag_sign(log_diag):
    return np.sign(np.cos(np.imag(log_diag)))


def _jackknife_ratio(num, den, chain_ids):
    chains = np.unique(chain_ids)
    num_c = np.array([num[chain_ids == c].sum() for c in chains])
    den_c = np.array([den[chain_ids == c].sum() for c in chains])
    mean = num_c.sum() / den_c.sum()
    k = len(chains)
    if k < 2:
        return float(mean), float("nan")
    loo = (num_c.sum() - num_c) / (den_c.sum() - den_c)
    err = np.sqrt((k - 1) / k * np.sum((loo - loo.mean()) ** 2))
    return float(mean), float(err)


@dataclass
class Estimate:
    name: str
    mean: float
    error: float
    n_samples: int
    n_flagged: int = 0


def estimate_observables(params: ParameterSet, observables: list[ObservableSpec],
                         cfg: SamplerConfig, seed=0) -> list[Estimate]:
    """Monte Carlo estimates with jackknife errors over chains, one shared chain."""
    memo = LogDensityMemo(params, diagonal=True)
    batch = sample_diagonal(params, cfg, seed=seed, memo=memo)
    joint_memo = LogDensityMemo(params)
    sign = _diag_sign(batch.log_densities)
    out = []
    for obs in observables:
        with np.errstate(over="ignore", invalid="ignore"):
            loc = local_observable_estimator(params, batch.configs, obs, joint_memo)
        # a vanishing diagonal gives a non-finite estimate; drop and count those
        ok = np.isfinite(loc)
        w = np.where(ok, sign, 0.0)
        mean, err = _jackknife_ratio(w * np.where(ok, loc.real, 0.0), w, batch.chain_ids)
        out.append(Estimate(obs.name, mean, err, int(ok.sum()), int((~ok).sum())))
    return out


def estimate_magnetization(params: ParameterSet, axis: str, cfg: SamplerConfig, seed=0):
    """Site-averaged <sigma^axis> as (mean, MC error)."""
    est = estimate_observables(params, [magnetization(params.config.sites, axis)], cfg, seed)[0]
    return est.mean, est.error


def expectation_enumerated(params: ParameterSet, obs) -> float:
    """The same estimator averaged with exact diagonal weights (no sampling)."""
    n = params.config.sites
    alpha = all_configs(n)
    log_diag = log_density(params, join(alpha, alpha))
    w = np.real(np.exp(log_diag - log_diag.real.max()))
    loc = local_observable_estimator(params, alpha, obs)
    return float(np.real(np.sum(w * loc) / np.sum(w)))


def purity_enumerated(params: ParameterSet) -> float:
    """Tr(rho^2) / Tr(rho)^2 of the enumerated ansatz matrix."""
    if params.config.sites > ENUMERATE_MAX_SITES:
        raise NotImplementedError(
            f"purity is enumeration-only (N <= {ENUMERATE_MAX_SITES}); "
            "a Monte Carlo purity estimator is not provided"
        )
    rho = enumerate_full_matrix(params, normalize=False)
    return float(np.real(np.vdot(rho.conj().T, rho)) / np.real(np.trace(rho)) ** 2)
