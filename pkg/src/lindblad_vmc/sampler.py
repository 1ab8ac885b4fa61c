"""Metropolis-Hastings chains over joint and diagonal configurations."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .ansatz import ParameterSet, log_density
from .spinspace import config_to_index, join

FROZEN_ACCEPTANCE = 0.01
# dense memo tables up to 4**10 entries (16 MB of complex128)
TABLE_MAX_BITS = 20


class FrozenChainWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    """Chain settings; ``None`` burn-in/thinning pick the N-dependent defaults."""

    n_chains: int = 16
    samples_per_chain: int = 64
    burn_in: int | None = None
    thinning: int | None = None

    def __post_init__(self):
        for name in ("n_chains", "samples_per_chain", "burn_in", "thinning"):
            val = getattr(self, name)
            if val is not None and val < 1:
                raise ValueError(f"{name} must be positive, got {val}")

    def resolved(self, n_flip_sites: int) -> tuple[int, int]:
        burn = 10 * n_flip_sites if self.burn_in is None else self.burn_in
        thin = n_flip_sites if self.thinning is None else self.thinning
        return burn, thin

    @property
    def n_samples(self) -> int:
        return self.n_chains * self.samples_per_chain


class LogDensityMemo:
    """Memoized log rho for one fixed parameter snapshot.

    Entries are keyed by joint-config index; every configuration is passed
    through the network at most once per snapshot.
    """

    def __init__(self, params: ParameterSet, diagonal: bool = False):
        self.params = params
        self.diagonal = diagonal
        n = params.config.sites
        self.n_bits = n if diagonal else 2 * n
        self.table = None
        if self.n_bits <= TABLE_MAX_BITS:
            self.table = np.full(2**self.n_bits, np.nan + 0j)
        self.evaluations = 0

    def _eval(self, configs):
        self.evaluations += len(configs)
        x = join(configs, configs) if self.diagonal else configs
        return log_density(self.params, x)

    def __call__(self, configs: np.ndarray) -> np.ndarray:
        configs = np.atleast_2d(configs)
        if self.table is None:
            return self._eval(configs)
        idx = config_to_index(configs)
        vals = self.table[idx]
        missing = np.isnan(vals.real)
        if missing.any():
            new_idx, first = np.unique(idx[missing], return_index=True)
            self.table[new_idx] = self._eval(configs[missing][first])
            vals = self.table[idx]
        return vals


@dataclass
class ChainState:
    current: np.ndarray
    current_log_density: complex
    rng: np.random.Generator
    accept_count: int = 0
    step_count: int = 0


@dataclass
class SampleBatch:
    """Markov-chain draws with cached log-densities.

    ``weights`` default to uniform 1/n; the estimators in :mod:`vmc` read
    them, which lets an enumerated batch carry exact |rho|^2 weights.
    """

    configs: np.ndarray
    log_densities: np.ndarray
    params: ParameterSet | None = None
    chain_ids: np.ndarray | None = None
    weights: np.ndarray | None = None
    acceptance: float = float("nan")
    log_derivs: np.ndarray | None = None
    local_costs: np.ndarray | None = None
    final_states: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.weights is None and len(self.configs):
            self.weights = np.full(len(self.configs), 1.0 / len(self.configs))

    def __len__(self):
        return len(self.configs)


def seed_sequence(seed) -> np.random.SeedSequence:
    """Fresh SeedSequence from an int or a tuple of ints (e.g. (seed, step))."""
    if isinstance(seed, np.random.SeedSequence):
        return np.random.SeedSequence(seed.entropy, spawn_key=seed.spawn_key)
    return np.random.SeedSequence(list(seed) if isinstance(seed, (tuple, list)) else seed)


def chain_generators(seed, n_chains: int) -> list[np.random.Generator]:
    """One Philox stream per chain, all derived from one master seed."""
    children = seed_sequence(seed).spawn(n_chains + 1)[1:]
    return [np.random.Generator(np.random.Philox(c)) for c in children]


def propose_local(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Flip one site chosen uniformly among all sites of ``x``."""
    out = np.array(x, dtype=np.int8)
    out[..., rng.integers(out.shape[-1])] *= -1
    return out


def acceptance_probability(log_old, log_new, power: float = 2.0):
    """min(1, |rho_new|^power / |rho_old|^power) from log-amplitudes."""
    return np.minimum(1.0, np.exp(power * (np.real(log_new) - np.real(log_old))))


def _advance(x, logp, sites, log_u, evaluate, power):
    """One vectorized Metropolis step for all chains."""
    rows = np.arange(len(x))
    prop = x.copy()
    prop[rows, sites] *= -1
    logp_new = evaluate(prop)
    accept = log_u < power * (logp_new.real - logp.real)
    x = np.where(accept[:, None], prop, x)
    logp = np.where(accept, logp_new, logp)
    return x, logp, accept


def metropolis_step(state: ChainState, params: ParameterSet | LogDensityMemo) -> ChainState:
    evaluate = params if callable(params) else LogDensityMemo(params)
    site = state.rng.integers(len(state.current))
    log_u = np.log(state.rng.random())
    x, logp, acc = _advance(
        state.current[None], np.array([state.current_log_density]), np.array([site]),
        np.array([log_u]), evaluate, 2.0,
    )
    return ChainState(
        x[0], complex(logp[0]), state.rng,
        state.accept_count + int(acc[0]), state.step_count + 1,
    )


def _run_chains(evaluate, init, cfg: SamplerConfig, seed, power, label):
    n_chains, n_sites = init.shape
    burn, thin = cfg.resolved(n_sites)
    n_steps = burn + cfg.samples_per_chain * thin
    gens = chain_generators(seed, n_chains)
    sites = np.stack([g.integers(n_sites, size=n_steps) for g in gens], axis=1)
    log_u = np.log(np.stack([g.random(n_steps) for g in gens], axis=1))

    x = init.astype(np.int8).copy()
    logp = evaluate(x)
    out_x = np.empty((cfg.samples_per_chain, n_chains, n_sites), dtype=np.int8)
    out_l = np.empty((cfg.samples_per_chain, n_chains), dtype=complex)
    acc_burn = acc_total = 0
    for t in range(n_steps):
        x, logp, acc = _advance(x, logp, sites[t], log_u[t], evaluate, power)
        acc_total += int(acc.sum())
        if t < burn:
            acc_burn += int(acc.sum())
        else:
            k, r = divmod(t - burn + 1, thin)
            if r == 0:
                out_x[k - 1], out_l[k - 1] = x, logp
    if burn and acc_burn / (burn * n_chains) < FROZEN_ACCEPTANCE:
        warnings.warn(
            f"{label} chains look frozen: burn-in acceptance "
            f"{acc_burn / (burn * n_chains):.4f} < {FROZEN_ACCEPTANCE}",
            FrozenChainWarning,
            stacklevel=3,
        )
    configs = out_x.transpose(1, 0, 2).reshape(-1, n_sites)
    logs = out_l.T.reshape(-1)
    chain_ids = np.repeat(np.arange(n_chains), cfg.samples_per_chain)
    return configs, logs, chain_ids, acc_total / (n_steps * n_chains), x


def _initial(init, n_chains, n_sites, seed):
    if init is not None:
        init = np.atleast_2d(np.asarray(init, dtype=np.int8))
        if init.shape != (n_chains, n_sites):
            raise ValueError(f"initial states need shape {(n_chains, n_sites)}")
        return init
    rng = np.random.default_rng(seed_sequence(seed).spawn(1)[0])
    return (1 - 2 * rng.integers(0, 2, size=(n_chains, n_sites))).astype(np.int8)


def sample_joint(params: ParameterSet, cfg: SamplerConfig, seed=0, init=None,
                 memo: LogDensityMemo | None = None) -> SampleBatch:
    """Draw joint configs from |rho(a, b)|^2.

    ``init`` optionally carries over chain states from a previous call.
    """
    memo = memo if memo is not None else LogDensityMemo(params)
    n2 = 2 * params.config.sites
    init = _initial(init, cfg.n_chains, n2, seed)
    configs, logs, ids, acc, final = _run_chains(memo, init, cfg, seed, 2.0, "joint")
    return SampleBatch(configs, logs, params, ids, acceptance=acc, final_states=final)


def sample_diagonal(params: ParameterSet, cfg: SamplerConfig, seed=0, init=None,
                    memo: LogDensityMemo | None = None) -> SampleBatch:
    """Draw alpha from |rho(a, a)|; configs in the batch are N-site."""
    memo = memo if memo is not None else LogDensityMemo(params, diagonal=True)
    n = params.config.sites
    init = _initial(init, cfg.n_chains, n, seed)
    configs, logs, ids, acc, final = _run_chains(memo, init, cfg, seed, 1.0, "diagonal")
    return SampleBatch(configs, logs, params, ids, acceptance=acc, final_states=final)


def transition_matrix(params: ParameterSet, power: float = 2.0) -> np.ndarray:
    """Exact single-flip Metropolis kernel over all joint configs (tiny N only)."""
    from .spinspace import all_configs

    n2 = 2 * params.config.sites
    x = all_configs(n2)
    logp = log_density(params, x)
    dim = len(x)
    t = np.zeros((dim, dim))
    for site in range(n2):
        y = x.copy()
        y[:, site] *= -1
        j = config_to_index(y)
        a = acceptance_probability(logp, logp[j], power) / n2
        t[np.arange(dim), j] += a
    t[np.arange(dim), np.arange(dim)] += 1.0 - t.sum(axis=1)
    return t
