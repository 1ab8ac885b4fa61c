"""Variational steady-state optimization: estimators, SR and the train loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.linalg as sla
import scipy.sparse.linalg as spla

from .ansatz import NonFiniteError, ParameterSet, log_density, log_density_and_derivatives, vjp_log_density
from .operators import SuperOperator
from .sampler import LogDensityMemo, SampleBatch, SamplerConfig, sample_joint
from .spinspace import all_configs, config_to_index

log = logging.getLogger(__name__)

DIRECT_SOLVE_MAX = 5000
MAX_DROPPED_FRACTION = 1e-3


class TrainingHalted(RuntimeError):
    pass


# --------------------------------------------------------------------------
# local estimators
# --------------------------------------------------------------------------


@dataclass
class _Connected:
    """Row structure of L over the unique sampled configs."""

    uniq: np.ndarray          # unique sampled configs
    inverse: np.ndarray       # sample -> unique row
    counts_w: np.ndarray      # summed weights per unique row
    rows: np.ndarray          # connected entry -> unique row
    amps: np.ndarray
    targets: np.ndarray       # connected entry -> index into `support`
    support: np.ndarray       # configs whose log rho is needed
    log_support: np.ndarray
    log_uniq: np.ndarray


def _connect(params, configs, weights, s: SuperOperator, evaluate) -> _Connected:
    idx = config_to_index(configs)
    _, first, inverse = np.unique(idx, return_index=True, return_inverse=True)
    uniq = configs[first]
    counts_w = np.bincount(inverse, weights=weights, minlength=len(uniq))
    ce = s.connected_elements(uniq)
    allc = np.concatenate([uniq, ce.configs])
    all_idx = config_to_index(allc)
    _, sfirst, sinv = np.unique(all_idx, return_index=True, return_inverse=True)
    support = allc[sfirst]
    log_support = evaluate(support)
    log_uniq = log_support[sinv[: len(uniq)]]
    return _Connected(uniq, inverse, counts_w, ce.rows, ce.amplitudes,
                      sinv[len(uniq):], support, log_support, log_uniq)


def _local_from(conn: _Connected):
    ratio = np.exp(conn.log_support[conn.targets] - conn.log_uniq[conn.rows])
    contrib = conn.amps * ratio
    loc = np.zeros(len(conn.uniq), dtype=complex)
    np.add.at(loc, conn.rows, contrib)
    return loc, ratio


def local_cost(params: ParameterSet, x: np.ndarray, s: SuperOperator, evaluate=None):
    """Local estimator L~(x) = sum_x' L(x, x') rho(x') / rho(x)."""
    x = np.atleast_2d(x)
    evaluate = evaluate or (lambda c: log_density(params, c))
    conn = _connect(params, x, np.ones(len(x)), s, evaluate)
    loc, _ = _local_from(conn)
    return loc[conn.inverse]


@dataclass
class Estimate:
    cost: float
    grad: np.ndarray
    cost_err: float = float("nan")
    n_dropped: int = 0
    metric: np.ndarray | None = None


def _chain_error(values, weights, chain_ids):
    if chain_ids is None or len(np.unique(chain_ids)) < 2:
        return float(np.sqrt(np.sum(weights * (values - np.sum(weights * values)) ** 2)
                             / max(len(values) - 1, 1)))
    means = np.array([values[chain_ids == c].mean() for c in np.unique(chain_ids)])
    return float(means.std(ddof=1) / np.sqrt(len(means)))


def fill_batch(batch: SampleBatch, s: SuperOperator, evaluate=None,
               with_derivs: bool = True) -> _Connected:
    """Populate ``local_costs`` (and ``log_derivs``) of a batch in place."""
    p = batch.params
    evaluate = evaluate or (lambda c: log_density(p, c))
    conn = _connect(p, batch.configs, batch.weights, s, evaluate)
    loc, _ = _local_from(conn)
    batch.local_costs = loc[conn.inverse]
    if with_derivs:
        _, o_uniq = log_density_and_derivatives(p, conn.uniq)
        batch.log_derivs = o_uniq[conn.inverse]
        batch._o_uniq = o_uniq
    batch._conn = conn
    return conn


def estimate_cost_and_grad(batch: SampleBatch, s: SuperOperator, evaluate=None) -> Estimate:
    """Weighted estimates of cost = <|L~|^2> and its real-parameter gradient.

    grad_i = 2 Re[<conj(L~) T~_i> - cost <O_i>], with
    T~_i(x) = sum_x' L(x, x') rho(x')/rho(x) O_i(x'), evaluated as a single
    vector-Jacobian product over all connected configurations.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    conn = getattr(batch, "_conn", None)
    if conn is None or batch.local_costs is None:
        conn = fill_batch(batch, s, evaluate, with_derivs=False)
    loc_u, ratio = _local_from(conn)
    finite = np.isfinite(loc_u)
    n_dropped = int(np.sum(~finite[conn.inverse]))
    w = conn.counts_w * finite
    w = w / w.sum()
    loc_u = np.where(finite, loc_u, 0)
    cost_u = np.abs(loc_u) ** 2
    cost = float(np.sum(w * cost_u))

    # cotangents on log rho over the support set
    c = np.zeros(len(conn.support), dtype=complex)
    coef = 2 * w[conn.rows] * np.conj(loc_u[conn.rows]) * conn.amps * ratio
    np.add.at(c, conn.targets, np.where(np.isfinite(coef), coef, 0))
    uniq_pos = np.searchsorted(config_to_index(conn.support), config_to_index(conn.uniq))
    np.add.at(c, uniq_pos, -2 * cost * w)
    grad, _ = vjp_log_density(batch.params, conn.support, c)

    per_sample = cost_u[conn.inverse]
    err = _chain_error(per_sample, batch.weights, batch.chain_ids)
    return Estimate(cost, grad, err, n_dropped)


def _centered_rows(batch: SampleBatch) -> np.ndarray:
    """Real matrix X with S = X^T X: weighted, centered Re/Im rows of O."""
    if batch.log_derivs is None:
        raise ValueError("batch has no log-derivatives")
    conn = getattr(batch, "_conn", None)
    if conn is not None and getattr(batch, "_o_uniq", None) is not None:
        o, w = batch._o_uniq, conn.counts_w
    else:
        o, w = batch.log_derivs, batch.weights
    w = w / w.sum()
    centered = (o - w @ o) * np.sqrt(w)[:, None]
    # contiguous copies keep the products on BLAS
    return np.concatenate([centered.real, centered.imag])


def metric_tensor(batch: SampleBatch) -> np.ndarray:
    """Real part of the weighted covariance of log-derivatives."""
    x = _centered_rows(batch)
    return x.T @ x


def _psd_solve(a: np.ndarray, b: np.ndarray, shift: float) -> np.ndarray:
    """(A + shift I)^-1 b for symmetric PSD A, clipping roundoff-negative modes."""
    e, v = np.linalg.eigh(a)
    return v @ ((v.T @ b) / (np.clip(e, 0.0, None) + shift))


def _fallback(solve, grad, shift):
    try:
        delta = solve()
        if np.all(np.isfinite(delta)):
            return delta
        exc = "non-finite solution"
    except np.linalg.LinAlgError as e:
        exc = e
    log.warning("SR solve failed (%s); falling back to grad/shift", exc)
    return grad / shift


def sr_precondition(s_mat: np.ndarray, grad: np.ndarray, shift: float) -> np.ndarray:
    """Solve (S + shift I) delta = grad."""
    if shift <= 0:
        raise ValueError("diagonal shift must be positive")
    n = len(grad)
    a = s_mat + shift * np.eye(n)
    try:
        if n <= DIRECT_SOLVE_MAX:
            delta = sla.cho_solve(sla.cho_factor(a), grad)
        else:
            delta, info = spla.cg(a, grad, rtol=1e-12, maxiter=10 * n)
            if info != 0:
                raise np.linalg.LinAlgError(f"CG returned {info}")
        if not np.all(np.isfinite(delta)):
            raise np.linalg.LinAlgError("non-finite SR solution")
    except (np.linalg.LinAlgError, ValueError) as exc:
        log.info("direct SR solve failed (%s); using eigendecomposition", exc)
        return _fallback(lambda: _psd_solve(s_mat, grad, shift), grad, shift)
    return delta


def sr_direction(batch: SampleBatch, grad: np.ndarray, shift: float) -> np.ndarray:
    """(S + shift I)^-1 grad without forming S when the batch has few rows.

    With S = X^T X and fewer rows than parameters the push-through identity
    (X^T X + l I)^-1 g = (g - X^T (X X^T + l I)^-1 X g) / l is cheaper.
    """
    x = _centered_rows(batch)
    if len(x) >= x.shape[1]:
        return sr_precondition(x.T @ x, grad, shift)
    if shift <= 0:
        raise ValueError("diagonal shift must be positive")
    gram = x @ x.T
    try:
        y = sla.cho_solve(sla.cho_factor(gram + shift * np.eye(len(x))), x @ grad)
    except np.linalg.LinAlgError as exc:
        log.info("direct SR solve failed (%s); using eigendecomposition", exc)
        return _fallback(lambda: (grad - x.T @ _psd_solve(gram, x @ grad, shift)) / shift,
                         grad, shift)
    return (grad - x.T @ y) / shift


# --------------------------------------------------------------------------
# schedules and optimizer state
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ScheduleSpec:
    """Constant until ``switch_step``, then cosine decay plus a floor."""

    base: float
    switch_step: int = 0
    decay_steps: int = 1
    floor_fraction: float = 0.0

    def __post_init__(self):
        if min(self.base, self.switch_step, self.floor_fraction) < 0:
            raise ValueError("schedule values must be non-negative")
        if self.decay_steps <= 0:
            raise ValueError("decay_steps must be positive")

    @classmethod
    def constant(cls, base: float) -> "ScheduleSpec":
        return cls(base, switch_step=2**62, decay_steps=1)


def schedule_value(spec: ScheduleSpec, step: int) -> float:
    if step < spec.switch_step:
        return spec.base
    frac = min((step - spec.switch_step) / spec.decay_steps, 1.0)
    return spec.base * (1 + math.cos(math.pi * frac)) / 2 + spec.floor_fraction * spec.base


# the published settings
PAPER_LR = ScheduleSpec(0.0061, 30000, 40000, 0.001)
PAPER_SHIFT = ScheduleSpec(0.004, 30000, 40000, 0.01)


def rescaled(spec: ScheduleSpec, iterations: int) -> ScheduleSpec:
    """Fit the switch/decay steps to a run length, keeping their 3:4 ratio."""
    total = spec.switch_step + spec.decay_steps
    return replace(
        spec,
        switch_step=round(iterations * spec.switch_step / total),
        decay_steps=max(1, round(iterations * spec.decay_steps / total)),
    )


@dataclass
class OptimizerConfig:
    kind: str = "sgd"
    iterations: int = 1000
    lr: ScheduleSpec = field(default_factory=lambda: ScheduleSpec.constant(0.0061))
    shift: ScheduleSpec = field(default_factory=lambda: ScheduleSpec.constant(0.004))
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    checkpoint_every: int = 100
    max_step: float = 0.0  # cap on ||lr * update||; 0 disables

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")


@dataclass
class TrainState:
    params: ParameterSet
    step: int = 0
    seed: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    chains: np.ndarray | None = None

    def __post_init__(self):
        n = self.params.config.n_params
        if self.m is None:
            self.m = np.zeros(n)
        if self.v is None:
            self.v = np.zeros(n)
        if self.step < 0:
            raise ValueError("step must be non-negative")


def optimizer_step(state: TrainState, delta: np.ndarray, lr: float, opt: OptimizerConfig):
    if opt.kind == "sgd":
        update = delta
    else:
        t = state.step + 1
        state.m = opt.beta1 * state.m + (1 - opt.beta1) * delta
        state.v = opt.beta2 * state.v + (1 - opt.beta2) * delta**2
        m_hat = state.m / (1 - opt.beta1**t)
        v_hat = state.v / (1 - opt.beta2**t)
        update = m_hat / (np.sqrt(v_hat) + opt.eps)
    step = lr * update
    if opt.max_step > 0:
        norm = float(np.linalg.norm(step))
        if norm > opt.max_step:
            step *= opt.max_step / norm
    state.params = state.params.replace(state.params.theta - step)


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------


def sgd_iteration(state: TrainState, s: SuperOperator, sampler: SamplerConfig,
                  opt: OptimizerConfig) -> dict:
    """One sample/estimate/precondition/update cycle; returns the log record."""
    p = state.params
    memo = LogDensityMemo(p)
    batch = sample_joint(p, sampler, seed=(state.seed, state.step), init=state.chains, memo=memo)
    fill_batch(batch, s, memo)
    est = estimate_cost_and_grad(batch, s, memo)
    n = len(batch)
    if est.n_dropped > MAX_DROPPED_FRACTION * n:
        raise TrainingHalted(f"{est.n_dropped} of {n} samples had non-finite local cost")
    if not (np.isfinite(est.cost) and np.all(np.isfinite(est.grad))):
        raise TrainingHalted(f"non-finite cost at step {state.step}")
    lr = schedule_value(opt.lr, state.step)
    shift = schedule_value(opt.shift, state.step)
    delta = sr_direction(batch, est.grad, shift)
    optimizer_step(state, delta, lr, opt)
    state.chains = batch.final_states
    record = {
        "step": state.step,
        "cost": est.cost,
        "cost_err": est.cost_err,
        "accept": batch.acceptance,
        "lr": lr,
        "shift": shift,
    }
    state.step += 1
    return record


def train(state: TrainState, s: SuperOperator, sampler: SamplerConfig, opt: OptimizerConfig,
          log_path: str | Path | None = None, checkpoint_path: str | Path | None = None,
          callback=None) -> tuple[TrainState, list[dict]]:
    """Run until ``opt.iterations`` total steps; appends JSON lines to ``log_path``."""
    from .checkpoint import save_checkpoint

    records = []
    fh = open(log_path, "a") if log_path else None
    last_good = None
    try:
        while state.step < opt.iterations:
            try:
                rec = sgd_iteration(state, s, sampler, opt)
            except (TrainingHalted, NonFiniteError) as exc:
                if checkpoint_path and last_good is not None:
                    save_checkpoint(checkpoint_path, last_good)
                if isinstance(exc, TrainingHalted):
                    raise
                raise TrainingHalted(f"step {state.step}: {exc}") from exc
            if not np.all(np.isfinite(state.params.theta)):
                if checkpoint_path and last_good is not None:
                    save_checkpoint(checkpoint_path, last_good)
                raise TrainingHalted(f"non-finite parameters after step {rec['step']}")
            last_good = _snapshot(state)
            records.append(rec)
            if fh:
                fh.write(json.dumps(rec) + "\n")
                fh.flush()
            if callback:
                callback(rec, state)
            if checkpoint_path and state.step % opt.checkpoint_every == 0:
                save_checkpoint(checkpoint_path, state)
    finally:
        if fh:
            fh.close()
    if checkpoint_path:
        save_checkpoint(checkpoint_path, state)
    return state, records


def _snapshot(state: TrainState) -> TrainState:
    return TrainState(
        state.params.copy(), state.step, state.seed, state.m.copy(), state.v.copy(),
        None if state.chains is None else state.chains.copy(),
    )


# --------------------------------------------------------------------------
# enumeration oracles (tests and diagnostics)
# --------------------------------------------------------------------------


def enumerated_batch(params: ParameterSet) -> SampleBatch:
    """Every joint config, weighted by the exact |rho|^2 / sum |rho|^2."""
    n2 = 2 * params.config.sites
    x = all_configs(n2)
    logs = log_density(params, x)
    w = np.exp(2 * (logs.real - logs.real.max()))
    return SampleBatch(x, logs, params, weights=w / w.sum())


def dense_cost(params: ParameterSet, s: SuperOperator) -> float:
    """||L rho||^2 / ||rho||^2 on the enumerated vector."""
    logs = log_density(params, all_configs(2 * params.config.sites))
    v = np.exp(logs - logs.real.max())
    return float(np.linalg.norm(s.apply_dense(v)) ** 2 / np.linalg.norm(v) ** 2)


def exact_cost_and_grad(params: ParameterSet, s: SuperOperator) -> Estimate:
    batch = enumerated_batch(params)
    fill_batch(batch, s)
    est = estimate_cost_and_grad(batch, s)
    est.metric = metric_tensor(batch)
    return est


