import warnings

import numpy as np
import pytest

from lindblad_vmc.operators import (
    SIGMA_MINUS,
    SX,
    SY,
    SZ,
    LocalTerm,
    SuperOperator,
    build_lowering_jumps,
    build_tfi_chain,
    vectorized_lindbladian,
)

I2 = np.eye(2, dtype=complex)


def kron_all(mats):
    out = np.array([[1.0 + 0j]])
    for m in mats:
        out = np.kron(out, m)
    return out


def site_op(op, i, n):
    """Independent oracle: op acting on site i of n (big-endian Kronecker order)."""
    return kron_all([op if k == i else I2 for k in range(n)])


def kron_lindbladian(h, jumps):
    """Explicit Kronecker build of the row-major vectorized generator."""
    d = h.shape[0]
    eye = np.eye(d)
    out = -1j * (np.kron(h, eye) - np.kron(eye, h.T))
    for l, rate in jumps:
        ldl = l.conj().T @ l
        out += rate * (np.kron(l, l.conj()) - 0.5 * (np.kron(ldl, eye) + np.kron(eye, ldl.T)))
    return out


def tfi_dense(n, v, g):
    h = np.zeros((2**n, 2**n), dtype=complex)
    for i in range(n):
        j = (i + 1) % n
        h += v / 4 * site_op(SZ, i, n) @ site_op(SZ, j, n)
        h += g / 2 * site_op(SX, i, n)
    return h


def lowering_dense(n, gamma=1.0):
    return [(site_op(SIGMA_MINUS, i, n), gamma) for i in range(n)]


def single_qubit_rho(g):
    """Closed-form single-qubit steady state, written out independently."""
    den = 1 + 2 * g**2
    return np.array([[g**2 / den, -1j * g / den], [1j * g / den, (1 + g**2) / den]])


def one_site(g, gamma=1.0):
    """Single-site generator with H = (g/2) sigma^x and one lowering jump."""
    terms = []
    if g:
        hx = g / 2 * SX
        terms += [LocalTerm((0,), -1j * hx), LocalTerm((1,), 1j * hx.T)]
    sm = SIGMA_MINUS
    terms += [
        LocalTerm((0, 1), gamma * np.kron(sm, sm.conj())),
        LocalTerm((0,), -0.5 * gamma * sm.conj().T @ sm),
        LocalTerm((1,), -0.5 * gamma * sm.T @ sm.conj()),
    ]
    return SuperOperator(terms, 1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


PAULIS = {"x": SX, "y": SY, "z": SZ}


@pytest.fixture(scope="session")
def fitted_one_site():
    """N=1 ansatz fitted to the g=1 steady state by exact-gradient SR."""
    from lindblad_vmc.ansatz import ModelConfig, init_params
    from lindblad_vmc.vmc import enumerated_batch, estimate_cost_and_grad, fill_batch, sr_direction

    s = one_site(1.0)
    p = init_params(ModelConfig(1, (4, 4), heads=1), seed=0)
    for _ in range(400):
        b = enumerated_batch(p)
        fill_batch(b, s)
        est = estimate_cost_and_grad(b, s)
        p = p.replace(p.theta - 0.05 * sr_direction(b, est.grad, 1e-3))
    return p, s


def train_model(n, v, g, iterations, seed=0, **opt):
    """Short SR training run used by observable tests."""
    from lindblad_vmc.ansatz import ModelConfig, init_params
    from lindblad_vmc.sampler import SamplerConfig
    from lindblad_vmc.vmc import OptimizerConfig, ScheduleSpec, TrainState, train

    s = vectorized_lindbladian(build_tfi_chain(n, v, g), build_lowering_jumps(n, 1.0))
    kw = dict(iterations=iterations, lr=ScheduleSpec.constant(0.03),
              shift=ScheduleSpec.constant(0.05), max_step=1.0)
    kw.update(opt)
    state = TrainState(init_params(ModelConfig(n), seed=seed), seed=seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        state, _ = train(state, s, SamplerConfig(128, 8, burn_in=8), OptimizerConfig(**kw))
    return state.params, s
