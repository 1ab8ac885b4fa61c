import numpy as np
import pytest

from conftest import site_op, train_model
from lindblad_vmc import observables
from lindblad_vmc.ansatz import ModelConfig, enumerate_full_matrix, init_params
from lindblad_vmc.exact import expectation_exact, purity_exact
from lindblad_vmc.observables import (
    ObservableSpec,
    estimate_magnetization,
    estimate_observables,
    expectation_enumerated,
    local_observable_estimator,
    magnetization,
    purity_enumerated,
)
from lindblad_vmc.operators import SX, SZ, LocalTerm, pauli_string
from lindblad_vmc.sampler import SamplerConfig
from lindblad_vmc.spinspace import all_configs

EVAL = SamplerConfig(32, 1000, burn_in=1000)


@pytest.fixture(scope="module")
def dark_state_model():
    return train_model(3, 2.0, 0.0, 300)[0]


@pytest.fixture(scope="module")
def product_state_model():
    return train_model(3, 0.0, 1.0, 500)[0]


def test_observable_spec_hermiticity():
    with pytest.raises(ValueError):
        ObservableSpec("bad", [LocalTerm((0,), np.array([[0, 1], [0, 0]]))])
    assert magnetization(4, "y").name == "sigma_y"


def test_identity_local_estimator():
    p = init_params(ModelConfig(3), seed=1)
    ident = [LocalTerm((0,), np.eye(2))]
    loc = local_observable_estimator(p, all_configs(3), ident)
    np.testing.assert_allclose(loc, 1, atol=1e-14)
    est = estimate_observables(p, [ObservableSpec("one", ident)], SamplerConfig(4, 50))[0]
    assert est.mean == pytest.approx(1, abs=1e-14)
    assert est.error == pytest.approx(0, abs=1e-14)


def test_diagonal_local_estimator():
    p = init_params(ModelConfig(3), seed=2)
    alpha = all_configs(3)
    for i in range(3):
        loc = local_observable_estimator(p, alpha, [pauli_string({i: "z"})])
        np.testing.assert_allclose(loc, alpha[:, i], atol=1e-14)


@pytest.mark.parametrize("n", [2, 3, 4])
def test_enumerated_estimator_matches_matrix_trace(n):
    p = init_params(ModelConfig(n), seed=n)
    rho = enumerate_full_matrix(p)
    for axis in "xyz":
        obs = magnetization(n, axis)
        assert abs(expectation_enumerated(p, obs) - expectation_exact(obs.terms, rho)) < 1e-10
    two_site = [pauli_string({0: "x", 1: "y"}, 0.5), pauli_string({1: "y", 0: "x"}, 0.5)]
    assert abs(expectation_enumerated(p, two_site) - expectation_exact(two_site, rho)) < 1e-10


def test_sigma_x_on_fitted_one_site(fitted_one_site):
    p, _ = fitted_one_site
    est = estimate_observables(p, [magnetization(1, "x"), magnetization(1, "y")], SamplerConfig(16, 2000), seed=3)
    assert abs(est[0].mean) <= 3 * est[0].error + 1e-3
    assert est[1].mean == pytest.approx(2 / 3, abs=0.01)


def test_mc_estimate_matches_enumeration():
    p = init_params(ModelConfig(3), seed=4)
    for axis in "xz":
        mean, err = estimate_magnetization(p, axis, SamplerConfig(32, 2000), seed=1)
        exact = expectation_enumerated(p, magnetization(3, axis))
        assert abs(mean - exact) <= 4 * err + 1e-3


def test_estimates_deterministic():
    p = init_params(ModelConfig(3), seed=4)
    assert estimate_magnetization(p, "x", SamplerConfig(4, 50), seed=9) == \
        estimate_magnetization(p, "x", SamplerConfig(4, 50), seed=9)


def test_dark_state(dark_state_model):
    mean, err = estimate_magnetization(dark_state_model, "z", EVAL, seed=0)
    assert mean == pytest.approx(-1, abs=0.01)
    assert purity_enumerated(dark_state_model) >= 0.99


def test_product_state(product_state_model):
    p = product_state_model
    y, _ = estimate_magnetization(p, "y", EVAL, seed=0)
    z, _ = estimate_magnetization(p, "z", EVAL, seed=0)
    assert y == pytest.approx(2 / 3, abs=0.02)
    assert z == pytest.approx(-1 / 3, abs=0.02)


def test_site_resolved_translation_invariance(product_state_model):
    p = product_state_model
    specs = [ObservableSpec(f"z{i}", [pauli_string({i: "z"})]) for i in range(3)]
    est = estimate_observables(p, specs, EVAL, seed=1)
    vals = np.array([e.mean for e in est])
    errs = np.array([e.error for e in est])
    assert np.ptp(vals) <= 4 * errs.max() + 1e-3


def test_purity_matches_matrix_and_is_scale_free():
    p = init_params(ModelConfig(3), seed=7)
    rho = enumerate_full_matrix(p)
    assert purity_enumerated(p) == pytest.approx(purity_exact(rho), rel=1e-12)
    theta = p.theta.copy()
    theta[p.config.slices()["dense_b"]] += [2.5, 0.0]
    assert purity_enumerated(p.replace(theta)) == pytest.approx(purity_enumerated(p), rel=1e-12)


@pytest.mark.parametrize("n", [1, 3, 5])
def test_purity_maximally_mixed(monkeypatch, n):
    # synthetic matrix: uniform diagonal, zero coherences, arbitrary scale
    monkeypatch.setattr(observables, "enumerate_full_matrix", lambda p, normalize=True: 3.0 * np.eye(2**n))
    assert purity_enumerated(init_params(ModelConfig(n))) == pytest.approx(2.0**-n)


def test_purity_enumeration_limit():
    with pytest.raises(NotImplementedError):
        purity_enumerated(init_params(ModelConfig(8)))


def test_local_estimator_two_site_oracle(rng):
    p = init_params(ModelConfig(2), seed=3)
    rho = enumerate_full_matrix(p, normalize=False)
    a = site_op(SX, 0, 2) @ site_op(SZ, 1, 2)
    term = [LocalTerm((0, 1), np.kron(SX, SZ))]
    loc = local_observable_estimator(p, all_configs(2), term)
    # A~(alpha) = sum_b rho(a, b) A(b, a) / rho(a, a)
    np.testing.assert_allclose(loc, (rho * a.T).sum(axis=1) / np.diag(rho), atol=1e-12)
