import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import (
    PAULIS,
    SX,
    SY,
    SZ,
    kron_lindbladian,
    lowering_dense,
    one_site,
    single_qubit_rho,
    site_op,
    tfi_dense,
)
from lindblad_vmc.operators import (
    LocalTerm,
    SuperOperator,
    build_heisenberg_chain,
    build_lowering_jumps,
    build_tfi_chain,
    build_tfi_grid,
    dense_operator,
    magnetization_terms,
    pauli_string,
    vectorized_lindbladian,
)
from lindblad_vmc.spinspace import all_configs, config_to_index


def random_hermitian(rng, d):
    a = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
    return a + a.conj().T


def heisenberg_dense(n, j, b):
    h = np.zeros((2**n, 2**n), dtype=complex)
    for i in range(n):
        k = (i + 1) % n
        for jj, bb, p in zip(j, b, (SX, SY, SZ)):
            h += jj * site_op(p, i, n) @ site_op(p, k, n) + bb * site_op(p, i, n)
    return h


def grid_dense(m, n, v, g):
    sites = m * n
    pairs = set()
    for r in range(m):
        for c in range(n):
            a = r * n + c
            for b in (((r + 1) % m) * n + c, r * n + (c + 1) % n):
                pairs.add(frozenset((a, b)))
    h = sum(v / 4 * site_op(SZ, min(p), sites) @ site_op(SZ, max(p), sites) for p in pairs)
    return h + sum(g / 2 * site_op(SX, i, sites) for i in range(sites))


# --- Hamiltonians -----------------------------------------------------------


def test_tfi_two_sites_doubles_bond():
    h = build_tfi_chain(2, 2.0, 0.0).dense()
    np.testing.assert_allclose(h, np.diag([1, -1, -1, 1]), atol=1e-14)


def test_tfi_field_only():
    h = build_tfi_chain(3, 0.0, 2.0).dense()
    np.testing.assert_allclose(h, sum(site_op(SX, i, 3) for i in range(3)), atol=1e-14)


def test_tfi_term_count():
    assert len(build_tfi_chain(16, 2.0, 1.3).terms) == 32


@pytest.mark.parametrize("n", [2, 3, 4, 5])
def test_tfi_matches_kron(n):
    np.testing.assert_allclose(build_tfi_chain(n, 2.0, 0.7).dense(), tfi_dense(n, 2.0, 0.7), atol=1e-13)


def test_grid_term_counts():
    h = build_tfi_grid(2, 2, 2.0, 0.0)
    zz = [t for t in h.terms if len(t.sites) == 2]
    x = [t for t in h.terms if len(t.sites) == 1]
    assert len(zz) == 4 and len(x) == 4
    h = build_tfi_grid(2, 3, 2.0, 1.0)
    assert sum(len(t.sites) == 2 for t in h.terms) == 9
    assert sum(len(t.sites) == 1 for t in h.terms) == 6


@pytest.mark.parametrize("m,n", [(2, 2), (2, 3)])
def test_grid_matches_kron(m, n):
    np.testing.assert_allclose(build_tfi_grid(m, n, 2.0, 1.1).dense(), grid_dense(m, n, 2.0, 1.1), atol=1e-13)


def test_grid_zero_coupling_commutes():
    h = build_tfi_grid(2, 2, 0.0, 1.5)
    mats = [dense_operator([t], 4) for t in h.terms if np.any(t.full_matrix)]
    for a in mats:
        for b in mats:
            np.testing.assert_allclose(a @ b, b @ a, atol=1e-13)


def test_heisenberg_examples():
    h = build_heisenberg_chain(5, (1.4, 2.0, 1.0), (-1.0, 0.5, 0.1))
    np.testing.assert_allclose(h.dense(), heisenberg_dense(5, (1.4, 2.0, 1.0), (-1.0, 0.5, 0.1)), atol=1e-12)
    h = build_heisenberg_chain(3, (0, 0, 0), (0, 0, 0.7))
    d = h.dense()
    np.testing.assert_allclose(d, np.diag(np.diag(d)), atol=1e-14)
    np.testing.assert_allclose(d, 0.7 * sum(site_op(SZ, i, 3) for i in range(3)), atol=1e-14)


def test_heisenberg_two_site_spectrum():
    e = np.linalg.eigvalsh(build_heisenberg_chain(2, (1, 1, 1), (0, 0, 0)).dense())
    np.testing.assert_allclose(e, [-6, 2, 2, 2], atol=1e-12)


def test_non_finite_couplings_rejected():
    with pytest.raises(ValueError):
        build_tfi_chain(3, np.nan, 1.0)
    with pytest.raises(ValueError):
        build_tfi_chain(1, 1.0, 1.0)


# --- jumps ------------------------------------------------------------------


def test_lowering_action():
    jumps = build_lowering_jumps(16, 1.0)
    assert len(jumps) == 16 and all(r == 1.0 for _, r in jumps)
    sm = jumps[0][0].full_matrix
    np.testing.assert_array_equal(sm @ np.array([0, 1]), [0, 0])
    np.testing.assert_array_equal(sm @ np.array([1, 0]), [0, 1])
    np.testing.assert_allclose(sm, (SX - 1j * SY) / 2)
    with pytest.raises(ValueError):
        build_lowering_jumps(3, -1.0)


# --- local terms --------------------------------------------------------------


def test_local_term_validation():
    with pytest.raises(ValueError):
        LocalTerm((0, 1, 2, 3, 4), np.eye(32))
    with pytest.raises(ValueError):
        LocalTerm((0,), np.eye(4))
    with pytest.raises(ValueError):
        LocalTerm((0,), np.array([[np.inf, 0], [0, 1]]))


def test_canonical_preserves_operator(rng):
    m = rng.normal(size=(8, 8)) + 1j * rng.normal(size=(8, 8))
    t = LocalTerm((3, 0, 2), m, 0.5)
    np.testing.assert_allclose(dense_operator([t], 4), dense_operator([t.canonical()], 4), atol=1e-13)
    assert t.canonical().sites == (0, 2, 3)


def test_dense_operator_pauli_string():
    t = pauli_string({2: "x", 0: "y"}, 0.3)
    np.testing.assert_allclose(dense_operator([t], 3), 0.3 * site_op(SY, 0, 3) @ site_op(SX, 2, 3), atol=1e-14)


# --- Lindbladian --------------------------------------------------------------


@pytest.mark.parametrize("n,v,g", [(1, 0.0, 0.0), (1, 0.0, 1.3), (2, 2.0, 1.0), (3, 2.0, 0.6), (3, 0.0, 2.0)])
def test_lindbladian_matches_kron(n, v, g):
    s = one_site(g) if n == 1 else vectorized_lindbladian(build_tfi_chain(n, v, g), build_lowering_jumps(n, 1.0))
    hd = g / 2 * SX if n == 1 else tfi_dense(n, v, g)
    ref = kron_lindbladian(hd, lowering_dense(n))
    np.testing.assert_allclose(s.dense(), ref, atol=1e-12)


def test_heisenberg_lindbladian_matches_kron():
    j, b = (1.4, 2.0, 1.0), (-1.0, 0.3, 0.1)
    s = vectorized_lindbladian(build_heisenberg_chain(3, j, b), build_lowering_jumps(3, 0.7))
    ref = kron_lindbladian(heisenberg_dense(3, j, b), lowering_dense(3, 0.7))
    np.testing.assert_allclose(s.dense(), ref, atol=1e-12)


def test_single_site_null_vectors():
    s = one_site(0.0)
    np.testing.assert_allclose(s.dense() @ np.array([0, 0, 0, 1]), 0, atol=1e-14)
    for g in [0.5, 1.0, 2.0]:
        v = single_qubit_rho(g).reshape(-1)
        np.testing.assert_allclose(one_site(g).dense() @ v, 0, atol=1e-14)


def test_connected_elements_one_site_row():
    s = one_site(0.0)
    x = np.array([[-1, -1]], dtype=np.int8)
    ce = s.connected_elements(x)
    row = s.dense()[config_to_index(x[0])]
    got = np.zeros(4, dtype=complex)
    got[config_to_index(ce.configs)] = ce.amplitudes
    np.testing.assert_allclose(got, row, atol=1e-14)
    # label-1 row: recycling from (0, 0), nothing diagonal
    assert set(config_to_index(ce.configs).tolist()) == {0}


def test_connected_elements_random_rows(rng):
    n = 3
    s = vectorized_lindbladian(build_tfi_chain(n, 2.0, 0.8), build_lowering_jumps(n, 1.0))
    ref = kron_lindbladian(tfi_dense(n, 2.0, 0.8), lowering_dense(n))
    x = all_configs(2 * n)[rng.choice(4**n, size=10, replace=False)]
    ce = s.connected_elements(x)
    bound = sum(2 ** len(t.sites) for t in s.terms)
    for r in range(len(x)):
        sel = ce.rows == r
        assert sel.sum() <= bound
        cols = config_to_index(ce.configs[sel])
        assert len(set(cols.tolist())) == len(cols)  # merged
        got = np.zeros(4**n, dtype=complex)
        got[cols] = ce.amplitudes[sel]
        np.testing.assert_allclose(got, ref[config_to_index(x[r])], atol=1e-12)


def test_diagonal_hamiltonian_locality():
    n = 3
    s = vectorized_lindbladian(build_tfi_chain(n, 2.0, 0.0), build_lowering_jumps(n, 1.0))
    x = all_configs(2 * n)
    ce = s.connected_elements(x)
    diff = ce.configs != x[ce.rows]
    # only jump pairs (i, i + n) may change, and always together
    assert np.all(diff[:, :n] == diff[:, n:])


def test_cross_term_validation():
    with pytest.raises(ValueError):
        SuperOperator([LocalTerm((0, 3), np.eye(4))], 2)
    with pytest.raises(ValueError):
        SuperOperator([LocalTerm((0, 4), np.eye(4))], 2)


def test_apply_dense_checks_length():
    s = vectorized_lindbladian(build_tfi_chain(2, 2.0, 1.0), build_lowering_jumps(2, 1.0))
    with pytest.raises(ValueError):
        s.apply_dense(np.ones(8))


@pytest.mark.parametrize("n", [1, 2, 3])
def test_trace_preservation(n, rng):
    s = one_site(0.9) if n == 1 else vectorized_lindbladian(build_tfi_chain(n, 2.0, 0.9), build_lowering_jumps(n, 1.0))
    d = 2**n
    diag = np.arange(d) * d + np.arange(d)
    np.testing.assert_allclose(s.dense()[diag].sum(axis=0), 0, atol=1e-12)
    for _ in range(5):
        v = rng.normal(size=d * d) + 1j * rng.normal(size=d * d)
        assert abs(s.apply_dense(v)[diag].sum()) < 1e-10
    ident = np.eye(d).reshape(-1) / d
    assert abs(s.apply_dense(ident)[diag].sum()) < 1e-12


@pytest.mark.parametrize("n", [1, 2])
def test_hermiticity_inheritance(n, rng):
    s = one_site(1.1) if n == 1 else vectorized_lindbladian(
        build_heisenberg_chain(2, (1.4, 2.0, 1.0), (-1.0, 0.4, 0.1)), build_lowering_jumps(2, 1.0))
    d = 2**n
    for _ in range(5):
        out = s.apply_dense(random_hermitian(rng, d).reshape(-1)).reshape(d, d)
        np.testing.assert_allclose(out, out.conj().T, atol=1e-12)


def test_apply_dense_linear(rng):
    s = vectorized_lindbladian(build_tfi_chain(3, 2.0, 1.0), build_lowering_jumps(3, 1.0))
    u, v = (rng.normal(size=64) + 1j * rng.normal(size=64) for _ in range(2))
    a, b = 0.3 - 1j, 2.0 + 0.5j
    np.testing.assert_allclose(s.apply_dense(a * u + b * v), a * s.apply_dense(u) + b * s.apply_dense(v), atol=1e-12)


def test_apply_dense_pure_state():
    s = one_site(0.8)
    psi = np.array([0.6, 0.8j])
    v = np.outer(psi, psi.conj()).reshape(-1)
    np.testing.assert_allclose(s.apply_dense(v), s.dense() @ v, atol=1e-14)


def test_vectorization_identities(rng):
    d = 4
    a, b, rho = (rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d)) for _ in range(3))
    np.testing.assert_allclose((a @ rho @ b).reshape(-1), np.kron(a, b.T) @ rho.reshape(-1), atol=1e-12)
    psi, phi = (rng.normal(size=d) + 1j * rng.normal(size=d) for _ in range(2))
    np.testing.assert_allclose(np.outer(psi, phi.conj()).reshape(-1), np.kron(psi, phi.conj()), atol=1e-12)


def test_magnetization_terms():
    for axis, p in PAULIS.items():
        m = dense_operator(magnetization_terms(3, axis), 3)
        np.testing.assert_allclose(m, sum(site_op(p, i, 3) for i in range(3)) / 3, atol=1e-14)


@settings(max_examples=20, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(0.1, 2))
def test_lindbladian_two_site_property(v, g, gamma):
    s = vectorized_lindbladian(build_tfi_chain(2, v, g), build_lowering_jumps(2, gamma))
    ref = kron_lindbladian(tfi_dense(2, v, g), lowering_dense(2, gamma))
    np.testing.assert_allclose(s.dense(), ref, atol=1e-12)


@pytest.mark.parametrize("g", [0.0, 0.5, 2.0])
def test_single_site_lindbladian(g):
    from conftest import one_site
    from lindblad_vmc.operators import single_site_lindbladian
    np.testing.assert_allclose(single_site_lindbladian(g).dense(), one_site(g).dense(), atol=1e-14)


def test_relabel_sites_is_a_permutation_similarity(rng):
    from lindblad_vmc.operators import relabel_sites
    from lindblad_vmc.spinspace import LatticeGeometry, snake_order
    h = build_tfi_grid(2, 3, 2.0, 0.7)
    order = snake_order(LatticeGeometry.grid(2, 3))
    assert order == [0, 1, 2, 5, 4, 3]
    r = relabel_sites(h, order)
    # permuting qubits: new qubit k is old qubit order[k]
    perm = np.array([sum(((i >> (5 - order[k])) & 1) << (5 - k) for k in range(6)) for i in range(64)])
    dense = h.dense()
    np.testing.assert_allclose(r.dense(), dense[np.ix_(np.argsort(perm), np.argsort(perm))], atol=1e-14)
    with pytest.raises(ValueError):
        relabel_sites(h, [0, 0, 1, 2, 3, 4])


def test_snake_two_by_two_is_the_ring():
    from lindblad_vmc.operators import relabel_sites
    from lindblad_vmc.spinspace import LatticeGeometry, snake_order
    g2 = LatticeGeometry.grid(2, 2)
    assert snake_order(g2) == [0, 1, 3, 2]
    assert snake_order(LatticeGeometry.chain(5)) == list(range(5))
    r = relabel_sites(build_tfi_grid(2, 2, 2.0, 1.1), snake_order(g2))
    np.testing.assert_allclose(r.dense(), build_tfi_chain(4, 2.0, 1.1).dense(), atol=1e-14)
    # the row-major grid is not invariant under the cyclic relabelling the ansatz imposes
    h = build_tfi_grid(2, 2, 2.0, 1.1)
    shifted = relabel_sites(h, [1, 2, 3, 0])
    assert not np.allclose(shifted.dense(), h.dense())
