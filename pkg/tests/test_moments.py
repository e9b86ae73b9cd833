import numpy as np
import pytest

from branchlab import moments as mo
from branchlab.errors import NotCriticalError
from branchlab.model import OffspringLaw, build_model
from branchlab.suite import suite_models


def test_mean_vector_examples(single_poisson, two_cycle):
    assert mo.mean_vector(single_poisson, 0).tolist() == [0.0]
    assert mo.mean_vector(single_poisson, 5).tolist() == [5.0]
    assert mo.mean_vector(two_cycle, 4).tolist() == [4.0, 4.0]


def test_mean_recursion_holds_exactly():
    for m in suite_models().values():
        seq = mo.mean_sequence(m, 30)
        for k in range(1, 31):
            assert np.array_equal(seq[k], m.m_xi @ seq[k - 1] + m.m_eps)


def test_single_type_variance_closed_form(single_poisson):
    assert mo.variance_matrix(single_poisson, 0).tolist() == [[0.0]]
    assert mo.variance_matrix(single_poisson, 3)[0, 0] == 6.0
    for k in range(0, 60):
        assert abs(mo.variance_matrix(single_poisson, k)[0, 0] - (k + k * (k - 1) / 2)) <= 1e-12


def test_variance_recursion_matches_double_sum():
    for m in suite_models().values():
        for k in (0, 1, 2, 7, 15):
            np.testing.assert_allclose(mo.variance_matrix(m, k), mo.variance_matrix_direct(m, k),
                                       rtol=1e-12, atol=1e-12)


def test_variance_symmetric_psd():
    for m in suite_models().values():
        for k in (1, 10, 100):
            V = mo.variance_matrix(m, k)
            assert np.abs(V - V.T).max() <= 1e-12
            assert np.linalg.eigvalsh(V).min() >= -1e-9 * np.trace(V)


def test_martingale_cov_conditional_examples(single_poisson, two_cycle):
    m1 = build_model([OffspringLaw.poisson([1.0])], OffspringLaw.poisson([1.0]))
    assert mo.martingale_cov_conditional(m1, [0]).tolist() == [[1.0]]
    assert mo.martingale_cov_conditional(single_poisson, [5]).tolist() == [[6.0]]
    C = mo.martingale_cov_conditional(two_cycle, [2, 3])
    # block l=1 weights m x + m_eps = (4, 3); block l=2 weights x = (2, 3)
    np.testing.assert_allclose(C[:2, :2], 4 * two_cycle.V_xi[0] + 3 * two_cycle.V_xi[1] + np.eye(2))
    np.testing.assert_allclose(C[2:, 2:], 2 * two_cycle.V_xi[0] + 3 * two_cycle.V_xi[1] + np.eye(2))
    assert np.all(C[:2, 2:] == 0)


def _restarted_blocks(m, x, reps, rng):
    """Stacked (M_{k,1}, ..., M_{k,r}) for ``reps`` chains restarted from X_{rk-r} = x."""
    X = [np.tile(np.asarray(x, dtype=np.int64), (reps, 1))]
    for _ in range(m.r):
        prev = X[-1]
        new = m.immigration.sample(reps, rng).astype(np.int64)
        for i, law in enumerate(m.offspring):
            new += law.sample_sum(prev[:, i], rng)
        X.append(new)
    diffs = [X[j] - X[j - 1] @ m.m_xi.T - m.m_eps for j in range(m.r, 0, -1)]
    return np.concatenate(diffs, axis=1)


@pytest.mark.parametrize("name,x", [("two_cycle_skewed", [2, 3]),
                                    ("three_cycle", [1, 4, 2]),
                                    ("four_type_two_cycle", [3, 0, 2, 5])])
def test_martingale_cov_conditional_restarted_chains(name, x):
    m = suite_models([name])[name]
    M = _restarted_blocks(m, x, 100_000, np.random.default_rng(11))
    C = mo.martingale_cov_conditional(m, x)
    np.testing.assert_array_less(np.abs(M.mean(axis=0)), 5 * M.std(axis=0) / np.sqrt(len(M)) + 1e-12)
    prod = M[:, :, None] * M[:, None, :]
    se = prod.std(axis=0) / np.sqrt(len(M))
    assert np.all(np.abs(prod.mean(axis=0) - C) <= 5 * se + 1e-12)


def test_martingale_cov_affine_in_x():
    rng = np.random.default_rng(0)
    for m in suite_models().values():
        x, y = rng.integers(0, 20, m.p), rng.integers(0, 20, m.p)
        f = lambda z: mo.martingale_cov_conditional(m, z)
        np.testing.assert_allclose(f(x + y) - f(x) - f(y) + f(np.zeros(m.p)), 0, atol=1e-10)
        np.testing.assert_allclose(mo.martingale_cov_conditional_batch(m, np.stack([x, y]))[1], f(y))


def test_martingale_cov_uses_mean(two_cycle):
    for k in (1, 2, 5):
        np.testing.assert_array_equal(
            mo.martingale_cov(two_cycle, k),
            mo.martingale_cov_conditional(two_cycle, mo.mean_vector(two_cycle, 2 * k - 2)))


def test_moment_table_column_major(two_cycle):
    rows = mo.moment_table(two_cycle, [0, 3])
    V = mo.variance_matrix(two_cycle, 3)
    assert rows[1]["var1"] == V[1, 0] and rows[1]["var2"] == V[0, 1]


def test_growth_diagnostics(single_poisson, deterministic):
    rep = mo.growth_diagnostics(single_poisson, k_max=200, replications=4000, seed=1)
    assert rep.fits["E|X|"].slope == pytest.approx(1.0, abs=1e-12)
    assert rep.fits["E|X|^2"].slope == pytest.approx(2.0, abs=0.1)
    assert rep.fits["E|M|"].slope <= 0.6
    assert rep.fits["E|M|^4"].slope <= 2.2
    det = mo.growth_diagnostics(deterministic, k_max=50, replications=10, seed=1)
    assert np.all(det.fits["E|M|^4"].values == 0)


def test_growth_requires_critical():
    m = build_model([OffspringLaw.poisson([0.5])], OffspringLaw.poisson([1.0]))
    with pytest.raises(NotCriticalError):
        mo.growth_diagnostics(m, 20, 10)
