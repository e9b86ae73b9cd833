import numpy as np
import pytest

from branchlab import harness as h
from branchlab.model import OffspringLaw, build_model
from branchlab.suite import get_model


def test_spearman_trend_rules():
    assert h.spearman_trend([50, 100, 200], [3.0, 2.0, 1.0])["pass"]
    assert not h.spearman_trend([50, 100, 200], [1.0, 2.0, 3.0])["pass"]
    tie = h.spearman_trend([50, 100, 200], [0.0, 0.0, 0.0])
    assert np.isnan(tie["spearman"]) and tie["pass"]
    assert h.spearman_trend([50, 100, 200], [0.2, 0.0, 0.0])["pass"]
    assert not h.spearman_trend([50, 100, 200], [0.3, 0.3, 0.3])["pass"]


def test_correlation_self_test():
    z = np.random.default_rng(0).gamma(2.0, size=1000)
    C = h.correlation_matrix(np.column_stack([z, z]))
    assert C[0, 1] == pytest.approx(1.0)


def test_ray_angles():
    u = np.array([0.25, 0.75])
    ang = h.ray_angles(np.array([[1.0, 3.0], [0.0, 0.0], [1.0, 0.0]]), u)
    assert ang[0] == pytest.approx(0.0, abs=1e-7) and np.isnan(ang[1]) and ang[2] > 1


def test_bonferroni_family():
    fam = h.bonferroni_family([0.5, 0.004], alpha=0.01)
    assert fam["threshold"] == 0.005 and not fam["pass"]
    assert h.bonferroni_family([0.5, 0.006], alpha=0.01)["pass"]


def test_subcritical_skipped():
    m = build_model([OffspringLaw.poisson([0.5])], OffspringLaw.poisson([1.0]))
    assert h.marginal_convergence_test(m, 10, reps=10) == {"skipped": "not critical"}
    rep = h.run_convergence(m, reps=10)
    assert not rep.passed and "not critical" in rep.notes[-1]


def test_skips_for_r1_and_small_classes(single_poisson):
    assert h.class_independence_test(single_poisson, 10, reps=100)["skipped"] == "r = 1"
    ray = h.ray_concentration_test(single_poisson, 10, reps=100)
    assert ray["classes"][0]["skipped"] == "class of size 1"


def test_deterministic_model_point_mass(deterministic):
    out = h.marginal_convergence_test(deterministic, 50, reps=300)
    entry = out["classes"][0]
    assert entry["law"] == {"point_mass": 1.0} and entry["max_deviation"] == 0.0 and entry["pass"]
    lc = h.lindeberg_and_covariance_check(deterministic, 50, reps=10)
    assert lc["cov_gap_mean"] == 0.0
    assert all(v["mean"] == 0.0 for v in lc["lindeberg"].values())


def test_lindeberg_trend_single_poisson(single_poisson):
    vals = [np.median([h.lindeberg_and_covariance_check(single_poisson, n, reps=256, seed=s)
                       ["lindeberg"]["0.1"]["median"] for s in range(3)]) for n in (25, 100)]
    assert vals[1] < vals[0]


def test_covariance_gap_trend(two_cycle):
    g = [h.lindeberg_and_covariance_check(two_cycle, n, reps=200, seed=1)["cov_gap_mean"]
         for n in (50, 200)]
    assert g[1] < g[0]


def test_closed_form_integral_matches_riemann_sum(two_cycle):
    # the density is linear on each sub-interval aligned with the jumps, so the
    # midpoint rule on such a grid is exact
    from branchlab import matrix_analysis as ma
    rng = np.random.default_rng(0)
    n, K = 4, 6
    Xr = rng.integers(0, 30, size=(1, K + 1, 2)).astype(float)
    Pi = ma.limit_projector(two_cycle.structure)
    t = (K - 1 + 0.3) / n
    closed = h._closed_form_integral(two_cycle, Xr, n, K - 1, Pi, frac=0.3)
    h_ = 1.0 / (10 * n)
    pieces = int(round(t / h_))
    s = (np.arange(pieces) + 0.5) * h_
    r = 2
    c = sum(np.linalg.matrix_power(two_cycle.m_xi, l - 1) @ two_cycle.m_eps for l in range(1, r + 1))
    ks = np.floor(n * s).astype(int)
    dens = (Xr[0, ks] @ Pi.T) / (n * r) + ((n * s - ks) / (n * r))[:, None] * (Pi @ c)
    integral = dens.sum(axis=0) * h_ / r
    for i in (1, 2):
        L = np.linalg.matrix_power(two_cycle.m_xi, r - i)
        w = integral @ L.T
        blk = np.einsum("j,jab->ab", w, two_cycle.V_xi)
        sl = slice((i - 1) * 2, i * 2)
        np.testing.assert_allclose(closed[0, sl, sl], blk, rtol=1e-10)


def test_run_convergence_two_cycle():
    rep = h.run_convergence(get_model("two_cycle_poisson"), n_list=(20, 40, 80), reps=2000, seed=3,
                            lindeberg_reps=300)
    d = rep.to_dict()
    assert set(d["families"]) >= {"marginal", "block_equality", "independence", "exact",
                                  "cov_gap_trend", "lindeberg_trend_0.1"}
    assert rep.families["exact"]["pass"]
    for fam in d["families"].values():
        assert "threshold" in fam or "psi_threshold" in fam or "rule" in fam
