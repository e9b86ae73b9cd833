"""Acceptance criteria 1-9, each reported as one PASS/FAIL line.

Run with ``pytest -v tests/test_acceptance.py``; the verdict lines appear in
the terminal output (also when captured by ``tee``).
"""
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from branchlab import harness as h
from branchlab import limit_sde as ls
from branchlab import matrix_analysis as ma
from branchlab import moments as mo
from branchlab import reporting
from branchlab import simulator as sim
from branchlab.cli import main as cli_main
from branchlab.suite import get_model, suite_models

MODELS = Path(__file__).resolve().parents[1] / "models"
ALPHA = 0.01


@pytest.fixture
def verdict(request):
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")

    def emit(criterion: str, passed: bool, detail: str):
        line = f"ACCEPTANCE {criterion}: {'PASS' if passed else 'FAIL'} -- {detail}"
        if reporter is not None:
            reporter.write_line("")
            reporter.write_line(line)
        else:
            print(line)
        assert passed, line

    return emit


@pytest.fixture(scope="module")
def suite():
    return suite_models()


# -- 1 -----------------------------------------------------------------------------------


def test_criterion_1_exact_structure(verdict, suite):
    t0 = time.perf_counter()
    worst = {"partition": 0.0, "pi_mr": 0.0, "commute": 0.0, "offblock": 0.0, "perron": 0.0}
    rs = set()
    for m in suite.values():
        s = ma.analyze(m.m_xi)
        res = ma.projector_identities(m.m_xi, s)
        rs.add(s.r)
        worst["partition"] = max(worst["partition"], res["partition_violation"])
        worst["pi_mr"] = max(worst["pi_mr"], res["pi_mr_minus_pi"])
        worst["commute"] = max(worst["commute"], res["pi_commutator"])
        worst["offblock"] = max(worst["offblock"], res["mr_offblock_max"])
        worst["perron"] = max(worst["perron"], res["perron_residual_u"] / s.rho,
                              res["perron_residual_v"] / s.rho)
    elapsed = time.perf_counter() - t0
    ok = (len(suite) >= 10 and rs == {1, 2, 3} and max(m.p for m in suite.values()) <= 4
          and worst["partition"] == 0.0 and worst["offblock"] == 0.0
          and worst["pi_mr"] <= 1e-9 and worst["commute"] <= 1e-9 and worst["perron"] <= 1e-10
          and elapsed < 1.0)
    verdict("1 exact-structure identities", ok,
            f"{len(suite)} models, r in {sorted(rs)}, worst {worst}, {elapsed:.3f}s (< 1s)")


# -- 2 -----------------------------------------------------------------------------------


def test_criterion_2_moments(verdict, suite):
    t0 = time.perf_counter()
    ks = [1, 5, 10, 30]
    R = 100_000
    worst_z = 0.0
    failures = []
    for name, m in suite.items():
        b = sim.simulate_batch(m, max(ks), R, seed=2024, record=[0] + ks)
        for k in ks:
            x = b.at([k])[:, 0].astype(float)
            mu = x.mean(axis=0)
            c = x - mu
            emp_cov = c.T @ c / (R - 1)
            se_mean = x.std(axis=0, ddof=1) / np.sqrt(R)
            prod = c[:, :, None] * c[:, None, :]
            se_cov = prod.std(axis=0, ddof=1) / np.sqrt(R)
            for emp, oracle, se in ((mu, mo.mean_vector(m, k), se_mean),
                                    (emp_cov, mo.variance_matrix(m, k), se_cov)):
                dev = np.abs(emp - oracle)
                bad = dev > 5 * se + 1e-9 * (1 + np.abs(oracle))
                if np.any(bad):
                    failures.append((name, k))
                z = np.where(se > 0, dev / np.where(se > 0, se, 1), 0.0)
                worst_z = max(worst_z, float(z.max()))
    closed = max(abs(mo.variance_matrix(get_model("single_poisson"), k)[0, 0] - (k + k * (k - 1) / 2))
                 for k in range(0, 201))
    elapsed = time.perf_counter() - t0
    ok = not failures and closed <= 1e-12 and elapsed < 120
    verdict("2 moment oracle vs Monte Carlo", ok,
            f"max |z| = {worst_z:.2f} (band 5), failures {failures}, single-type closed-form "
            f"error {closed:.1e}, {elapsed:.1f}s (< 120s)")


# -- 3 -----------------------------------------------------------------------------------


def test_criterion_3_psi_identity(verdict, suite):
    t0 = time.perf_counter()
    worst = 0.0
    for name, m in suite.items():
        for n in (10, 50):
            b = sim.simulate_batch(m, m.r * n, 100, seed=sim.derive_seed(3, n))
            M = sim.martingale_blocks(b)
            grid = sim.default_grid(1.0)
            err = sim.psi_relative_error(sim.reconstruct_via_psi(M, m, n, grid),
                                         sim.scaled_step_X(b, n, grid), n, m.r)
            worst = max(worst, err)
    elapsed = time.perf_counter() - t0
    verdict("3 Psi-reconstruction identity", worst <= 1e-8 and elapsed < 30,
            f"max relative error {worst:.2e} (<= 1e-8), {elapsed:.1f}s (< 30s)")


# -- 4 -----------------------------------------------------------------------------------


def test_criterion_4_squared_bessel(verdict):
    t0 = time.perf_counter()
    z = ls.simulate_Z(1.0, 2.0, 1.0, 1e-4, seed=4, reps=10_000)
    ks = stats.kstest(z.final, stats.expon.cdf)
    means = []
    for a, b, t in [(1.0, 2.0, 1.0), (3.0, 1.0, 2.0), (0.5, 1.5, 0.5)]:
        x = z.final if (a, b, t) == (1.0, 2.0, 1.0) else \
            ls.simulate_Z(a, b, t, 1e-3 * t, seed=40, reps=10_000).final
        se = x.std(ddof=1) / np.sqrt(x.size)
        means.append((a, b, t, float(x.mean()), float(abs(x.mean() - a * t) / se)))
    elapsed = time.perf_counter() - t0
    ok = ks.pvalue > ALPHA and all(q[-1] <= 4 for q in means) and elapsed < 60
    verdict("4 squared-Bessel marginal", ok,
            f"KS vs Exp(1) p = {ks.pvalue:.3f} (> 0.01); mean z-scores "
            f"{[round(q[-1], 2) for q in means]} (<= 4); {elapsed:.1f}s (< 60s)")


# -- 5 -----------------------------------------------------------------------------------


def test_criterion_5_single_type_functional_limit(verdict):
    t0 = time.perf_counter()
    m = get_model("single_poisson")
    law = stats.gamma(a=2.0, scale=0.5)
    res = {}
    for n in (50, 200):
        b = sim.simulate_batch(m, n, 10_000, seed=sim.derive_seed(5, n), record=[0, n])
        x = b.at([n])[:, 0, 0] / n
        res[n] = stats.kstest(x, law.cdf)
    elapsed = time.perf_counter() - t0
    ok = res[200].pvalue > ALPHA and res[200].statistic < res[50].statistic and elapsed < 180
    verdict("5 single-type functional limit", ok,
            f"n=200 KS p = {res[200].pvalue:.3f} (> 0.01), D200 = {res[200].statistic:.4f} < "
            f"D50 = {res[50].statistic:.4f}; {elapsed:.1f}s (< 180s)")


# -- 6 -----------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def two_cycle_sample():
    t0 = time.perf_counter()
    m = get_model("two_cycle_poisson")
    sample = h.scaled_sample(m, 200, 1.0, 10_000, seed=6)
    return m, sample, time.perf_counter() - t0


def test_criterion_6a_class_independence(verdict, two_cycle_sample):
    m, sample, elapsed = two_cycle_sample
    out = h.class_independence_test(m, 200, sample=sample)
    verdict("6a cross-class independence", out["pass"] and elapsed < 300,
            f"|corr| = {out['max_abs_offdiag']:.4f} (< {out['threshold']:.3f})")


def test_criterion_6b_periodic_blocks_same_law(verdict, two_cycle_sample):
    m, sample, _ = two_cycle_sample
    out = h.block_equality_test(m, 200, sample=sample)
    fam = h.bonferroni_family([t["p_value"] for t in out["tests"]], ALPHA)
    verdict("6b block-1 vs block-2 two-sample KS", fam["pass"],
            f"per-coordinate p = {[round(t['p_value'], 3) for t in out['tests']]} "
            f"(Bonferroni > {fam['threshold']:.4f})")


def test_criterion_6c_literal_gamma_law(verdict, two_cycle_sample):
    # As stated: v_i^T(block) ~ Gamma(4, 1/8) for a_i = 1, b_i = 1/2, T = 1.
    m, sample, _ = two_cycle_sample
    coef = ls.sde_coefficients(m)
    assert coef.a.tolist() == pytest.approx([1.0, 1.0]) and coef.b.tolist() == pytest.approx([0.5, 0.5])
    proj = sample.projections(coef)
    stated = stats.gamma(a=4.0, scale=0.125)
    pv = [stats.kstest(proj[:, c], stated.cdf).pvalue for c in range(2)]
    # Gamma(2a/b, bT/2) evaluated at the same a, b (= Gamma(4, 1/4)), for the record.
    formula = ls.exact_Z_marginal(coef.a[0], coef.b[0], 1.0)
    pv_formula = [stats.kstest(proj[:, c], formula.cdf).pvalue for c in range(2)]
    fam = h.bonferroni_family(pv, ALPHA)
    verdict("6c v_i^T(block) ~ Gamma(4, 1/8) as stated", fam["pass"],
            f"KS p = {[f'{q:.1e}' for q in pv]}; sample mean {proj.mean(axis=0).round(3).tolist()} "
            f"vs stated-law mean 0.5; Gamma(2a/b, bT/2) = Gamma({formula.shape:g}, {formula.scale:g}) "
            f"KS p = {[f'{q:.1e}' for q in pv_formula]}")


def test_criterion_6c_corrected_gamma_law(verdict, two_cycle_sample):
    # Companion check with the limit law Gamma(2 a_i/(r b_i), r b_i T/2) = Gamma(2, 1/2).
    m, sample, _ = two_cycle_sample
    coef = ls.sde_coefficients(m)
    proj = sample.projections(coef)
    pv = []
    for c in range(2):
        law = coef.projection_marginal(c, 1.0)
        assert (law.shape, law.scale) == pytest.approx((2.0, 0.5))
        pv.append(stats.kstest(proj[:, c], law.cdf).pvalue)
    fam = h.bonferroni_family(pv, ALPHA)
    verdict("6c' v_i^T(block) ~ Gamma(2, 1/2) (r-corrected)", fam["pass"],
            f"KS p = {[round(float(q), 3) for q in pv]}; sample mean {proj.mean(axis=0).round(3).tolist()}")


# -- 7 -----------------------------------------------------------------------------------


def test_criterion_7_growth(verdict, suite):
    t0 = time.perf_counter()
    rows, ok = [], True
    for name, m in suite.items():
        if name == "deterministic":
            continue  # M is identically 0, so its growth slope is undefined
        rep = mo.growth_diagnostics(m, k_max=200, replications=10_000, seed=7)
        f = rep.fits
        good = (abs(f["E|X|"].slope - 1.0) <= 0.02 and abs(f["E|X|^2"].slope - 2.0) <= 0.1
                and f["E|M|"].slope <= 0.6)
        ok &= good
        rows.append(f"{name}: {f['E|X|'].slope:.3f}/{f['E|X|^2'].slope:.3f}/{f['E|M|'].slope:.3f}")
    elapsed = time.perf_counter() - t0
    verdict("7 growth diagnostics", ok and elapsed < 120,
            f"slopes E|X|/E|X|^2/E|M| -> {'; '.join(rows)}; {elapsed:.1f}s (< 120s)")


# -- 8 -----------------------------------------------------------------------------------


def test_criterion_8_martingale_conditions(verdict, suite):
    t0 = time.perf_counter()
    ns = [50, 100, 200]
    bad, rows = [], []
    for name, m in suite.items():
        res = [h.lindeberg_and_covariance_check(m, n, 1.0, 1000, sim.derive_seed(8, n)) for n in ns]
        checks = {"gap": h.spearman_trend(ns, [r["cov_gap_mean"] for r in res])}
        for th in ("0.1", "1.0"):
            checks[f"L{th}"] = h.spearman_trend(ns, [r["lindeberg"][th]["mean"] for r in res])
        for key, c in checks.items():
            if not c["pass"]:
                bad.append((name, key, c["values"]))
        rows.append(f"{name}: " + ",".join(
            f"{k}={'-' if np.isnan(c['spearman']) else round(c['spearman'], 1)}" for k, c in checks.items()))
    elapsed = time.perf_counter() - t0
    verdict("8 Lindeberg / covariance-gap trends", not bad and elapsed < 300,
            f"Spearman per model: {'; '.join(rows)}; failures {bad}; {elapsed:.1f}s (< 300s)")


# -- 9 -----------------------------------------------------------------------------------


def _run_all(out: Path, threads: int):
    two = str(MODELS / "two_cycle_poisson.json")
    codes = [
        cli_main(["analyze", two, "--out", str(out / "analyze.json"), "--threads", str(threads)]),
        cli_main(["simulate", two, "--steps", "30", "--reps", "700", "--seed", "9",
                  "--out", str(out / "sim"), "--threads", str(threads)]),
        cli_main(["limit", two, "--reps", "600", "--dt", "0.01", "--seed", "9",
                  "--out", str(out / "lim"), "--threads", str(threads)]),
        cli_main(["converge", two, "--reps", "600", "--n-list", "10,20,40", "--lindeberg-reps", "300",
                  "--seed", "9", "--out", str(out / "conv"), "--threads", str(threads)]),
    ]
    return codes


def test_criterion_9_determinism(verdict, tmp_path):
    runs = {}
    for label, threads in (("a1", 1), ("b1", 1), ("a8", 8), ("b8", 8)):
        out = tmp_path / label
        out.mkdir()
        codes = _run_all(out, threads)
        files = sorted(p for p in out.rglob("*") if p.is_file() and p.suffix in (".csv", ".json"))
        runs[label] = (codes, {p.relative_to(out).as_posix(): reporting.payload(p.read_text())
                               for p in files})
    ref_codes, ref = runs["a1"]
    mismatched = [(label, name) for label, (codes, data) in runs.items()
                  for name in set(ref) | set(data) if data.get(name) != ref.get(name)]
    ok = not mismatched and all(c in (0, 1) for c in ref_codes) and \
        all(codes == ref_codes for codes, _ in runs.values())
    verdict("9 determinism (1 and 8 threads)", ok,
            f"{len(ref)} output files compared across 4 runs; mismatches {mismatched}")
