"""Exact first and second moments of X_k and M_k, and growth-order diagnostics."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.linalg import block_diag

from .errors import NotCriticalError
from .model import BranchingModel, mixture


def mean_sequence(model: BranchingModel, k: int) -> np.ndarray:
    """E X_0..E X_k as a (k+1, p) array via E X_j = m E X_{j-1} + m_eps."""
    if k < 0:
        raise ValueError("k must be nonnegative")
    out = np.zeros((k + 1, model.p))
    for j in range(1, k + 1):
        out[j] = model.m_xi @ out[j - 1] + model.m_eps
    return out


def mean_vector(model: BranchingModel, k: int) -> np.ndarray:
    return mean_sequence(model, k)[k]


def variance_sequence(model: BranchingModel, k: int) -> np.ndarray:
    """Var X_0..Var X_k, shape (k+1, p, p).

    Conditioning on X_{j-1} gives
    Var X_j = m Var X_{j-1} m^T + (E X_{j-1}) (.) V_xi + V_eps,
    which unrolls to the double-sum formula while costing O(k p^3).
    """
    means = mean_sequence(model, k)
    m = model.m_xi
    out = np.zeros((k + 1, model.p, model.p))
    for j in range(1, k + 1):
        V = m @ out[j - 1] @ m.T + mixture(means[j - 1], model.V_xi) + model.V_eps
        out[j] = 0.5 * (V + V.T)
    return out


def variance_matrix(model: BranchingModel, k: int) -> np.ndarray:
    return variance_sequence(model, k)[k]


def variance_matrix_direct(model: BranchingModel, k: int) -> np.ndarray:
    """Literal evaluation of the double sum for Var X_k (quadratic in k; test oracle)."""
    m, p = model.m_xi, model.p
    pw = [np.linalg.matrix_power(m, j) for j in range(max(k, 1))]
    V = np.zeros((p, p))
    for j in range(k):
        V += pw[j] @ model.V_eps @ pw[j].T
    for j in range(k - 1):
        inner = np.zeros((p, p))
        for l in range(k - j - 1):
            inner += mixture(pw[l] @ model.m_eps, model.V_xi)
        V += pw[j] @ inner @ pw[j].T
    return V


def martingale_cov_conditional(model: BranchingModel, x) -> np.ndarray:
    """E(M_k M_k^T | X_{rk-r} = x) as an rp x rp block-diagonal matrix."""
    x = np.asarray(x, dtype=float)
    r, m = model.r, model.m_xi
    blocks = []
    for l in range(1, r + 1):
        w = np.linalg.matrix_power(m, r - l) @ x
        for j in range(1, r - l + 1):
            w = w + np.linalg.matrix_power(m, j - 1) @ model.m_eps
        blocks.append(mixture(w, model.V_xi) + model.V_eps)
    return block_diag(*blocks)


def martingale_cov_conditional_batch(model: BranchingModel, x: np.ndarray) -> np.ndarray:
    """Vectorised ``martingale_cov_conditional`` for states x of shape (N, p)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    r, p, m = model.r, model.p, model.m_xi
    out = np.zeros((x.shape[0], r * p, r * p))
    for l in range(1, r + 1):
        w = x @ np.linalg.matrix_power(m, r - l).T
        for j in range(1, r - l + 1):
            w = w + np.linalg.matrix_power(m, j - 1) @ model.m_eps
        s = slice((l - 1) * p, l * p)
        out[:, s, s] = np.einsum("ni,ijk->njk", w, model.V_xi) + model.V_eps
    return out


def martingale_cov(model: BranchingModel, k: int) -> np.ndarray:
    """E(M_k M_k^T): the conditional formula at x = E X_{rk-r}."""
    if k < 1:
        raise ValueError("k must be at least 1")
    return martingale_cov_conditional(model, mean_vector(model, model.r * k - model.r))


def moment_table(model: BranchingModel, ks) -> list[dict]:
    """Rows of oracle means and covariances (flattened column-major) for CSV output."""
    ks = [int(k) for k in ks]
    K = max(ks) if ks else 0
    means = mean_sequence(model, K)
    variances = variance_sequence(model, K)
    rows = []
    for k in ks:
        row = {"k": k}
        row.update({f"mean{i}": means[k, i] for i in range(model.p)})
        flat = variances[k].flatten(order="F")
        row.update({f"var{j}": flat[j] for j in range(flat.size)})
        rows.append(row)
    return rows


@dataclass
class SlopeFit:
    """Log-log regression slope with a 95% band from the regression standard error."""

    name: str
    slope: float
    low: float
    high: float
    source: str
    ks: np.ndarray = field(repr=False)
    values: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {"name": self.name, "slope": self.slope, "ci95": [self.low, self.high],
                "source": self.source, "k": self.ks.tolist(), "value": self.values.tolist()}


def _loglog(name, ks, vals, source) -> SlopeFit:
    ks = np.asarray(ks, dtype=float)
    vals = np.asarray(vals, dtype=float)
    keep = vals > 0
    if keep.sum() < 2:
        return SlopeFit(name, float("nan"), float("nan"), float("nan"), source, ks, vals)
    fit = stats.linregress(np.log(ks[keep]), np.log(vals[keep]))
    half = 1.96 * fit.stderr
    return SlopeFit(name, float(fit.slope), float(fit.slope - half), float(fit.slope + half),
                    source, ks, vals)


@dataclass
class GrowthReport:
    k_max: int
    replications: int
    fits: dict

    def to_dict(self) -> dict:
        return {"k_max": self.k_max, "replications": self.replications,
                "fits": {k: v.to_dict() for k, v in self.fits.items()}}


def growth_diagnostics(model: BranchingModel, k_max: int = 200, replications: int = 10_000,
                       seed: int = 0, threads: int | None = None, n_points: int = 25) -> GrowthReport:
    """Log-log slopes of E||X_k||, E||X_k||^2, E||M_k||, E||M_k||^4 over k in [k_max/20, k_max].

    ||X_k|| is the l1 norm, so E||X_k|| equals the l1 norm of the exact mean
    (X_k is nonnegative); the other three are Monte Carlo estimates.  M_k is
    the k-th block of r consecutive innovations with the Euclidean norm.
    """
    from .simulator import blocks_from_states, simulate_batch

    if not model.critical_indecomposable:
        raise NotCriticalError()
    k_lo = max(1, k_max // 20)
    ks = np.unique(np.geomspace(k_lo, k_max, n_points).round().astype(int))
    means = mean_sequence(model, k_max)
    fits = {"E|X|": _loglog("E|X|", ks, np.abs(means[ks]).sum(axis=1), "oracle")}

    batch = simulate_batch(model, k_max, replications, seed, threads=threads)
    X = batch.states.astype(float)
    sq = (X[:, ks, :].sum(axis=2) ** 2).mean(axis=0)
    fits["E|X|^2"] = _loglog("E|X|^2", ks, sq, "monte_carlo")

    blocks = blocks_from_states(batch.states, model).blocks
    nb = blocks.shape[1]
    kb = np.unique(np.geomspace(max(1, nb // 20), nb, n_points).round().astype(int))
    norms = np.sqrt((blocks[:, kb - 1] ** 2).sum(axis=(2, 3)))
    fits["E|M|"] = _loglog("E|M|", kb, norms.mean(axis=0), "monte_carlo")
    fits["E|M|^4"] = _loglog("E|M|^4", kb, (norms ** 4).mean(axis=0), "monte_carlo")
    return GrowthReport(k_max, replications, fits)
