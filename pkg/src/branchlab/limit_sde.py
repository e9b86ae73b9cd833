"""Coefficients, simulation and exact marginals of the diffusion limit.

Conventions.  For class i the scalar coefficients are
    a_i = v_i^T m_{xi,eps,i},      b_i = v_i^T V_{xi,eps,i} v_i
with v_i^T u_i = 1/r.  The limit of the class-i part of block 1 of the scaled
process is Y_i = Z_i u_i where Z_i solves

    dZ = r a_i dt + sqrt(r^2 b_i Z^+) dW,

so that the projection P_i = v_i^T Y_i = Z_i / r solves
dP = a_i dt + sqrt(r b_i P^+) dW.  For r = 1 both reduce to
dZ = a dt + sqrt(b Z^+) dW.  The r-dependence is checked against an exact
two-step reduction of the 2-cycle model to a single-type process (see tests).
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import stats

from . import matrix_analysis as ma
from .errors import DegenerateLawError, NotCriticalError, NotPSDError
from .model import BranchingModel, mixture
from .simulator import ScaledPath, resolve_threads

SDE_BLOCK = 2048


def sde_rng(seed: int, stream: int, block: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(stream), int(block)))
    return np.random.Generator(np.random.Philox(ss))


# -- coefficients ------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SdeCoefficients:
    """Per-class limit coefficients; lists are indexed by class (0-based)."""

    r: int
    classes: tuple
    u: list
    v: list
    m_xieps: list
    V_xieps: list
    a: np.ndarray
    b: np.ndarray

    def z_drift(self, i: int) -> float:
        return self.r * float(self.a[i])

    def z_diffusion(self, i: int) -> float:
        return self.r ** 2 * float(self.b[i])

    def z_marginal(self, i: int, t: float) -> "GammaLaw":
        """Law of Z_{t,i} (so that Y_{t,i} = Z_{t,i} u_i)."""
        return exact_Z_marginal(self.z_drift(i), self.z_diffusion(i), t)

    def projection_marginal(self, i: int, t: float) -> "GammaLaw":
        """Law of v_i^T Y_{t,i}, the quantity the harness measures."""
        return exact_Z_marginal(float(self.a[i]), self.r * float(self.b[i]), t)

    def to_dict(self) -> dict:
        return {"r": self.r,
                "classes": [
                    {"class": i, "types": list(self.classes[i]), "a": float(self.a[i]),
                     "b": float(self.b[i]), "m_xieps": self.m_xieps[i].tolist(),
                     "V_xieps": self.V_xieps[i].tolist(),
                     "z_drift": self.z_drift(i), "z_diffusion": self.z_diffusion(i)}
                    for i in range(self.r)]}


def sde_coefficients(model: BranchingModel) -> SdeCoefficients:
    """m_{xi,eps,i}, V_{xi,eps,i}, a_i, b_i for every cyclic class."""
    s = model.structure
    if s is None:
        raise ValueError("class data missing")
    if not model.critical_indecomposable:
        raise NotCriticalError()
    r, M = s.r, model.m_xi
    cls = [list(c) for c in s.classes]
    m_eps_cls = [model.m_eps[c] for c in cls]
    # V_l stacks the covariances of parents in class l restricted to class l-1
    V_cls = [np.stack([model.V_xi[j][np.ix_(cls[(l - 1) % r], cls[(l - 1) % r])] for j in cls[l]])
             for l in range(r)]
    u = [s.u_block(c) for c in range(r)]
    v = [s.v_block(c) for c in range(r)]
    m_list, V_list, a, b = [], [], np.zeros(r), np.zeros(r)
    for i in range(1, r + 1):
        mi = np.zeros(len(cls[i - 1]))
        Vi = np.zeros((len(cls[i - 1]), len(cls[i - 1])))
        for l in range(i, i + r):
            mt = ma.block_product(M, s, i, l)
            mi += mt @ m_eps_cls[(l - 1) % r]
            w = ma.block_product(M, s, l + 1, i + r) @ u[i - 1]
            Vi += mt @ mixture(w, V_cls[l % r]) @ mt.T
        mi /= r
        Vi = 0.5 * (Vi + Vi.T) / r
        m_list.append(mi)
        V_list.append(Vi)
        a[i - 1] = v[i - 1] @ mi
        b[i - 1] = v[i - 1] @ Vi @ v[i - 1]
    return SdeCoefficients(r, tuple(tuple(c) for c in cls), u, v, m_list, V_list, a, b)


# -- exact marginal ----------------------------------------------------------------------


@dataclass(frozen=True)
class GammaLaw:
    """Gamma(shape, scale) marginal of dZ = a dt + sqrt(b Z^+) dW started at 0."""

    shape: float
    scale: float

    @property
    def dist(self):
        return stats.gamma(a=self.shape, scale=self.scale)

    @property
    def mean(self) -> float:
        return self.shape * self.scale

    @property
    def var(self) -> float:
        return self.shape * self.scale ** 2

    def cdf(self, x):
        return self.dist.cdf(x)

    def sample(self, size, rng: np.random.Generator) -> np.ndarray:
        return rng.gamma(self.shape, self.scale, size=size)


def exact_Z_marginal(a: float, b: float, t: float) -> GammaLaw:
    """Time-t law of dZ = a dt + sqrt(b Z^+) dW, Z_0 = 0: Gamma(2a/b, b t/2).

    With Z = (b/4) Q, Q is a squared Bessel process of dimension 4a/b whose
    time-t law from 0 is Gamma(2a/b, 2t).
    """
    if a < 0 or b < 0 or t < 0:
        raise ValueError("a, b and t must be nonnegative")
    if a == 0 or t == 0:
        raise DegenerateLawError(0.0)
    if b == 0:
        raise DegenerateLawError(a * t)
    return GammaLaw(2.0 * a / b, b * t / 2.0)


# -- Euler-Maruyama ----------------------------------------------------------------------


def _em_grid(T: float, dt: float, G: int | None):
    if not dt > 0:
        raise ValueError("invalid step")
    if not T > 0:
        raise ValueError("T must be positive")
    steps = max(1, int(round(T / dt)))
    h = T / steps
    G = min(steps, 100 if G is None else int(G))
    rec = np.unique(np.round(np.linspace(0, steps, G + 1)).astype(np.int64))
    return steps, h, rec


def _z_block(a: float, b: float, steps: int, h: float, rec: np.ndarray,
             rng: np.random.Generator, chunk: int = 256):
    Z = np.zeros(SDE_BLOCK)
    out = np.zeros((SDE_BLOCK, len(rec)))
    clamps = 0
    slot = 1
    sq = np.sqrt(h)
    k = 0
    while k < steps:
        c = min(chunk, steps - k)
        xi = rng.standard_normal((c, SDE_BLOCK))
        for q in range(c):
            Zp = np.maximum(Z, 0.0)
            clamps += int(np.count_nonzero(Z < 0))
            Z = Z + a * h + np.sqrt(b * Zp) * sq * xi[q]
            k += 1
            if slot < len(rec) and rec[slot] == k:
                out[:, slot] = Z
                slot += 1
    return out, clamps


@dataclass(frozen=True, eq=False)
class ZPaths:
    """Euler-Maruyama paths of one scalar square-root diffusion."""

    path: ScaledPath
    dt: float
    clamp_fraction: float

    @property
    def final(self) -> np.ndarray:
        return self.path.values[:, -1, 0]


def simulate_Z(a: float, b: float, T: float, dt: float, seed: int, reps: int = 1,
               G: int | None = None, threads: int | None = None, stream: int = 0) -> ZPaths:
    """Full-truncation Euler-Maruyama for dZ = a dt + sqrt(b Z^+) dW, Z_0 = 0.

    The state keeps its sign; only the argument of the square root is
    truncated at 0.  Paths are recorded on a grid of at most G+1 points.
    """
    if a < 0 or b < 0:
        raise ValueError("a and b must be nonnegative")
    steps, h, rec = _em_grid(T, dt, G)
    n_blocks = -(-reps // SDE_BLOCK)

    def run(blk):
        return _z_block(a, b, steps, h, rec, sde_rng(seed, stream, blk))

    workers = min(resolve_threads(threads), n_blocks)
    if workers == 1:
        parts = [run(blk) for blk in range(n_blocks)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, range(n_blocks)))
    vals = np.concatenate([p[0] for p in parts])[:reps]
    clamps = sum(p[1] for p in parts)
    frac = clamps / float(n_blocks * SDE_BLOCK * steps)
    return ZPaths(ScaledPath(rec * h, vals[:, :, None], "sde"), h, frac)


def simulate_Z_classes(coef: SdeCoefficients, T: float, dt: float, seed: int, reps: int = 1,
                       G: int | None = None, threads: int | None = None) -> list[ZPaths]:
    """Independent Z_{.,i} for every class, each on its own stream."""
    return [simulate_Z(coef.z_drift(i), coef.z_diffusion(i), T, dt, seed, reps, G, threads,
                       stream=i) for i in range(coef.r)]


# -- assembling the limit ----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LimitPath:
    """Z per class (…, G+1, r), Y in original type order (…, G+1, p), stacked X (…, G+1, rp)."""

    grid: np.ndarray
    Z: np.ndarray
    Y: np.ndarray
    X: np.ndarray
    periodicity_residual: float


def assemble_limit(Z, model: BranchingModel, grid=None) -> LimitPath:
    """Y_{t,i} = Z_{t,i} u_i and X block l = m^{r-l+1} Y; checks m^r Y = Y.

    ``Z`` is either an array (..., G+1, r) or a list of ZPaths / ScaledPaths,
    one per class, that must share a grid.
    """
    if isinstance(Z, (list, tuple)):
        paths = [z.path if isinstance(z, ZPaths) else z for z in Z]
        g0 = paths[0].grid
        for pth in paths[1:]:
            if pth.grid.shape != g0.shape or np.any(pth.grid != g0):
                raise ValueError("grid mismatch")
        grid = g0
        Z = np.stack([pth.values[..., 0] for pth in paths], axis=-1)
    Z = np.asarray(Z, dtype=float)
    s = model.structure
    if Z.shape[-1] != s.r:
        raise ValueError("grid mismatch: need one Z path per class")
    if grid is not None and len(grid) != Z.shape[-2]:
        raise ValueError("grid mismatch")
    r, p, m = s.r, model.p, model.m_xi
    Y = np.zeros(Z.shape[:-1] + (p,))
    for c in range(r):
        Y[..., list(s.classes[c])] = Z[..., c:c + 1] * s.u_block(c)
    blocks = [Y @ np.linalg.matrix_power(m, r - l + 1).T for l in range(1, r + 1)]
    X = np.concatenate(blocks, axis=-1)
    scale = max(1.0, float(np.abs(Y).max()) if Y.size else 1.0)
    resid = float(np.abs(blocks[0] - Y).max()) if Y.size else 0.0
    if resid > 1e-10 * scale:
        raise ValueError(f"periodicity check failed: |m^r Y - Y| = {resid:g}")
    return LimitPath(np.asarray(grid) if grid is not None else None, Z, Y, X, resid)


# -- PSD square root and the M/N system ----------------------------------------------------


def psd_sqrt(A, tol: float = 1e-8) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition; accepts stacks (..., p, p).

    Eigenvalues down to -tol * trace are treated as rounding noise and set to 0.
    """
    A = np.asarray(A, dtype=float)
    S = 0.5 * (A + np.swapaxes(A, -1, -2))
    w, Q = np.linalg.eigh(S)
    tr = np.trace(S, axis1=-2, axis2=-1)
    if np.any(w.min(axis=-1) < -tol * np.maximum(tr, 0.0) - 1e-300):
        raise NotPSDError()
    w = np.sqrt(np.clip(w, 0.0, None))
    return (Q * w[..., None, :]) @ np.swapaxes(Q, -1, -2)


@dataclass(frozen=True, eq=False)
class MNPaths:
    """Joint paths of M_{t,1..r} (…, G+1, r, p) and N computed two ways (…, G+1, p)."""

    grid: np.ndarray
    M: np.ndarray
    N_direct: np.ndarray
    N_algebraic: np.ndarray
    dt: float

    @property
    def n_deviation(self) -> float:
        return float(np.abs(self.N_direct - self.N_algebraic).max())


def _mn_block(model, Pi, steps, h, rec, rng, lanes):
    r, p, m = model.r, model.p, model.m_xi
    mp = [np.linalg.matrix_power(m, e) for e in range(r + 1)]
    drift_sum = sum(mp[l - 1] @ model.m_eps for l in range(1, r + 1))
    left = [mp[r - i] @ Pi for i in range(1, r + 1)]
    Vstack = model.V_xi
    M = np.zeros((lanes, r, p))
    N = np.zeros((lanes, p))
    outM = np.zeros((lanes, len(rec), r, p))
    outN = np.zeros((lanes, len(rec), p))
    slot, sq = 1, np.sqrt(h)
    for k in range(steps):
        t = k * h
        dW = rng.standard_normal((lanes, r, p)) * sq
        argM = sum(r * M[:, j - 1] @ mp[j - 1].T for j in range(1, r + 1)) + t * drift_sum
        argN = r * N + t * drift_sum
        dM = np.zeros_like(M)
        dN = np.zeros_like(N)
        for i in range(1, r + 1):
            wM = np.clip(argM @ left[i - 1].T, 0.0, None)
            wN = np.clip(argN @ left[i - 1].T, 0.0, None)
            sM = psd_sqrt(np.einsum("nj,jab->nab", wM, Vstack))
            sN = psd_sqrt(np.einsum("nj,jab->nab", wN, Vstack))
            dM[:, i - 1] = np.einsum("nab,nb->na", sM, dW[:, i - 1]) / r
            dN += (np.einsum("nab,nb->na", sN, dW[:, i - 1]) @ mp[i - 1].T) / r
        M = M + dM
        N = N + dN
        if slot < len(rec) and rec[slot] == k + 1:
            outM[:, slot] = M
            outN[:, slot] = N
            slot += 1
    return outM, outN


def simulate_MN_system(model: BranchingModel, T: float, dt: float, seed: int, reps: int = 1,
                       G: int | None = None, threads: int | None = None) -> MNPaths:
    """Euler-Maruyama for the coupled martingale system and N = sum_j m^{j-1} M_j.

    N is integrated directly from its own equation with the same Wiener
    increments and also formed algebraically from M; both are returned.
    """
    if not model.critical_indecomposable:
        raise NotCriticalError()
    steps, h, rec = _em_grid(T, dt, G)
    Pi = ma.limit_projector(model.structure)
    lanes = min(SDE_BLOCK, 512)
    n_blocks = -(-reps // lanes)

    def run(blk):
        return _mn_block(model, Pi, steps, h, rec, sde_rng(seed, 1000, blk), lanes)

    workers = min(resolve_threads(threads), n_blocks)
    if workers == 1:
        parts = [run(blk) for blk in range(n_blocks)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, range(n_blocks)))
    M = np.concatenate([q[0] for q in parts])[:reps]
    N = np.concatenate([q[1] for q in parts])[:reps]
    mp = [np.linalg.matrix_power(model.m_xi, e) for e in range(model.r)]
    N_alg = sum(M[..., j, :] @ mp[j].T for j in range(model.r))
    return MNPaths(rec * h, M, N, N_alg, h)


def mn_projection(model: BranchingModel, paths: MNPaths, coef: SdeCoefficients | None = None) -> np.ndarray:
    """v_i^T (N_{t,i} + (t/r) sum_l m~_{i,l} m_{eps,l}) per class, shape (reps, G+1, r).

    In the limit this equals v_i^T Y_{t,i}, whose law is
    ``coef.projection_marginal(i, t)``.
    """
    coef = sde_coefficients(model) if coef is None else coef
    s = model.structure
    out = np.zeros(paths.N_direct.shape[:-1] + (s.r,))
    for c in range(s.r):
        idx = list(s.classes[c])
        shift = paths.grid[:, None] * coef.m_xieps[c][None, :]  # (t/r) sum = t * m_xieps
        out[..., c] = (paths.N_direct[..., idx] + shift) @ coef.v[c]
    return out
