"""Structure of irreducible nonnegative matrices.

Everything here works in the caller's index order. The cyclic classes are
stored as tuples of original indices, so the canonical block form is a view
(``canonical_form``) rather than a relabelling of the model.

Convention: ``M[a, b] > 0`` is an edge ``a -> b`` of the positivity digraph,
and an edge always leads from class ``c`` to class ``c + 1 (mod r)``.
"""
from __future__ import annotations

import csv
import json
from collections import deque
from dataclasses import dataclass, replace
from functools import reduce
from math import gcd
from pathlib import Path

import numpy as np

from .errors import ConvergenceError, NotCriticalError, ReducibleMatrixError

CRITICAL_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class CyclicStructure:
    """Cyclic classes and Perron data of an irreducible matrix.

    ``classes[c]`` holds the original indices of class ``D_{c+1}``;
    ``permutation`` lists all indices class by class. The Perron and rate
    fields are ``None`` on the partial structure returned by
    :func:`cyclic_partition`.
    """

    r: int
    classes: tuple[tuple[int, ...], ...]
    permutation: tuple[int, ...]
    rho: float | None = None
    u: np.ndarray | None = None
    v: np.ndarray | None = None
    rate_c: float | None = None
    rate_kappa: float | None = None
    rate_exact: bool = False

    @property
    def p(self) -> int:
        return len(self.permutation)

    def class_of(self) -> np.ndarray:
        """Array mapping each type to its 0-based class."""
        out = np.empty(self.p, dtype=int)
        for c, idx in enumerate(self.classes):
            out[list(idx)] = c
        return out

    def u_block(self, c: int) -> np.ndarray:
        return self.u[list(self.classes[c % self.r])]

    def v_block(self, c: int) -> np.ndarray:
        return self.v[list(self.classes[c % self.r])]

    def to_dict(self) -> dict:
        def _vec(x):
            return None if x is None else [float(t) for t in x]

        return {
            "r": self.r,
            "classes": [list(c) for c in self.classes],
            "permutation": list(self.permutation),
            "rho": self.rho,
            "u": _vec(self.u),
            "v": _vec(self.v),
            "rate_c": self.rate_c,
            "rate_kappa": self.rate_kappa,
            "rate_exact": self.rate_exact,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CyclicStructure":
        def _arr(x):
            return None if x is None else np.asarray(x, dtype=float)

        return cls(
            r=int(d["r"]),
            classes=tuple(tuple(int(i) for i in c) for c in d["classes"]),
            permutation=tuple(int(i) for i in d["permutation"]),
            rho=d.get("rho"),
            u=_arr(d.get("u")),
            v=_arr(d.get("v")),
            rate_c=d.get("rate_c"),
            rate_kappa=d.get("rate_kappa"),
            rate_exact=bool(d.get("rate_exact", False)),
        )


@dataclass(frozen=True)
class RateFit:
    c: float
    kappa: float
    exact: bool
    errors: tuple[float, ...]


def as_nonneg_matrix(M) -> np.ndarray:
    A = np.asarray(M, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] < 1:
        raise ValueError(f"expected a square matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)) or np.any(A < 0):
        raise ValueError("matrix entries must be finite and nonnegative")
    return A


def _successors(A: np.ndarray) -> list[np.ndarray]:
    return [np.flatnonzero(A[i] > 0) for i in range(A.shape[0])]


def _reach(succ: list[np.ndarray], root: int) -> np.ndarray:
    seen = np.zeros(len(succ), dtype=bool)
    seen[root] = True
    queue = deque([root])
    while queue:
        a = queue.popleft()
        for b in succ[a]:
            if not seen[b]:
                seen[b] = True
                queue.append(b)
    return seen


def check_irreducible(M) -> bool:
    """True iff the positivity digraph of ``M`` is strongly connected.

    A 1x1 matrix counts as irreducible only when its entry is positive, so
    that it has a cycle and a period.
    """
    A = as_nonneg_matrix(M)
    if A.shape[0] == 1:
        return bool(A[0, 0] > 0)
    return bool(_reach(_successors(A), 0).all() and _reach(_successors(A.T), 0).all())


def _bfs_levels(A: np.ndarray, root: int = 0) -> np.ndarray:
    succ = _successors(A)
    level = np.full(A.shape[0], -1, dtype=int)
    level[root] = 0
    queue = deque([root])
    while queue:
        a = queue.popleft()
        for b in succ[a]:
            if level[b] < 0:
                level[b] = level[a] + 1
                queue.append(b)
    return level


def cyclicity_index(M) -> int:
    """Period of the positivity digraph: gcd of all directed cycle lengths."""
    A = as_nonneg_matrix(M)
    if not check_irreducible(A):
        raise ReducibleMatrixError()
    level = _bfs_levels(A)
    rows, cols = np.nonzero(A > 0)
    diffs = np.abs(level[rows] + 1 - level[cols])
    return int(reduce(gcd, diffs.tolist(), 0))


def cyclic_partition(M) -> CyclicStructure:
    A = as_nonneg_matrix(M)
    r = cyclicity_index(A)
    level = _bfs_levels(A) % r
    classes = tuple(tuple(int(i) for i in np.flatnonzero(level == c)) for c in range(r))
    perm = tuple(i for c in classes for i in c)
    return CyclicStructure(r=r, classes=classes, permutation=perm)


def canonical_form(M, s: CyclicStructure) -> np.ndarray:
    A = np.asarray(M, dtype=float)
    perm = list(s.permutation)
    return A[np.ix_(perm, perm)]


def block(M, s: CyclicStructure, a: int, b: int) -> np.ndarray:
    """Sub-matrix of ``M`` with rows in class ``a`` and columns in class ``b`` (0-based, mod r)."""
    A = np.asarray(M, dtype=float)
    return A[np.ix_(list(s.classes[a % s.r]), list(s.classes[b % s.r]))]


def block_product(M, s: CyclicStructure, i: int, j: int) -> np.ndarray:
    """Product of consecutive superdiagonal blocks from class ``i`` to class ``j``.

    Class indices are 1-based and reduced mod r for lookup; ``i == j`` gives
    the identity on class ``i``.
    """
    if i < 1 or j < 1:
        raise IndexError("index out of range")
    if j < i:
        raise IndexError("index out of range: need i <= j")
    out = np.eye(len(s.classes[(i - 1) % s.r]))
    for c in range(i, j):
        out = out @ block(M, s, c - 1, c)
    return out


def _power_iterate(B: np.ndarray, tol: float, max_iter: int) -> tuple[float, np.ndarray]:
    x = np.ones(B.shape[0])
    lam = 0.0
    for _ in range(max_iter):
        y = B @ x
        lam = y.sum() / x.sum()
        y /= y.sum()
        if np.max(np.abs(y - x)) <= tol * np.max(np.abs(y)):
            return lam, y
        x = y
    raise ConvergenceError()


def perron_data(M, s: CyclicStructure | None = None, tol: float = 1e-10,
                max_iter: int = 100_000) -> tuple[float, np.ndarray, np.ndarray]:
    """Perron root and normalized right/left Perron vectors.

    Power iteration runs on the primitive diagonal block of ``M**r`` for the
    first class; the vectors on the other classes follow from
    ``M u = rho u`` and ``v^T M = rho v^T`` block by block.
    """
    A = as_nonneg_matrix(M)
    if s is None:
        s = cyclic_partition(A)
    r = s.r
    B = block_product(A, s, 1, 1 + r)
    inner = min(tol, 1e-13)
    lam_u, x = _power_iterate(B, inner, max_iter)
    lam_v, y = _power_iterate(B.T, inner, max_iter)
    lam = 0.5 * (lam_u + lam_v)
    rho = lam ** (1.0 / r)

    u = np.zeros(A.shape[0])
    v = np.zeros(A.shape[0])
    u_blk, v_blk = {0: x}, {0: y}
    for c in range(r - 1, 0, -1):
        u_blk[c] = block(A, s, c, c + 1) @ u_blk[(c + 1) % r] / rho
    for c in range(1, r):
        v_blk[c] = block(A, s, c - 1, c).T @ v_blk[c - 1] / rho
    for c in range(r):
        u[list(s.classes[c])] = u_blk[c]
        v[list(s.classes[c])] = v_blk[c]
    u /= u.sum()
    v /= u @ v

    res_u = np.linalg.norm(A @ u - rho * u)
    res_v = np.linalg.norm(v @ A - rho * v)
    if max(res_u, res_v) > tol * rho * max(1.0, np.linalg.norm(v)):
        raise ConvergenceError(f"no convergence (residuals {res_u:.3g}, {res_v:.3g})")
    return float(rho), u, v


def limit_projector(s: CyclicStructure) -> np.ndarray:
    """Block-diagonal limit of ``M**(n r)``: blocks ``r u_i v_i^T`` on each class."""
    p = s.p
    Pi = np.zeros((p, p))
    for c, idx in enumerate(s.classes):
        ix = list(idx)
        Pi[np.ix_(ix, ix)] = s.r * np.outer(s.u[ix], s.v[ix])
    return Pi


def operator_norm(A) -> float:
    return float(np.linalg.norm(np.asarray(A, dtype=float), 2))


def fit_rate(M, Pi, r: int, n_max: int = 60, tol: float = CRITICAL_TOL,
             rho: float | None = None) -> RateFit:
    """Fit ``||M^(nr) - Pi|| <= c kappa^n`` from the observed errors.

    ``kappa`` is the exponential of the least-squares slope of ``log e_n``
    over the tail half of the errors above the rounding floor, and ``c`` the
    smallest constant that makes the bound hold on every observed ``n``.
    """
    A = as_nonneg_matrix(M)
    Pi = np.asarray(Pi, dtype=float)
    if rho is None:
        rho = float(np.max(np.abs(np.linalg.eigvals(A))))
    if abs(rho - 1.0) > tol:
        raise NotCriticalError(f"not critical (|rho - 1| = {abs(rho - 1.0):.3g})")
    P = np.linalg.matrix_power(A, r)
    cur = P.copy()
    errors = []
    for _ in range(n_max):
        errors.append(operator_norm(cur - Pi))
        cur = cur @ P
    e = np.array(errors)
    floor = 1e-12 * max(1.0, operator_norm(Pi))
    valid = np.flatnonzero(e > floor)
    if valid.size == 0:
        return RateFit(c=0.0, kappa=0.0, exact=True, errors=tuple(errors))
    # errors below the floor are rounding noise; keep the leading run only
    stop = valid[0]
    while stop + 1 < e.size and e[stop + 1] > floor:
        stop += 1
    n = np.arange(1, stop + 2)
    used = e[: stop + 1]
    if used.size < 2:
        kappa = min(floor / used[0], 0.5)
    else:
        tail = slice(used.size // 2, None) if used.size >= 4 else slice(None)
        slope = np.polyfit(n[tail], np.log(used[tail]), 1)[0]
        kappa = float(np.exp(slope))
    c = float(np.max(used / kappa ** n))
    return RateFit(c=c, kappa=float(kappa), exact=False, errors=tuple(errors))


def analyze(M, crit_tol: float = CRITICAL_TOL, n_max: int = 60) -> CyclicStructure:
    """Full structure: classes, Perron data and (for critical input) rate constants."""
    A = as_nonneg_matrix(M)
    s = cyclic_partition(A)
    rho, u, v = perron_data(A, s)
    s = replace(s, rho=rho, u=u, v=v)
    if abs(rho - 1.0) <= crit_tol:
        fit = fit_rate(A, limit_projector(s), s.r, n_max=n_max, tol=crit_tol, rho=rho)
        s = replace(s, rate_c=fit.c, rate_kappa=fit.kappa, rate_exact=fit.exact)
    return s


def partition_violation(M, s: CyclicStructure) -> float:
    """Largest entry of ``M`` outside the cyclic block pattern (0.0 when exact)."""
    A = np.asarray(M, dtype=float)
    cls = s.class_of()
    allowed = (cls[None, :] - cls[:, None]) % s.r == 1 % s.r
    off = np.where(allowed, 0.0, np.abs(A))
    return float(off.max()) if off.size else 0.0


def projector_identities(M, s: CyclicStructure) -> dict:
    """Residuals of the algebraic identities tying ``Pi`` to ``M``."""
    A = np.asarray(M, dtype=float)
    r = s.r
    Pi = limit_projector(s)
    Mr = np.linalg.matrix_power(A, r)
    commute = 0.0
    for i in range(1, r + 1):
        Mk = np.linalg.matrix_power(A, r - i)
        commute = max(commute, float(np.max(np.abs(Mk @ Pi - Pi @ Mk))))
    # M^r is block diagonal with blocks mtilde_{i,i+r}
    blockdiag = 0.0
    cls = s.class_of()
    off = cls[:, None] != cls[None, :]
    blockdiag = float(np.max(np.abs(Mr[off]))) if off.any() else 0.0
    diag_err = 0.0
    for c in range(r):
        ix = list(s.classes[c])
        diag_err = max(diag_err, float(np.max(np.abs(
            Mr[np.ix_(ix, ix)] - block_product(A, s, c + 1, c + 1 + r)))))
    return {
        "partition_violation": partition_violation(A, s),
        "pi_mr_minus_pi": float(np.max(np.abs(Pi @ Mr - Pi))),
        "pi_commutator": commute,
        "pi_squared_minus_pi": float(np.max(np.abs(Pi @ Pi - s.rho ** r * Pi))),
        "mr_offblock_max": blockdiag,
        "mr_block_mismatch": diag_err,
        "perron_residual_u": float(np.linalg.norm(A @ s.u - s.rho * s.u)),
        "perron_residual_v": float(np.linalg.norm(s.v @ A - s.rho * s.v)),
    }


def load_matrix(path) -> np.ndarray:
    """Read a matrix from JSON (row-major nested arrays) or CSV."""
    path = Path(path)
    if path.suffix.lower() == ".json":
        data = json.loads(path.read_text())
        if isinstance(data, dict):
            data = data["matrix"]
        return as_nonneg_matrix(data)
    with path.open(newline="") as fh:
        rows = [[float(x) for x in row] for row in csv.reader(fh)
                if row and not row[0].startswith("#")]
    return as_nonneg_matrix(rows)


def save_matrix(M, path) -> None:
    path = Path(path)
    A = np.asarray(M, dtype=float)
    if path.suffix.lower() == ".json":
        path.write_text(json.dumps(A.tolist()))
        return
    with path.open("w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows([[repr(float(x)) for x in row] for row in A])
