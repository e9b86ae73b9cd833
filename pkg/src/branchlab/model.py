"""Offspring and immigration laws, and the branching model built from them."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import matrix_analysis as ma
from .errors import ModelSpecError, MomentMismatchError

KINDS = ("finite_support", "poisson_product", "bernoulli_product")


@dataclass(frozen=True, eq=False)
class OffspringLaw:
    """Law of a random vector in Z_+^p.

    ``finite_support`` keeps ``support`` (m x p integer array) and ``probs``;
    the product families keep one parameter per coordinate in ``params``.
    """

    kind: str
    params: np.ndarray | None = None
    support: np.ndarray | None = None
    probs: np.ndarray | None = None

    @classmethod
    def finite_support(cls, pairs) -> "OffspringLaw":
        pairs = list(pairs)
        if not pairs:
            raise ValueError("finite_support needs at least one atom")
        support = np.array([np.asarray(v, dtype=np.int64) for v, _ in pairs])
        probs = np.array([float(q) for _, q in pairs])
        if support.ndim != 2:
            raise ValueError("support vectors must share one length")
        if np.any(support < 0) or np.any(probs < 0):
            raise ValueError("support vectors and probabilities must be nonnegative")
        if abs(probs.sum() - 1.0) > 1e-12:
            raise MomentMismatchError(f"moment mismatch: probabilities sum to {probs.sum()!r}")
        return cls("finite_support", support=support, probs=probs)

    @classmethod
    def constant(cls, vector) -> "OffspringLaw":
        return cls.finite_support([(vector, 1.0)])

    @classmethod
    def poisson(cls, means) -> "OffspringLaw":
        lam = np.asarray(means, dtype=float)
        if lam.ndim != 1 or np.any(lam < 0) or not np.all(np.isfinite(lam)):
            raise ValueError("Poisson means must be a finite nonnegative vector")
        return cls("poisson_product", params=lam)

    @classmethod
    def bernoulli(cls, probs) -> "OffspringLaw":
        q = np.asarray(probs, dtype=float)
        if q.ndim != 1 or np.any(q < 0) or np.any(q > 1):
            raise ValueError("Bernoulli probabilities must lie in [0, 1]")
        return cls("bernoulli_product", params=q)

    @property
    def p(self) -> int:
        return self.support.shape[1] if self.kind == "finite_support" else self.params.size

    def mean(self) -> np.ndarray:
        if self.kind == "finite_support":
            return self.probs @ self.support
        return self.params.astype(float).copy()

    def cov(self) -> np.ndarray:
        if self.kind == "finite_support":
            mu = self.mean()
            S = self.support.astype(float)
            return (S.T * self.probs) @ S - np.outer(mu, mu)
        if self.kind == "poisson_product":
            return np.diag(self.params)
        q = self.params
        return np.diag(q * (1.0 - q))

    def fourth_moment_finite(self) -> bool:
        # finite supports and product Poisson/Bernoulli have all moments
        return self.kind in KINDS

    def is_degenerate(self) -> bool:
        return bool(np.all(self.cov() == 0))

    def sample(self, size: int, rng: np.random.Generator) -> np.ndarray:
        """``size`` independent draws, shape (size, p)."""
        if self.kind == "finite_support":
            idx = rng.choice(len(self.probs), size=size, p=self.probs)
            return self.support[idx]
        if self.kind == "poisson_product":
            return rng.poisson(self.params, size=(size, self.p))
        return (rng.random((size, self.p)) < self.params).astype(np.int64)

    def sample_sum(self, counts: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Sum of ``counts[j]`` iid draws for each j, shape (len(counts), p).

        Exact in law: Poisson sums are Poisson, Bernoulli sums are binomial,
        and a finite-support sum is a multinomial count vector times the
        support.
        """
        counts = np.asarray(counts, dtype=np.int64)
        if self.kind == "poisson_product":
            return rng.poisson(counts[:, None] * self.params[None, :])
        if self.kind == "bernoulli_product":
            return rng.binomial(counts[:, None], self.params[None, :])
        if len(self.probs) == 1:
            return counts[:, None] * self.support[0][None, :]
        tallies = rng.multinomial(counts, self.probs)
        return tallies @ self.support

    def to_dict(self) -> dict:
        if self.kind == "finite_support":
            return {"kind": self.kind,
                    "support": [[row.tolist(), float(q)] for row, q in zip(self.support, self.probs)]}
        key = "means" if self.kind == "poisson_product" else "probs"
        return {"kind": self.kind, key: self.params.tolist()}


ImmigrationLaw = OffspringLaw


@dataclass(frozen=True, eq=False)
class BranchingModel:
    """A p-type branching process with immigration and its exact moments.

    ``m_xi[l, i]`` is the mean number of type-l children of a type-i parent
    (column i is the mean offspring vector of type i). ``V_xi[i]`` is the
    offspring covariance of type i.
    """

    p: int
    offspring: tuple[OffspringLaw, ...]
    immigration: OffspringLaw
    m_xi: np.ndarray
    V_xi: np.ndarray
    m_eps: np.ndarray
    V_eps: np.ndarray
    rho: float
    irreducible: bool
    critical: bool
    structure: ma.CyclicStructure | None = None
    crit_tol: float = ma.CRITICAL_TOL
    name: str = field(default="model")

    @property
    def indecomposable(self) -> bool:
        return self.irreducible

    @property
    def critical_indecomposable(self) -> bool:
        return self.irreducible and self.critical

    @property
    def r(self) -> int:
        return self.structure.r if self.structure is not None else 1

    @property
    def immigration_degenerate(self) -> bool:
        return bool(np.all(self.m_eps == 0) and np.all(self.V_eps == 0))

    def to_dict(self) -> dict:
        return {"p": self.p,
                "offspring": [law.to_dict() for law in self.offspring],
                "immigration": self.immigration.to_dict()}

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def build_model(offspring, immigration: OffspringLaw, crit_tol: float = ma.CRITICAL_TOL,
                name: str = "model") -> BranchingModel:
    offspring = tuple(offspring)
    p = len(offspring)
    if p == 0:
        raise ValueError("need at least one type")
    for i, law in enumerate(offspring):
        if law.p != p:
            raise ValueError(f"offspring law of type {i} has dimension {law.p}, expected {p}")
    if immigration.p != p:
        raise ValueError(f"immigration law has dimension {immigration.p}, expected {p}")

    m_xi = np.column_stack([law.mean() for law in offspring])
    V_xi = np.stack([law.cov() for law in offspring])
    m_eps = immigration.mean()
    V_eps = immigration.cov()

    irreducible = ma.check_irreducible(m_xi)
    structure = None
    if irreducible:
        structure = ma.analyze(m_xi, crit_tol=crit_tol)
        rho = structure.rho
    else:
        rho = float(np.max(np.abs(np.linalg.eigvals(m_xi))))
    return BranchingModel(
        p=p, offspring=offspring, immigration=immigration,
        m_xi=m_xi, V_xi=V_xi, m_eps=m_eps, V_eps=V_eps,
        rho=rho, irreducible=irreducible, critical=abs(rho - 1.0) <= crit_tol,
        structure=structure, crit_tol=crit_tol, name=name,
    )


def mixture(alpha, V) -> np.ndarray:
    """Mixture ``sum_j alpha_j V_j`` of a stack of matrices."""
    alpha = np.asarray(alpha, dtype=float)
    V = np.asarray(V, dtype=float)
    if alpha.ndim != 1 or V.ndim != 3 or V.shape[0] != alpha.size:
        raise ValueError("dimension mismatch")
    return np.tensordot(alpha, V, axes=1)


def cov_pattern_violation(model: BranchingModel, structure: ma.CyclicStructure) -> float:
    """Largest |entry| of any V_xi[j] outside the block of the class preceding j's class."""
    cls = structure.class_of()
    worst = 0.0
    for j in range(model.p):
        target = (cls[j] - 1) % structure.r
        inside = cls == target
        mask = ~np.outer(inside, inside)
        if mask.any():
            worst = max(worst, float(np.max(np.abs(model.V_xi[j][mask]))))
    return worst


def validate_critical_indecomposable(model: BranchingModel, tol: float | None = None,
                                     structure: ma.CyclicStructure | None = None) -> dict:
    """Diagnostic report with pass/fail flags.

    ``structure`` overrides the model's own cyclic structure as the reference
    for the zero-pattern checks.
    """
    tol = model.crit_tol if tol is None else tol
    ref = structure if structure is not None else model.structure
    report = {
        "irreducible": model.irreducible,
        "rho": model.rho,
        "criticality_gap": abs(model.rho - 1.0),
        "critical": abs(model.rho - 1.0) <= tol,
        "r": ref.r if ref is not None else None,
        "immigration_degenerate": model.immigration_degenerate,
        "fourth_moments_finite": {
            "offspring": [law.fourth_moment_finite() for law in model.offspring],
            "immigration": model.immigration.fourth_moment_finite(),
        },
    }
    if ref is not None:
        report["mean_pattern_violation"] = ma.partition_violation(model.m_xi, ref)
        report["cov_pattern_violation"] = cov_pattern_violation(model, ref)
    else:
        report["mean_pattern_violation"] = None
        report["cov_pattern_violation"] = None
    report["cov_pattern_pass"] = report["cov_pattern_violation"] == 0.0
    report["moments_pass"] = all(report["fourth_moments_finite"]["offspring"]) and \
        report["fourth_moments_finite"]["immigration"]
    report["passes"] = bool(report["irreducible"] and report["critical"]
                            and report["cov_pattern_pass"]
                            and report["mean_pattern_violation"] == 0.0
                            and report["moments_pass"])
    return report


# -- model specification files ---------------------------------------------------------


def _law_from_spec(spec, p: int, where: str) -> OffspringLaw:
    if not isinstance(spec, dict):
        raise ModelSpecError(f"{where}: expected an object")
    kind = spec.get("kind")
    if kind not in KINDS:
        raise ModelSpecError(f"{where}.kind: expected one of {', '.join(KINDS)}, got {kind!r}")

    def _vector(key):
        vals = spec.get(key)
        if not isinstance(vals, list) or len(vals) != p or \
                not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in vals):
            raise ModelSpecError(f"{where}.{key}: expected a list of {p} numbers")
        return vals

    try:
        if kind == "poisson_product":
            return OffspringLaw.poisson(_vector("means"))
        if kind == "bernoulli_product":
            return OffspringLaw.bernoulli(_vector("probs"))
        atoms = spec.get("support")
        if not isinstance(atoms, list) or not atoms:
            raise ModelSpecError(f"{where}.support: expected a list of [counts, prob] pairs")
        pairs = []
        for k, atom in enumerate(atoms):
            if not (isinstance(atom, list) and len(atom) == 2 and isinstance(atom[0], list)
                    and len(atom[0]) == p
                    and all(isinstance(c, int) and not isinstance(c, bool) for c in atom[0])
                    and isinstance(atom[1], (int, float))):
                raise ModelSpecError(
                    f"{where}.support[{k}]: expected [[{p} nonnegative integers], probability]")
            pairs.append((atom[0], atom[1]))
        return OffspringLaw.finite_support(pairs)
    except ModelSpecError:
        raise
    except ValueError as exc:
        raise ModelSpecError(f"{where}: {exc}") from exc


def model_from_spec(spec: dict, name: str = "model", crit_tol: float = ma.CRITICAL_TOL) -> BranchingModel:
    if not isinstance(spec, dict):
        raise ModelSpecError("model: expected an object with p, offspring, immigration")
    p = spec.get("p")
    if not isinstance(p, int) or isinstance(p, bool) or p < 1:
        raise ModelSpecError("p: expected a positive integer")
    off = spec.get("offspring")
    if not isinstance(off, list) or len(off) != p:
        raise ModelSpecError(f"offspring: expected a list of {p} laws")
    if "immigration" not in spec:
        raise ModelSpecError("immigration: missing")
    laws = [_law_from_spec(s, p, f"offspring[{i}]") for i, s in enumerate(off)]
    imm = _law_from_spec(spec["immigration"], p, "immigration")
    return build_model(laws, imm, crit_tol=crit_tol, name=spec.get("name", name))


def load_model(path, crit_tol: float = ma.CRITICAL_TOL) -> BranchingModel:
    """Load a JSON or TOML model specification file."""
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        try:
            spec = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ModelSpecError(f"{path.name}: {exc}") from exc
    else:
        try:
            spec = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ModelSpecError(f"{path.name}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return model_from_spec(spec, name=path.stem, crit_tol=crit_tol)
