"""A fixed collection of critical indecomposable models used by tests and examples.

Each entry is a plain model-specification dict (the same schema as model
files), so the suite doubles as documentation of that schema.
"""
from __future__ import annotations

import numpy as np

from .model import BranchingModel, model_from_spec


def _poisson(*means):
    return {"kind": "poisson_product", "means": list(means)}


def _bernoulli(*probs):
    return {"kind": "bernoulli_product", "probs": list(probs)}


def _finite(*atoms):
    return {"kind": "finite_support", "support": [[list(v), q] for v, q in atoms]}


def _random_primitive_poisson() -> dict:
    # fixed positive pattern rescaled to spectral radius one
    A = np.array([[0.2, 0.6, 0.3],
                  [0.4, 0.0, 0.3],
                  [0.2, 0.4, 0.2]])
    A = A / np.max(np.abs(np.linalg.eigvals(A)))
    return {"p": 3,
            "offspring": [_poisson(*A[:, j].tolist()) for j in range(3)],
            "immigration": _poisson(0.5, 0.2, 0.8)}


SPECS: dict[str, dict] = {
    "single_poisson": {
        "p": 1, "offspring": [_poisson(1.0)], "immigration": _poisson(1.0)},
    "single_binary": {
        "p": 1, "offspring": [_finite(([0], 0.5), ([2], 0.5))], "immigration": _bernoulli(0.5)},
    "deterministic": {
        "p": 1, "offspring": [_finite(([1], 1.0))], "immigration": _finite(([1], 1.0))},
    "two_cycle_poisson": {
        "p": 2, "offspring": [_poisson(0.0, 1.0), _poisson(1.0, 0.0)],
        "immigration": _poisson(1.0, 1.0)},
    "two_cycle_skewed": {
        "p": 2, "offspring": [_bernoulli(0.0, 0.5), _poisson(2.0, 0.0)],
        "immigration": _poisson(0.5, 1.0)},
    "primitive_two_type": {
        "p": 2,
        "offspring": [_finite(([1, 0], 0.25), ([0, 1], 0.25), ([1, 1], 0.25), ([0, 0], 0.25)),
                      _finite(([2, 0], 0.5), ([0, 0], 0.5))],
        "immigration": _poisson(1.0, 0.5)},
    "primitive_three_type": _random_primitive_poisson(),
    "three_cycle": {
        "p": 3,
        "offspring": [_poisson(0.0, 1.0, 0.0),
                      _finite(([0, 0, 0], 0.5), ([0, 0, 2], 0.5)),
                      _poisson(1.0, 0.0, 0.0)],
        "immigration": _poisson(1.0, 0.0, 0.5)},
    "four_type_two_cycle": {
        "p": 4,
        "offspring": [_finite(([0, 0, 1, 0], 0.3), ([0, 0, 0, 1], 0.3), ([0, 0, 1, 1], 0.2),
                              ([0, 0, 0, 0], 0.2)),
                      _poisson(0.0, 0.0, 0.3, 0.7),
                      _poisson(0.6, 0.4, 0.0, 0.0),
                      _finite(([2, 0, 0, 0], 0.25), ([0, 1, 0, 0], 0.5), ([0, 0, 0, 0], 0.25))],
        "immigration": _poisson(1.0, 0.0, 0.5, 0.0)},
    "four_type_three_cycle": {
        "p": 4,
        "offspring": [_poisson(0.0, 0.0, 0.0, 1.0),
                      _poisson(1.0, 0.0, 0.0, 0.0),
                      _finite(([0, 0, 0, 0], 0.5), ([2, 0, 0, 0], 0.5)),
                      _finite(([0, 1, 1, 0], 0.25), ([0, 1, 0, 0], 0.25), ([0, 0, 1, 0], 0.25),
                              ([0, 0, 0, 0], 0.25))],
        "immigration": _bernoulli(0.5, 0.5, 0.0, 0.5)},
}


def suite_models(names=None) -> dict[str, BranchingModel]:
    names = list(SPECS) if names is None else list(names)
    return {name: model_from_spec(SPECS[name], name=name) for name in names}


def get_model(name: str) -> BranchingModel:
    return model_from_spec(SPECS[name], name=name)
