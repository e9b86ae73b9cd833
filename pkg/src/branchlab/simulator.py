"""Trajectories of the branching process, martingale differences and scaled paths.

Randomness comes from numpy's counter-based Philox generator.  Replicates are
grouped in fixed blocks of ``BLOCK`` lanes; block ``b`` draws from the stream
``SeedSequence(seed, spawn_key=(b,))`` and is always simulated at full width,
so results never depend on how many replicates were requested around it or on
the number of worker threads.
"""
from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import InsufficientStepsError, SimulationOverflowError
from .model import BranchingModel

BLOCK = 256
MAX_COUNT = 2 ** 62
SAMPLING_MODES = ("aggregate", "individual")


def block_rng(seed: int, block: int) -> np.random.Generator:
    """Independent stream for replicate block ``block`` under ``seed``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(block),))
    return np.random.Generator(np.random.Philox(ss))


def resolve_threads(threads: int | None = None) -> int:
    if threads is None:
        threads = int(os.environ.get("BRANCHLAB_THREADS", "1") or 1)
    return max(1, int(threads))


@dataclass(frozen=True, eq=False)
class Trajectory:
    """States X_0..X_K of one replicate (integer array of shape (K+1, p))."""

    model: BranchingModel
    seed: int
    steps: int
    states: np.ndarray

    def to_csv(self, path) -> None:
        write_states_csv(path, self.states[None], np.arange(self.steps + 1))


@dataclass(frozen=True, eq=False)
class TrajectoryBatch:
    """States of many replicates, possibly recorded at a subset of steps.

    ``states[j, s]`` is X_{record[s]} of replicate j.
    """

    model: BranchingModel
    seed: int
    steps: int
    record: np.ndarray
    states: np.ndarray

    @property
    def reps(self) -> int:
        return self.states.shape[0]

    @property
    def complete(self) -> bool:
        return len(self.record) == self.steps + 1

    def at(self, indices) -> np.ndarray:
        """States at the given step indices, shape (reps, len(indices), p).

        Negative indices read as X_0 = 0.
        """
        idx = np.asarray(indices, dtype=np.int64)
        pos = np.searchsorted(self.record, np.maximum(idx, 0))
        pos = np.minimum(pos, len(self.record) - 1)
        ok = (self.record[pos] == np.maximum(idx, 0))
        if not np.all(ok):
            missing = np.maximum(idx, 0)[~ok]
            raise InsufficientStepsError(f"insufficient steps: step {int(missing[0])} not recorded")
        out = self.states[:, pos, :].copy()
        out[:, idx < 0, :] = 0
        return out

    def trajectory(self, j: int) -> Trajectory:
        if not self.complete:
            raise ValueError("batch was recorded at a subset of steps")
        return Trajectory(self.model, self.seed, self.steps, self.states[j])


def _sample_sum_individual(law, counts: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    total = int(counts.sum())
    out = np.zeros((counts.size, law.p), dtype=np.int64)
    if total == 0:
        return out
    draws = law.sample(total, rng)
    owner = np.repeat(np.arange(counts.size), counts)
    np.add.at(out, owner, draws)
    return out


def _simulate_block(model: BranchingModel, steps: int, record: np.ndarray, rng: np.random.Generator,
                    mode: str) -> np.ndarray:
    p = model.p
    X = np.zeros((BLOCK, p), dtype=np.int64)
    out = np.zeros((BLOCK, len(record), p), dtype=np.int64)
    slot = 0
    if record[0] == 0:
        slot = 1
    for k in range(1, steps + 1):
        new = model.immigration.sample(BLOCK, rng).astype(np.int64)
        for i, law in enumerate(model.offspring):
            counts = X[:, i]
            if not counts.any():
                continue
            if mode == "aggregate":
                new += law.sample_sum(counts, rng).astype(np.int64)
            else:
                new += _sample_sum_individual(law, counts, rng)
        big = new > MAX_COUNT
        if big.any() or (new < 0).any():
            coord = int(np.argwhere(big | (new < 0))[0, 1])
            raise SimulationOverflowError(k, coord)
        X = new
        if slot < len(record) and record[slot] == k:
            out[:, slot] = X
            slot += 1
    return out


def simulate_batch(model: BranchingModel, steps: int, reps: int, seed: int,
                   record=None, threads: int | None = None,
                   mode: str = "aggregate") -> TrajectoryBatch:
    """Simulate ``reps`` independent trajectories X_0..X_steps.

    ``record`` restricts which step indices are stored (default: all).
    ``mode="aggregate"`` draws each type's total offspring in one exact
    superposition draw; ``mode="individual"`` draws every parent separately.
    """
    if steps < 0:
        raise ValueError("steps must be nonnegative")
    if reps < 1:
        raise ValueError("reps must be positive")
    if mode not in SAMPLING_MODES:
        raise ValueError(f"unknown sampling mode {mode!r}")
    if record is None:
        record = np.arange(steps + 1)
    record = np.unique(np.asarray(record, dtype=np.int64))
    if record.size == 0 or record[0] < 0 or record[-1] > steps:
        raise ValueError("recorded steps must lie in [0, steps]")
    n_blocks = -(-reps // BLOCK)

    def run(b):
        return _simulate_block(model, steps, record, block_rng(seed, b), mode)

    workers = min(resolve_threads(threads), n_blocks)
    if workers == 1:
        parts = [run(b) for b in range(n_blocks)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, range(n_blocks)))
    states = np.concatenate(parts, axis=0)[:reps]
    return TrajectoryBatch(model, int(seed), int(steps), record, states)


def simulate_trajectory(model: BranchingModel, steps: int, seed: int,
                        mode: str = "aggregate") -> Trajectory:
    """One trajectory; identical to replicate 0 of ``simulate_batch`` with the same seed."""
    return simulate_batch(model, steps, 1, seed, mode=mode).trajectory(0)


@dataclass(frozen=True, eq=False)
class MartingaleBlocks:
    """Blocks M_k, k = 1..floor(K/r), as an array (..., n_blocks, r, p).

    ``blocks[..., k-1, l-1, :]`` equals X_{rk-l+1} - m_xi X_{rk-l} - m_eps.
    """

    model: BranchingModel
    blocks: np.ndarray

    @property
    def count(self) -> int:
        return self.blocks.shape[-3]


def blocks_from_states(states: np.ndarray, model: BranchingModel) -> MartingaleBlocks:
    """Martingale blocks from complete states of shape (..., K+1, p)."""
    states = np.asarray(states)
    r = model.r
    K = states.shape[-2] - 1
    if K < r:
        raise InsufficientStepsError("trajectory too short")
    nb = K // r
    X = states[..., : nb * r + 1, :].astype(float)
    innov = X[..., 1:, :] - X[..., :-1, :] @ model.m_xi.T - model.m_eps
    # innov[j-1] corresponds to step j; block k, slot l uses step rk-l+1
    shaped = innov.reshape(innov.shape[:-2] + (nb, r, model.p))
    return MartingaleBlocks(model, shaped[..., ::-1, :].copy())


def martingale_blocks(t) -> MartingaleBlocks:
    """Martingale differences of a Trajectory or a complete TrajectoryBatch."""
    if isinstance(t, TrajectoryBatch):
        if not t.complete:
            raise ValueError("batch was recorded at a subset of steps")
    return blocks_from_states(t.states, t.model)


@dataclass(frozen=True, eq=False)
class ScaledPath:
    """Step-function path sampled on ``grid``; values shape (..., len(grid), dim)."""

    grid: np.ndarray
    values: np.ndarray
    kind: str

    def to_csv(self, path, replicate: int = 0) -> None:
        vals = self.values if self.values.ndim == 2 else self.values[replicate]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t"] + [f"c{j}" for j in range(vals.shape[1])])
            for t, row in zip(self.grid, vals):
                w.writerow([repr(float(t))] + [repr(float(x)) for x in row])


def default_grid(T: float = 1.0, G: int = 100) -> np.ndarray:
    return np.linspace(0.0, float(T), int(G) + 1)


def lattice_index(n: int, t) -> np.ndarray:
    """floor(n t), robust to rounding of grid points such as 0.29 * 100."""
    return np.floor(np.round(n * np.asarray(t, dtype=float), 9)).astype(np.int64)


def scaled_steps_needed(r: int, n: int, grid) -> np.ndarray:
    """Step indices of X read by the scaled process on ``grid``."""
    kk = lattice_index(n, grid)
    idx = (r * kk)[:, None] - np.arange(r)[None, :]
    return np.unique(np.maximum(idx, 0))


def _check_grid(grid) -> np.ndarray:
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size == 0 or grid[0] < 0 or np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be strictly increasing and nonnegative")
    return grid


def scaled_step_X(t, n: int, grid=None) -> ScaledPath:
    """X^(n) on ``grid``: (nr)^{-1} stacked (X_{r[nt]}, ..., X_{r[nt]-r+1}).

    Accepts a Trajectory (values (G+1, rp)) or a TrajectoryBatch
    (values (reps, G+1, rp)).
    """
    grid = default_grid() if grid is None else _check_grid(grid)
    model = t.model
    r, p = model.r, model.p
    kk = lattice_index(n, grid)
    idx = ((r * kk)[:, None] - np.arange(r)[None, :]).ravel()
    if r * kk[-1] > t.steps:
        raise InsufficientStepsError(
            f"insufficient steps: need {r * kk[-1]}, trajectory has {t.steps}")
    if isinstance(t, TrajectoryBatch):
        X = t.at(idx)
    else:
        X = t.states[np.maximum(idx, 0)][None].copy()
        X[:, idx < 0] = 0
    vals = X.reshape(X.shape[0], len(grid), r * p) / float(n * r)
    if not isinstance(t, TrajectoryBatch):
        vals = vals[0]
    return ScaledPath(grid, vals, "X_scaled")


def _lattice_M(M: MartingaleBlocks, n: int, K: int) -> np.ndarray:
    """M^(n) at lattice times j/n, j = 0..K, shape (..., K+1, r, p)."""
    if K > M.count:
        raise InsufficientStepsError(f"insufficient steps: need {K} blocks, have {M.count}")
    blk = M.blocks[..., :K, :, :] / float(n * M.model.r)
    zero = np.zeros(blk.shape[:-3] + (1,) + blk.shape[-2:])
    return np.concatenate([zero, np.cumsum(blk, axis=-3)], axis=-3)


def scaled_step_M(M: MartingaleBlocks, n: int, grid=None) -> ScaledPath:
    """M^(n)_t = (nr)^{-1} sum_{k <= [nt]} M_k on ``grid``."""
    grid = default_grid() if grid is None else _check_grid(grid)
    kk = lattice_index(n, grid)
    F = _lattice_M(M, n, int(kk[-1]))
    vals = F[..., kk, :, :]
    return ScaledPath(grid, vals.reshape(vals.shape[:-2] + (-1,)), "M_scaled")


def reconstruct_via_psi(M: MartingaleBlocks, model: BranchingModel, n: int, grid=None) -> ScaledPath:
    """Rebuild X^(n) from M^(n) through the explicit mapping Psi^(n).

    Block i at time t (K = [nt]) is
        m^{Kr} [sum_l m^{..} f_l(0)]
        + sum_{j=1}^{K} m^{(K-j)r} [ sum_{l>=i} m^{l-i} (df_l(j) + m_eps/(nr))
                                     + 1{j>=2} sum_{l<i} m^{l-i+r} (df_l(j-1) + m_eps/(nr)) ]
    with df_l(j) = f_l(j/n) - f_l((j-1)/n).  The ``l < i`` terms are absent at
    j = 1 because X_0 = 0 ends the chain of innovations there.
    """
    grid = default_grid() if grid is None else _check_grid(grid)
    r, p = model.r, model.p
    m = model.m_xi
    kk = lattice_index(n, grid)
    K_max = int(kk[-1])
    F = _lattice_M(M, n, K_max)
    dF = np.diff(F, axis=-3)  # (..., K_max, r, p); dF[j-1] = df(j)
    scaled_eps = model.m_eps / float(n * r)
    mp = [np.linalg.matrix_power(m, e) for e in range(2 * r)]

    batch = dF.shape[:-3]
    C = np.zeros(batch + (K_max, r, p))
    for i in range(1, r + 1):
        acc = np.zeros(batch + (K_max, p))
        for l in range(i, r + 1):
            acc += (dF[..., :, l - 1, :] + scaled_eps) @ mp[l - i].T
        for l in range(1, i):
            prev = dF[..., :-1, l - 1, :] + scaled_eps
            acc[..., 1:, :] += prev @ mp[l - i + r].T
        C[..., :, i - 1, :] = acc

    mr = mp[r]
    powers = np.empty((K_max + 1, p, p))
    powers[0] = np.eye(p)
    for q in range(1, K_max + 1):
        powers[q] = powers[q - 1] @ mr

    F0 = F[..., 0, :, :]
    init = np.zeros(batch + (r, p))
    for i in range(1, r + 1):
        s = np.zeros(batch + (p,))
        for l in range(i, r + 1):
            s += F0[..., l - 1, :] @ mp[l - i].T
        for l in range(1, i):
            s += F0[..., l - 1, :] @ mp[l - i + r].T
        init[..., i - 1, :] = s

    out = np.zeros(batch + (len(grid), r, p))
    for g, K in enumerate(kk):
        K = int(K)
        val = init @ powers[K].T
        if K > 0:
            # sum_j m^{(K-j)r} C_j: powers indexed K-1 .. 0 for j = 1 .. K
            P = powers[K - 1::-1] if K > 1 else powers[:1]
            val = val + np.einsum("jab,...jib->...ia", P, C[..., :K, :, :])
        out[..., g, :, :] = val
    return ScaledPath(grid, out.reshape(batch + (len(grid), r * p)), "X_scaled")


def psi_relative_error(reconstructed: ScaledPath, direct: ScaledPath, n: int, r: int) -> float:
    """max |diff| / max(|X^(n)|, 1/(nr)) over all grid points and replicates."""
    diff = np.abs(reconstructed.values - direct.values).max(axis=-1)
    scale = np.maximum(np.abs(direct.values).max(axis=-1), 1.0 / (n * r))
    return float((diff / scale).max()) if diff.size else 0.0


def write_states_csv(path, states: np.ndarray, steps, header_lines=()) -> None:
    """CSV with columns (rep, k, X_0..X_{p-1}); ``states`` shape (reps, S, p)."""
    states = np.asarray(states)
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rep", "k"] + [f"X{j}" for j in range(states.shape[-1])])
        for j in range(states.shape[0]):
            for k, row in zip(steps, states[j]):
                w.writerow([j, int(k)] + [int(x) for x in row])


def derive_seed(seed: int, *keys: int) -> int:
    """Deterministic 63-bit child seed of ``seed`` for the given integer keys."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
