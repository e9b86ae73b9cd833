"""Optional PNG figures written next to the CSV/JSON outputs (headless backend)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_mean_matrix(model, path) -> Path:
    """Heat map of m_xi in cyclic-class order with class boundaries."""
    s = model.structure
    order = list(s.permutation) if s is not None else list(range(model.p))
    A = model.m_xi[np.ix_(order, order)]
    fig, ax = plt.subplots(figsize=(4, 3.5))
    im = ax.imshow(A, cmap="viridis")
    fig.colorbar(im, ax=ax)
    ax.set_xticks(range(model.p), [str(j) for j in order])
    ax.set_yticks(range(model.p), [str(j) for j in order])
    if s is not None:
        edge = np.cumsum([len(c) for c in s.classes])[:-1] - 0.5
        for e in edge:
            ax.axhline(e, color="w", lw=1)
            ax.axvline(e, color="w", lw=1)
    ax.set_title(f"mean matrix (r = {model.r})")
    return _save(fig, path)


def plot_moments(steps, emp_mean, oracle_mean, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for j in range(oracle_mean.shape[1]):
        ax.plot(steps, oracle_mean[:, j], lw=1.5, label=f"E X[{j}]")
        ax.plot(steps, emp_mean[:, j], ".", ms=3, color=ax.lines[-1].get_color())
    ax.set_xlabel("k")
    ax.set_ylabel("mean")
    ax.legend(fontsize=7)
    return _save(fig, path)


def plot_paths(grid, values, path, labels=None, max_paths: int = 20) -> Path:
    """Sample paths; ``values`` shape (reps, G+1, dim)."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for j in range(values.shape[2]):
        lab = labels[j] if labels else f"c{j}"
        for q in range(min(max_paths, values.shape[0])):
            ax.step(grid, values[q, :, j], where="post", lw=0.6, alpha=0.6,
                    color=f"C{j}", label=lab if q == 0 else None)
    ax.set_xlabel("t")
    ax.legend(fontsize=7)
    return _save(fig, path)


def plot_ecdf(samples, cdf, path, title="") -> Path:
    x = np.sort(np.asarray(samples))
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    ax.step(x, np.arange(1, x.size + 1) / x.size, where="post", label="empirical")
    grid = np.linspace(0, x.max() if x.size else 1, 200)
    ax.plot(grid, cdf(grid), "k--", lw=1, label="limit law")
    ax.set_title(title)
    ax.legend(fontsize=7)
    return _save(fig, path)


def plot_trend(ns, series: dict, path) -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    for name, vals in series.items():
        v = np.asarray(vals, dtype=float)
        if np.all(v > 0):
            ax.loglog(ns, v, "o-", label=name)
        else:
            ax.semilogx(ns, v, "o-", label=name)
    ax.set_xlabel("n")
    ax.legend(fontsize=7)
    return _save(fig, path)
