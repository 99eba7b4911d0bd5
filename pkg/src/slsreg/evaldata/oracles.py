"""Reference highest-density regions computed from the true conditional densities."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import stats

from ..frontiers import unit_ball_volume
from .tasks import (
    HeteroExp2dTask,
    HeteroGaussian2dTask,
    MadTask,
    StarTask,
    SyntheticTask,
    chi2_quantile,
    task_rng,
)


@dataclass
class OracleRegion:
    volume: float
    contains: Callable[[np.ndarray], np.ndarray]
    intervals: list[tuple[float, float]] = field(default_factory=list)
    method: str = "closed_form"


def density_threshold(density: np.ndarray, cell: float, tau: float) -> float:
    """Largest level ``t`` with grid mass of ``{p >= t}`` at least ``tau``."""
    p = np.sort(density.ravel())[::-1]
    mass = np.cumsum(p) * cell
    total = mass[-1]
    k = int(np.searchsorted(mass, tau * total))
    return float(p[min(k, len(p) - 1)])


def _runs(mask: np.ndarray, grid: np.ndarray, step: float) -> list[tuple[float, float]]:
    edges = np.diff(np.concatenate([[0], mask.astype(np.int8), [0]]))
    starts, stops = np.flatnonzero(edges == 1), np.flatnonzero(edges == -1) - 1
    return [(float(grid[a] - 0.5 * step), float(grid[b] + 0.5 * step)) for a, b in zip(starts, stops)]


def hdr_1d_grid(density: Callable[[np.ndarray], np.ndarray], lo: float, hi: float, tau: float,
                n_grid: int = 200001) -> OracleRegion:
    """Shortest set (union of intervals) of mass ``tau`` for a 1D density on a fine grid."""
    grid = np.linspace(lo, hi, n_grid)
    step = grid[1] - grid[0]
    p = density(grid)
    level = density_threshold(p, step, tau)
    mask = p >= level
    intervals = _runs(mask, grid, step)
    length = float(mask.sum() * step)

    def contains(y):
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        return np.array([any(a <= v <= b for a, b in intervals) for v in y])

    return OracleRegion(length, contains, intervals, "grid")


def hdr_2d_grid(density: Callable[[np.ndarray], np.ndarray], box: np.ndarray, tau: float,
                n_grid: int = 600) -> OracleRegion:
    """Density-grid thresholding in 2D; ``box`` is ``[[lo0, hi0], [lo1, hi1]]``."""
    g0 = np.linspace(box[0, 0], box[0, 1], n_grid)
    g1 = np.linspace(box[1, 0], box[1, 1], n_grid)
    cell = (g0[1] - g0[0]) * (g1[1] - g1[0])
    mesh = np.stack(np.meshgrid(g0, g1, indexing="ij"), axis=-1).reshape(-1, 2)
    p = density(mesh)
    level = density_threshold(p, cell, tau)
    volume = float((p >= level).sum() * cell)
    return OracleRegion(volume, lambda y: density(np.atleast_2d(y)) >= level, method="grid")


def _sample_box(task: SyntheticTask, x: float, pad: float = 0.1, n: int = 20000) -> np.ndarray:
    rng = task_rng(task, 12345, "oracle_box")
    ys = task.sample_y(np.full((n, 1), x), rng)
    lo, hi = ys.min(axis=0), ys.max(axis=0)
    span = hi - lo
    return np.stack([lo - pad * span, hi + pad * span], axis=1)


def oracle_hdr(task: SyntheticTask, x: float, tau: float) -> OracleRegion:
    """Minimum-volume region of mass ``tau`` under ``Y | X = x``."""
    x = float(x)
    if isinstance(task, HeteroGaussian2dTask) and task.outlier_fraction == 0.0:
        cov = task.cov(np.float64(x))
        mu = task.mean(np.float64(x))
        prec = np.linalg.inv(cov)
        c2 = chi2_quantile(2, tau)
        vol = unit_ball_volume(2) * math.sqrt(np.linalg.det(cov)) * c2

        def contains(y):
            diff = np.atleast_2d(y) - mu
            return np.einsum("ni,ij,nj->n", diff, prec, diff) <= c2

        return OracleRegion(vol, contains)
    if isinstance(task, StarTask):
        return OracleRegion(task.hdr_volume(tau), lambda y: task.hdr_contains(x, y, tau))
    if isinstance(task, HeteroExp2dTask):
        c = float(stats.gamma.ppf(tau, 2.0))

        def contains(y):
            w, _ = task.latent(x, y)
            return np.all(w >= 0, axis=1) & (w.sum(axis=1) <= c)

        return OracleRegion(task.hdr_volume(x, tau), contains)
    if task.d == 1:
        box = _sample_box(task, x, pad=0.2)[0]
        return hdr_1d_grid(lambda y: task.density(x, y), box[0], box[1], tau)
    if task.d == 2:
        return hdr_2d_grid(lambda y: task.density(x, y), _sample_box(task, x), tau)
    raise NotImplementedError(f"no oracle for task {task.name!r}")


def gaussian_hdr_volume(cov: np.ndarray, tau: float) -> float:
    """``V_d sqrt(det cov) chi2_d(tau)^(d/2)``."""
    cov = np.atleast_2d(cov)
    d = cov.shape[0]
    return unit_ball_volume(d) * math.sqrt(np.linalg.det(cov)) * chi2_quantile(d, tau) ** (d / 2)


# ---------------------------------------------------------------------------
# median absolute deviation oracle for Y = f(X) + r(X) (E - 1)
# ---------------------------------------------------------------------------

MAD_CENTER_ANALYTIC = (math.log(2.0) - 2.0) / 2.0


def mad_center_grid_search(n_samples: int = 10**6, seed: int = 0, grid=None) -> tuple[float, float]:
    """Center ``c`` minimizing the empirical ``median |W - c|`` for ``W ~ Exp(1) - 1``.

    Returns ``(c_star, median at c_star)``.
    """
    rng = np.random.default_rng(seed)
    w = np.sort(rng.exponential(size=n_samples) - 1.0)
    if grid is None:
        coarse = np.linspace(-1.0, 0.0, 201)
        vals = np.array([np.median(np.abs(w - c)) for c in coarse])
        c0 = coarse[np.argmin(vals)]
        grid = np.linspace(c0 - 0.01, c0 + 0.01, 401)
    vals = np.array([np.median(np.abs(w - c)) for c in grid])
    k = int(np.argmin(vals))
    return float(grid[k]), float(vals[k])


def exp_shift_median_abs(c) -> np.ndarray:
    """Exact ``median |W - c|`` for ``W ~ Exp(1) - 1`` (bisection on the mass)."""
    c = np.asarray(c, dtype=np.float64)

    def cdf(u):
        return np.where(u >= -1.0, 1.0 - np.exp(-(np.maximum(u, -1.0) + 1.0)), 0.0)

    lo, hi = np.zeros_like(c), np.abs(c) + 50.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        mass = cdf(c + mid) - cdf(c - mid)
        small = mass < 0.5
        lo = np.where(small, mid, lo)
        hi = np.where(small, hi, mid)
    return 0.5 * (lo + hi)


def mad_objective(task: MadTask, center: np.ndarray, X: np.ndarray) -> float:
    """``mean_X median |Y - f(X)|`` under the true conditional, for predictions ``center``."""
    x = np.asarray(X, dtype=np.float64).reshape(len(X), -1)[:, 0]
    r = task.spread(x)
    c = (np.asarray(center, dtype=np.float64).reshape(-1) - task.trend(x)) / r
    return float(np.mean(r * exp_shift_median_abs(c)))


def mad_oracle_objective(task: MadTask, X: np.ndarray) -> float:
    x = np.asarray(X, dtype=np.float64).reshape(len(X), -1)[:, 0]
    return float(np.mean(task.spread(x)) * math.log(2.0) / 2.0)
