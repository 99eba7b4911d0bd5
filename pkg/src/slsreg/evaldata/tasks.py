"""Synthetic conditional distributions with known densities.

Every task exposes ``sample_x``, ``sample_y`` and, where tractable, a
conditional ``density(x, y)``.  Tasks with fixed covariates use a single
constant feature column equal to zero.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass

import numpy as np
from scipy import special, stats


@dataclass
class Dataset:
    X: np.ndarray
    Y: np.ndarray
    outlier: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.Y)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.X[idx], self.Y[idx], None if self.outlier is None else self.outlier[idx])


class SyntheticTask:
    name: str = ""
    d: int = 1
    feature_dim: int = 1
    fixed_x: bool = False

    def sample_x(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.fixed_x:
            return np.zeros((n, 1))
        return rng.uniform(-1.0, 1.0, size=(n, 1))

    def sample_y(self, X: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return self.sample_y_flagged(X, rng)[0]

    def sample_y_flagged(self, X: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray | None]:
        raise NotImplementedError

    def density(self, x: float, y: np.ndarray) -> np.ndarray:
        """Conditional density of ``Y | X = x`` at the rows of ``y``."""
        raise NotImplementedError(f"task {self.name!r} has no tractable density")

    def params(self) -> dict:
        return {"name": self.name, "d": self.d}


def generate(task: SyntheticTask, n: int, seed: int) -> Dataset:
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = task_rng(task, seed)
    X = task.sample_x(n, rng)
    Y, flags = task.sample_y_flagged(X, rng)
    return Dataset(X, Y, flags)


def task_rng(task: SyntheticTask, seed: int, stream: str = "") -> np.random.Generator:
    key = zlib.crc32((task.name + "/" + stream).encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(key,)))


def _x(X) -> np.ndarray:
    return np.asarray(X, dtype=np.float64).reshape(len(X), -1)[:, 0]


# ---------------------------------------------------------------------------
# fixed-X two-dimensional shapes
# ---------------------------------------------------------------------------


class StarTask(SyntheticTask):
    """Radial density ``p(r, t) ∝ exp(-r / a(t))`` with ``a(t) = 0.5 + 0.3 cos 5t``.

    Each ray carries a Gamma(2, a(t)) radius, so every density level set is the
    star ``{r <= c a(t)}`` and its mass ``1 - e^{-c}(1 + c)`` is angle free.
    """

    name = "star"
    d = 2
    fixed_x = True
    base, amp, petals = 0.5, 0.3, 5

    def radius_scale(self, t):
        return self.base + self.amp * np.cos(self.petals * t)

    @property
    def norm_const(self) -> float:
        # integral over angles of a(t)^2 (Gamma(2) normalization contributes the rest)
        return 2.0 * math.pi * (self.base**2 + 0.5 * self.amp**2)

    def sample_y_flagged(self, X, rng):
        n = len(X)
        amax2 = (self.base + self.amp) ** 2
        angles = np.empty(0)
        while len(angles) < n:
            t = rng.uniform(0.0, 2.0 * math.pi, size=2 * n)
            keep = rng.uniform(0.0, amax2, size=2 * n) < self.radius_scale(t) ** 2
            angles = np.concatenate([angles, t[keep]])
        t = angles[:n]
        r = rng.gamma(2.0, self.radius_scale(t))
        return np.stack([r * np.cos(t), r * np.sin(t)], axis=1), None

    def density(self, x, y):
        y = np.atleast_2d(y)
        r = np.hypot(y[:, 0], y[:, 1])
        a = self.radius_scale(np.arctan2(y[:, 1], y[:, 0]))
        return np.exp(-r / a) / self.norm_const

    def level_constant(self, tau: float) -> float:
        """``c`` with ``P(r <= c a(t)) = tau``."""
        return float(stats.gamma.ppf(tau, 2.0))

    def hdr_volume(self, tau: float) -> float:
        c = self.level_constant(tau)
        return 0.5 * c * c * self.norm_const

    def hdr_contains(self, x, y, tau: float) -> np.ndarray:
        y = np.atleast_2d(y)
        r = np.hypot(y[:, 0], y[:, 1])
        return r <= self.level_constant(tau) * self.radius_scale(np.arctan2(y[:, 1], y[:, 0]))


class ThreeModeTask(SyntheticTask):
    """Equal-weight mixture of three isotropic Gaussians on a triangle of side 4."""

    name = "three_modes"
    d = 2
    fixed_x = True
    side, sigma = 4.0, 0.4

    @property
    def centers(self) -> np.ndarray:
        h = self.side / math.sqrt(3.0)
        ang = np.pi / 2 + 2 * np.pi * np.arange(3) / 3
        return h * np.stack([np.cos(ang), np.sin(ang)], axis=1)

    def sample_y_flagged(self, X, rng):
        n = len(X)
        comp = rng.integers(0, 3, size=n)
        return self.centers[comp] + self.sigma * rng.standard_normal((n, 2)), None

    def density(self, x, y):
        y = np.atleast_2d(y)
        d2 = ((y[:, None, :] - self.centers[None]) ** 2).sum(axis=2)
        return np.exp(-0.5 * d2 / self.sigma**2).mean(axis=1) / (2 * math.pi * self.sigma**2)


# ---------------------------------------------------------------------------
# one-dimensional covariate-dependent tasks
# ---------------------------------------------------------------------------


class Exp1dTask(SyntheticTask):
    """``Y = X + s(X) E`` with ``E ~ Exp(1)`` and ``s(X) = 0.5 + 0.25 X``."""

    name = "exp1d"
    d = 1

    def loc(self, x):
        return np.asarray(x, dtype=np.float64)

    def scale(self, x):
        return 0.5 + 0.25 * np.asarray(x, dtype=np.float64)

    def sample_y_flagged(self, X, rng):
        x = _x(X)
        return (self.loc(x) + self.scale(x) * rng.exponential(size=len(x))).reshape(-1, 1), None

    def density(self, x, y):
        z = (np.asarray(y, dtype=np.float64).reshape(-1) - self.loc(x)) / self.scale(x)
        return np.where(z >= 0, np.exp(-np.maximum(z, 0)), 0.0) / self.scale(x)

    def hdr_length(self, x, tau: float):
        return -self.scale(x) * math.log1p(-tau)


class ExpMixture1dTask(SyntheticTask):
    """Mixture ``(1 - w) E/2 + w (4 - E/2)`` with ``w(X) = (X + 1) / 4``.

    Unimodal at ``X = -1`` and increasingly bimodal as ``X`` grows.
    """

    name = "exp_mixture1d"
    d = 1
    rate, far = 2.0, 4.0

    def weight(self, x):
        return 0.25 * (np.asarray(x, dtype=np.float64) + 1.0)

    def sample_y_flagged(self, X, rng):
        x = _x(X)
        e = rng.exponential(1.0 / self.rate, size=len(x))
        second = rng.uniform(size=len(x)) < self.weight(x)
        return np.where(second, self.far - e, e).reshape(-1, 1), None

    def density(self, x, y):
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        w = self.weight(x)
        left = np.where(y >= 0, self.rate * np.exp(-self.rate * np.maximum(y, 0)), 0.0)
        right = np.where(y <= self.far, self.rate * np.exp(-self.rate * np.maximum(self.far - y, 0)), 0.0)
        return (1 - w) * left + w * right


class MadTask(SyntheticTask):
    """``Y = f(X) + r(X) W`` with ``W ~ Exp(1) - 1`` and ``r(X) = X^2 + 0.5``."""

    d = 1

    def __init__(self, jump: bool = False):
        self.jump = jump
        self.name = "mad_jump" if jump else "mad"

    def trend(self, x):
        x = np.asarray(x, dtype=np.float64)
        return np.sin(3 * x) + (4.0 * (x > 0.5) if self.jump else 0.0)

    def spread(self, x):
        return np.asarray(x, dtype=np.float64) ** 2 + 0.5

    def sample_y_flagged(self, X, rng):
        x = _x(X)
        w = rng.exponential(size=len(x)) - 1.0
        return (self.trend(x) + self.spread(x) * w).reshape(-1, 1), None

    def density(self, x, y):
        z = (np.asarray(y, dtype=np.float64).reshape(-1) - self.trend(x)) / self.spread(x) + 1.0
        return np.where(z >= 0, np.exp(-np.maximum(z, 0)), 0.0) / self.spread(x)

    def params(self):
        return {"name": self.name, "d": 1, "jump": self.jump}


# ---------------------------------------------------------------------------
# two-dimensional covariate-dependent tasks
# ---------------------------------------------------------------------------


class HeteroGaussian2dTask(SyntheticTask):
    """Heteroscedastic bivariate Gaussian, optionally mixed with uniform outliers on [-4, 4]^2."""

    d = 2
    box = 4.0

    def __init__(self, outlier_fraction: float = 0.0):
        self.outlier_fraction = float(outlier_fraction)
        self.name = "gauss2d_outliers" if outlier_fraction > 0 else "gauss2d"

    def mean(self, x):
        x = np.asarray(x, dtype=np.float64)
        return np.stack([x, 0.5 * x**2], axis=-1)

    def cov(self, x):
        x = np.asarray(x, dtype=np.float64)
        s1, s2, rho = 0.5 + 0.25 * x, 0.5 - 0.2 * x, 0.5 * x
        c = np.empty(x.shape + (2, 2))
        c[..., 0, 0] = s1 * s1
        c[..., 1, 1] = s2 * s2
        c[..., 0, 1] = c[..., 1, 0] = rho * s1 * s2
        return c

    def sample_y_flagged(self, X, rng):
        x = _x(X)
        chol = np.linalg.cholesky(self.cov(x))
        y = self.mean(x) + np.einsum("nij,nj->ni", chol, rng.standard_normal((len(x), 2)))
        flags = rng.uniform(size=len(x)) < self.outlier_fraction
        y[flags] = rng.uniform(-self.box, self.box, size=(int(flags.sum()), 2))
        return y, flags

    def gaussian_density(self, x, y):
        y = np.atleast_2d(y)
        c = self.cov(np.float64(x))
        diff = y - self.mean(np.float64(x))
        m = np.einsum("ni,ij,nj->n", diff, np.linalg.inv(c), diff)
        return np.exp(-0.5 * m) / (2 * math.pi * math.sqrt(np.linalg.det(c)))

    def density(self, x, y):
        y = np.atleast_2d(y)
        inside = np.all(np.abs(y) <= self.box, axis=1) / (2 * self.box) ** 2
        return (1 - self.outlier_fraction) * self.gaussian_density(x, y) + self.outlier_fraction * inside

    def params(self):
        return {"name": self.name, "d": 2, "outlier_fraction": self.outlier_fraction}


class HeteroExp2dTask(SyntheticTask):
    """``Y = m(X) + A(X) W`` with independent ``W_i ~ Exp(1)`` and ``A = R(pi X / 4) diag(s1, s2)``.

    The density of ``W`` is ``exp(-w1 - w2)`` on the positive quadrant, so the
    HDR is the triangle ``{W >= 0, W1 + W2 <= c}`` with ``Gamma(2)`` mass.
    """

    name = "exp2d"
    d = 2

    def loc(self, x):
        x = np.asarray(x, dtype=np.float64)
        return np.stack([x, -0.5 * x], axis=-1)

    def mixing(self, x):
        x = np.asarray(x, dtype=np.float64)
        a = np.pi * x / 4
        s1, s2 = 0.4 + 0.2 * x, 0.5 - 0.2 * x
        c, s = np.cos(a), np.sin(a)
        A = np.empty(x.shape + (2, 2))
        A[..., 0, 0], A[..., 0, 1] = c * s1, -s * s2
        A[..., 1, 0], A[..., 1, 1] = s * s1, c * s2
        return A

    def sample_y_flagged(self, X, rng):
        x = _x(X)
        w = rng.exponential(size=(len(x), 2))
        return self.loc(x) + np.einsum("nij,nj->ni", self.mixing(x), w), None

    def latent(self, x, y):
        y = np.atleast_2d(y)
        A = self.mixing(np.float64(x))
        return np.linalg.solve(A, (y - self.loc(np.float64(x))).T).T, abs(np.linalg.det(A))

    def density(self, x, y):
        w, det = self.latent(x, y)
        return np.where(np.all(w >= 0, axis=1), np.exp(-w.sum(axis=1)), 0.0) / det

    def hdr_volume(self, x, tau: float) -> float:
        c = float(stats.gamma.ppf(tau, 2.0))
        return 0.5 * c * c * abs(np.linalg.det(self.mixing(np.float64(x))))


TASKS = {
    "star": StarTask,
    "three_modes": ThreeModeTask,
    "exp1d": Exp1dTask,
    "exp_mixture1d": ExpMixture1dTask,
    "exp2d": HeteroExp2dTask,
    "gauss2d": lambda: HeteroGaussian2dTask(0.0),
    "gauss2d_outliers": lambda: HeteroGaussian2dTask(0.1),
    "mad": lambda: MadTask(False),
    "mad_jump": lambda: MadTask(True),
}


def get_task(name: str) -> SyntheticTask:
    try:
        return TASKS[name]()
    except KeyError:
        raise ValueError(f"unknown task {name!r}; choose from {sorted(TASKS)}") from None


def chi2_quantile(d: int, tau: float) -> float:
    return float(special.gammaincinv(0.5 * d, tau) * 2.0)
