"""Frontier functions ``G(X, y)`` and the closed-form volumes of their sub-level sets.

Three families are provided:

* :class:`NormFrontier` -- ``|y - f(X)|``, giving balls (intervals when d = 1);
* :class:`FlowMahalanobis` -- ``||L(X)(T(y; X) - mu(X))||^2`` with a volume
  preserving additive-coupling flow ``T``;
* :class:`UnionOfFlows` -- a softmin over K flow-Mahalanobis components whose
  latent distances are rescaled by mixture weights ``p_k(X)^(-2/d)``.

All models consume features that have already been standardized by the caller.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import autodiff as ad
from .numerics.autodiff import ShapeError, Tensor
from .numerics.nn import Mlp, MlpConfig

FAMILIES = ("norm", "flow", "union")
SHAPE_MODES = ("auto", "full", "lowrank")
# softplus(0 + _SOFTPLUS_ONE) == 1, so fresh diagonals start at one
_SOFTPLUS_ONE = math.log(math.e - 1.0)


@dataclass
class FrontierConfig:
    family: str = "flow"
    response_dim: int = 2
    feature_dim: int = 1
    hidden_dims: list[int] = field(default_factory=lambda: [64, 64])
    flow_layers: int = 3
    flow_hidden_dims: list[int] = field(default_factory=lambda: [64, 64])
    identity_flow: bool = False
    shape_mode: str = "auto"
    unit_det: bool = True
    n_components: int = 4
    use_layer_norm: bool = True
    dropout_rate: float = 0.1

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown frontier family {self.family!r}; expected one of {FAMILIES}")
        if self.shape_mode not in SHAPE_MODES:
            raise ValueError(f"unknown shape_mode {self.shape_mode!r}")
        if self.response_dim < 1 or self.feature_dim < 1:
            raise ValueError("response_dim and feature_dim must be >= 1")
        if self.family == "union" and self.n_components < 1:
            raise ValueError("n_components must be >= 1")
        self.hidden_dims = [int(h) for h in self.hidden_dims]
        self.flow_hidden_dims = [int(h) for h in self.flow_hidden_dims]

    @property
    def resolved_shape_mode(self) -> str:
        if self.shape_mode != "auto":
            return self.shape_mode
        return "full" if self.response_dim < 5 else "lowrank"


# ---------------------------------------------------------------------------
# closed-form helpers
# ---------------------------------------------------------------------------


def log_unit_ball_volume(d: int) -> float:
    return 0.5 * d * math.log(math.pi) - math.lgamma(0.5 * d + 1.0)


def unit_ball_volume(d: int) -> float:
    """Lebesgue volume of the Euclidean unit ball in R^d."""
    return math.exp(log_unit_ball_volume(d))


def softmin_aggregate(scores, beta: float) -> tuple[np.ndarray, np.ndarray]:
    """Softmax(-beta * scores) weights and the weighted average over the last axis.

    ``beta = inf`` returns the hard minimum with all weight on the first argmin.
    """
    s = np.asarray(scores, dtype=np.float64)
    if not beta > 0:
        raise ValueError("beta must be positive")
    if np.isinf(beta):
        w = np.zeros_like(s)
        np.put_along_axis(w, np.argmin(s, axis=-1)[..., None], 1.0, axis=-1)
        return w, s.min(axis=-1)
    z = -beta * (s - s.min(axis=-1, keepdims=True))
    w = np.exp(z)
    w /= w.sum(axis=-1, keepdims=True)
    return w, (w * s).sum(axis=-1)


def softmin_tape(scores: Tensor, beta: float) -> Tensor:
    """Differentiable softmin aggregate of ``scores`` with shape (n, K)."""
    w = ad.softmax(scores * (-beta), axis=-1)
    return (w * scores).sum(axis=-1)


def low_rank_det(D, V) -> float | np.ndarray:
    """``sqrt(det(diag(D) + V V^T))`` via the matrix determinant lemma.

    ``D`` has shape (..., d) and ``V`` shape (..., d, r).
    """
    D = np.asarray(D, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    if np.any(D <= 0):
        raise ValueError("diagonal entries of D must be strictly positive")
    r = V.shape[-1]
    inner = np.eye(r) + np.einsum("...ia,...ib->...ab", V / D[..., None], V)
    sign, logdet_inner = np.linalg.slogdet(inner)
    return np.exp(0.5 * (np.log(D).sum(axis=-1) + logdet_inner))


def lower_factor_of_precision(P: np.ndarray) -> np.ndarray:
    """Lower-triangular ``L`` with positive diagonal and ``L^T L = P``."""
    J = np.eye(P.shape[0])[::-1]
    C = np.linalg.cholesky(J @ P @ J)
    return J @ C.T @ J


# ---------------------------------------------------------------------------
# volume-preserving coupling flow
# ---------------------------------------------------------------------------


class CouplingLayer:
    """Additive coupling ``z_s = y_s + F(y_k, X) - F(0, X)``, ``z_k = y_k``."""

    def __init__(self, d: int, feature_dim: int, parity: int, hidden_dims, rng,
                 use_layer_norm: bool = True, dropout_rate: float = 0.0):
        if d < 2:
            raise ValueError("coupling layers need d >= 2")
        idx = np.arange(d)
        half = (d + 1) // 2
        if parity % 2 == 0:
            self.kept, self.shifted = idx[:half], idx[half:]
        else:
            self.kept, self.shifted = idx[half:], idx[:half]
        self.inverse_perm = np.argsort(np.concatenate([self.kept, self.shifted]))
        self.shift_net = Mlp(MlpConfig(len(self.kept) + feature_dim, list(hidden_dims), len(self.shifted),
                                       use_layer_norm=use_layer_norm, dropout_rate=dropout_rate,
                                       zero_init_last_layer=True), rng)

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        return self.shift_net.named_parameters(prefix + "shift.")

    def _shift(self, y_kept: Tensor, X: Tensor, train: bool, rng) -> Tensor:
        zeros = np.zeros(y_kept.shape)
        f = self.shift_net(ad.concatenate([y_kept, X], axis=1), train, rng)
        f0 = self.shift_net(ad.concatenate([zeros, X], axis=1), train, rng)
        return f - f0

    def forward(self, Y: Tensor, X: Tensor, train: bool = False, rng=None) -> Tensor:
        y_kept = Y[:, self.kept]
        z_shifted = Y[:, self.shifted] + self._shift(y_kept, X, train, rng)
        return ad.concatenate([y_kept, z_shifted], axis=1)[:, self.inverse_perm]

    def inverse(self, Z: np.ndarray, X: np.ndarray) -> np.ndarray:
        z_kept = Z[:, self.kept]
        y = np.array(Z, dtype=np.float64, copy=True)
        y[:, self.shifted] = Z[:, self.shifted] - self._shift(ad.tensor(z_kept), ad.tensor(X), False, None).value
        return y


def flow_forward(layers: list[CouplingLayer], Y, X, train: bool = False, rng=None) -> Tensor:
    z = ad.tensor(Y)
    X = ad.tensor(X)
    for layer in layers:
        z = layer.forward(z, X, train, rng)
    return z


def flow_inverse(layers: list[CouplingLayer], Z, X) -> np.ndarray:
    y = np.asarray(Z, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    for layer in reversed(layers):
        y = layer.inverse(y, X)
    return y


# ---------------------------------------------------------------------------
# shape matrices
# ---------------------------------------------------------------------------


def shape_raw_dim(d: int, mode: str) -> int:
    if mode == "full":
        return d * (d + 1) // 2
    return d + d * math.ceil(math.sqrt(d))


class ShapeMatrix:
    """Per-sample precision factor built from raw network outputs.

    ``full``: lower-triangular ``L`` with softplus diagonal.  ``lowrank``:
    precision ``L^T L = D + V V^T`` with ``D`` softplus-positive and ``V`` of
    rank ``ceil(sqrt(d))``.  With ``unit_det`` the factor is rescaled so that
    ``det(L) = 1``.
    """

    def __init__(self, raw: Tensor, d: int, mode: str, unit_det: bool):
        self.d, self.mode, self.unit_det = d, mode, unit_det
        n = raw.shape[0]
        if raw.shape[1] != shape_raw_dim(d, mode):
            raise ShapeError(f"shape net produced {raw.shape[1]} entries, expected {shape_raw_dim(d, mode)}")
        if mode == "full":
            rows, cols = np.tril_indices(d)
            diag_mask = rows == cols
            self.entries = ad.where(diag_mask, ad.softplus(raw + _SOFTPLUS_ONE), raw)
            diag = self.entries[:, np.flatnonzero(diag_mask)]
            log_det_raw = ad.log(diag).sum(axis=1)
            gather = np.full(d * d, len(rows))
            gather[rows * d + cols] = np.arange(len(rows))
            padded = ad.concatenate([self.entries, np.zeros((n, 1))], axis=1)
            self.dense = padded[:, gather].reshape(n, d, d)
        else:
            r = math.ceil(math.sqrt(d))
            self.diag = ad.softplus(raw[:, :d] + _SOFTPLUS_ONE)
            self.factor = raw[:, d:].reshape(n, d, r)
            scaled = self.factor / self.diag.reshape(n, d, 1)
            inner = (self.factor.reshape(n, d, r, 1) * scaled.reshape(n, d, 1, r)).sum(axis=1) + np.eye(r)
            # det(L) = sqrt(det(D + V V^T)) by the determinant lemma
            log_det_raw = (ad.log(self.diag).sum(axis=1) + ad.logdet(inner)) * 0.5
        self._log_det_raw = log_det_raw
        if unit_det:
            self.log_scale = log_det_raw * (-1.0 / d)
            self.log_det = log_det_raw + self.log_scale * d
        else:
            self.log_scale = None
            self.log_det = log_det_raw

    def quadratic(self, v: Tensor) -> Tensor:
        """``||L v||^2`` per row for ``v`` of shape (n, d)."""
        n, d = v.shape
        if self.mode == "full":
            u = (self.dense * v.reshape(n, 1, d)).sum(axis=2)
            q = (u * u).sum(axis=1)
        else:
            proj = (self.factor * v.reshape(n, d, 1)).sum(axis=1)
            q = (self.diag * v * v).sum(axis=1) + (proj * proj).sum(axis=1)
        if self.log_scale is not None:
            q = q * ad.exp(self.log_scale * 2.0)
        return q

    def dense_factor(self) -> np.ndarray:
        """Dense ``L`` (full mode) or the symmetric square root of the precision (low-rank)."""
        if self.mode == "full":
            L = self.dense.value.copy()
        else:
            P = np.einsum("ni,ij->nij", self.diag.value, np.eye(self.d))
            P = P + np.einsum("nia,nja->nij", self.factor.value, self.factor.value)
            w, U = np.linalg.eigh(P)
            L = np.einsum("nij,nj,nkj->nik", U, np.sqrt(w), U)
        if self.log_scale is not None:
            L = L * np.exp(self.log_scale.value)[:, None, None]
        return L


# ---------------------------------------------------------------------------
# frontier families
# ---------------------------------------------------------------------------


@dataclass
class FrontierOutput:
    score: Tensor
    log_det: Tensor | None = None
    log_weights: Tensor | None = None
    component_log_dets: Tensor | None = None
    component_scores: Tensor | None = None


class NormFrontier:
    """``G(X, y) = ||y - f(X)||_2`` (``|y - f(X)|`` when d = 1)."""

    family = "norm"

    def __init__(self, config: FrontierConfig, rng: np.random.Generator):
        self.config = config
        self.d = config.response_dim
        self.center_net = Mlp(MlpConfig(config.feature_dim, config.hidden_dims, self.d,
                                        use_layer_norm=config.use_layer_norm,
                                        dropout_rate=config.dropout_rate, zero_init_last_layer=True), rng)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return self.center_net.named_parameters("center.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def init_from_data(self, X: np.ndarray, Y: np.ndarray, rng: np.random.Generator) -> None:
        self.center_net.biases[-1].value = np.median(Y, axis=0).astype(np.float64)

    def center(self, X, train: bool = False, rng=None) -> Tensor:
        return self.center_net(X, train, rng)

    def forward(self, X, Y, train: bool = False, rng=None) -> FrontierOutput:
        resid = ad.tensor(Y) - self.center(X, train, rng)
        if self.d == 1:
            score = ad.abs_(resid).reshape(-1)
        else:
            score = ad.sqrt(ad.maximum((resid * resid).sum(axis=1), 1e-300))
        return FrontierOutput(score)

    def volume_terms(self, X, train: bool = False, rng=None) -> FrontierOutput:
        n = ad.tensor(X).shape[0]
        return FrontierOutput(Tensor(np.zeros(n)))

    def volume_from(self, t, terms: FrontierOutput, log: bool = False) -> Tensor:
        t = ad.tensor(t)
        if log:
            return ad.log(t) * float(self.d) + log_unit_ball_volume(self.d)
        if self.d == 1:
            return t * 2.0
        return (t ** self.d) * unit_ball_volume(self.d)


class FlowMahalanobis:
    """``G(X, y) = ||L(X) (T(y; X) - mu(X))||^2`` with a volume-preserving flow ``T``."""

    family = "flow"

    def __init__(self, config: FrontierConfig, rng: np.random.Generator, force_unit_det: bool = False):
        self.config = config
        d, p = config.response_dim, config.feature_dim
        self.d = d
        self.unit_det = config.unit_det or force_unit_det
        self.mode = config.resolved_shape_mode
        self.identity_flow = config.identity_flow or d == 1
        self.layers: list[CouplingLayer] = []
        if not self.identity_flow:
            self.layers = [CouplingLayer(d, p, i, config.flow_hidden_dims, rng, config.use_layer_norm,
                                         config.dropout_rate) for i in range(config.flow_layers)]
        mlp = dict(use_layer_norm=config.use_layer_norm, dropout_rate=config.dropout_rate,
                   zero_init_last_layer=True)
        self.center_net = Mlp(MlpConfig(p, config.hidden_dims, d, **mlp), rng)
        self.shape_net = Mlp(MlpConfig(p, config.hidden_dims, shape_raw_dim(d, self.mode), **mlp), rng)
        if self.mode == "lowrank":
            # V = 0 is a stationary point of the quadratic form, so start off it
            self.shape_net.biases[-1].value[d:] = 0.1 * rng.standard_normal(shape_raw_dim(d, self.mode) - d)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, layer in enumerate(self.layers):
            out += layer.named_parameters(f"flow{i}.")
        out += self.center_net.named_parameters("center.")
        out += self.shape_net.named_parameters("shape.")
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def init_from_data(self, X: np.ndarray, Y: np.ndarray, rng: np.random.Generator,
                       center: np.ndarray | None = None, cov: np.ndarray | None = None) -> None:
        """Center at the data mean and, in full mode, align ``L`` with the inverse covariance."""
        self.center_net.biases[-1].value = np.asarray(Y.mean(axis=0) if center is None else center, dtype=np.float64)
        if self.mode != "full" or len(Y) < 2 * self.d:
            return
        if cov is None:
            cov = np.atleast_2d(np.cov(Y, rowvar=False))
        cov = cov + 1e-6 * np.trace(cov) / self.d * np.eye(self.d)
        L = lower_factor_of_precision(np.linalg.inv(cov))
        L = L / np.exp(np.log(np.diag(L)).mean())
        rows, cols = np.tril_indices(self.d)
        raw = L[rows, cols].copy()
        diag = rows == cols
        raw[diag] = np.log(np.expm1(L[rows, cols][diag])) - _SOFTPLUS_ONE
        self.shape_net.biases[-1].value = raw

    def transform(self, Y, X, train: bool = False, rng=None) -> Tensor:
        return flow_forward(self.layers, Y, X, train, rng)

    def inverse(self, Z, X) -> np.ndarray:
        return flow_inverse(self.layers, Z, X)

    def shape(self, X, train: bool = False, rng=None) -> ShapeMatrix:
        return ShapeMatrix(self.shape_net(X, train, rng), self.d, self.mode, self.unit_det)

    def forward(self, X, Y, train: bool = False, rng=None) -> FrontierOutput:
        X = ad.tensor(X)
        z = self.transform(Y, X, train, rng)
        shape = self.shape(X, train, rng)
        score = shape.quadratic(z - self.center_net(X, train, rng))
        return FrontierOutput(score, log_det=shape.log_det)

    def volume_terms(self, X, train: bool = False, rng=None) -> FrontierOutput:
        shape = self.shape(ad.tensor(X), train, rng)
        return FrontierOutput(Tensor(np.zeros(shape.log_det.shape)), log_det=shape.log_det)

    def volume_from(self, t, terms: FrontierOutput, log: bool = False) -> Tensor:
        t = ad.tensor(t)
        half = 0.5 * self.d
        if log:
            return ad.log(t) * half - terms.log_det + log_unit_ball_volume(self.d)
        return (t ** half) * ad.exp(-terms.log_det) * unit_ball_volume(self.d)


class UnionOfFlows:
    """Softmin over K unit-determinant flow-Mahalanobis components."""

    family = "union"

    def __init__(self, config: FrontierConfig, rng: np.random.Generator):
        self.config = config
        self.d = config.response_dim
        self.K = config.n_components
        self.components = [FlowMahalanobis(config, rng, force_unit_det=True) for _ in range(self.K)]
        self.mixture_net = Mlp(MlpConfig(config.feature_dim, config.hidden_dims, self.K,
                                         use_layer_norm=config.use_layer_norm,
                                         dropout_rate=config.dropout_rate, zero_init_last_layer=True), rng)
        self.beta = 1.0
        self.weights_frozen = False

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for k, comp in enumerate(self.components):
            out += [(f"comp{k}.{name}", p) for name, p in comp.named_parameters()]
        out += self.mixture_net.named_parameters("mixture.")
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def init_from_data(self, X: np.ndarray, Y: np.ndarray, rng: np.random.Generator) -> None:
        """Seed component centers by farthest-point sampling on ``Y``."""
        pool = Y[rng.choice(len(Y), size=min(len(Y), 2000), replace=False)]
        centers = [pool[rng.integers(len(pool))]]
        dist = ((pool - centers[0]) ** 2).sum(axis=1)
        for _ in range(1, self.K):
            prob = dist / dist.sum() if dist.sum() > 0 else None
            nxt = pool[rng.choice(len(pool), p=prob)]
            centers.append(nxt)
            dist = np.minimum(dist, ((pool - nxt) ** 2).sum(axis=1))
        centers = np.array(centers)
        owner = np.argmin(((pool[:, None, :] - centers[None]) ** 2).sum(axis=2), axis=1)
        for k, comp in enumerate(self.components):
            local = pool[owner == k]
            cov = np.atleast_2d(np.cov(local, rowvar=False)) if len(local) > 2 * self.d else None
            comp.init_from_data(X, local if len(local) else pool, rng, center=centers[k], cov=cov)

    def mixture_log_weights(self, X, train: bool = False, rng=None) -> Tensor:
        X = ad.tensor(X)
        if self.weights_frozen:
            return Tensor(np.full((X.shape[0], self.K), -math.log(self.K)))
        logits = self.mixture_net(X, train, rng)
        return logits - ad.logsumexp(logits, axis=1).reshape(-1, 1)

    def forward(self, X, Y, train: bool = False, rng=None) -> FrontierOutput:
        X = ad.tensor(X)
        outs = [comp.forward(X, Y, train, rng) for comp in self.components]
        raw = ad.stack([o.score for o in outs], axis=1)
        log_w = self.mixture_log_weights(X, train, rng)
        scores = raw * ad.exp(log_w * (-2.0 / self.d))
        log_dets = ad.stack([o.log_det for o in outs], axis=1)
        return FrontierOutput(softmin_tape(scores, self.beta), log_weights=log_w,
                              component_log_dets=log_dets, component_scores=scores)

    def hard_scores(self, X, Y) -> np.ndarray:
        return self.forward(X, Y).component_scores.value.min(axis=1)

    def volume_terms(self, X, train: bool = False, rng=None) -> FrontierOutput:
        X = ad.tensor(X)
        log_dets = ad.stack([c.shape(X, train, rng).log_det for c in self.components], axis=1)
        log_w = self.mixture_log_weights(X, train, rng)
        return FrontierOutput(Tensor(np.zeros(X.shape[0])), log_weights=log_w, component_log_dets=log_dets)

    def volume_from(self, t, terms: FrontierOutput, log: bool = False) -> Tensor:
        """Sum of component volumes ``V_d t^(d/2) p_k / det(L_k)``."""
        t = ad.tensor(t)
        half = 0.5 * self.d
        per_comp = ad.exp(terms.log_weights - terms.component_log_dets).sum(axis=1)
        if log:
            return ad.log(t) * half + ad.log(per_comp) + log_unit_ball_volume(self.d)
        return (t ** half) * per_comp * unit_ball_volume(self.d)


FrontierModel = NormFrontier | FlowMahalanobis | UnionOfFlows


def build_frontier(config: FrontierConfig, rng: np.random.Generator) -> FrontierModel:
    if config.family == "norm":
        return NormFrontier(config, rng)
    if config.family == "flow":
        return FlowMahalanobis(config, rng)
    return UnionOfFlows(config, rng)


def frontier_eval(model: FrontierModel, X, Y, train: bool = False, rng=None) -> Tensor:
    """Differentiable frontier score (softmin aggregate for unions)."""
    return model.forward(X, Y, train, rng).score


def frontier_scores(model: FrontierModel, X, Y) -> np.ndarray:
    """Eval-mode scores used for membership: hard minimum for unions."""
    if isinstance(model, UnionOfFlows):
        return model.hard_scores(X, Y)
    return model.forward(X, Y).score.value


def volume_surrogate(model: FrontierModel, q, X, log: bool = False, train: bool = False, rng=None) -> Tensor:
    """Closed-form volume of ``{y : G(X, y) <= q}`` (sum-of-components proxy for unions)."""
    q_arr = q.value if isinstance(q, Tensor) else np.asarray(q, dtype=np.float64)
    if np.any(q_arr < 0):
        raise ValueError("volume threshold must be non-negative")
    return model.volume_from(q, model.volume_terms(X, train, rng), log=log)
