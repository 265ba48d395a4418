"""Covariance encoder G and the prior-anchoring penalty.

The encoder maps a parameter vector to per-coordinate variances through a
per-layer affine map on log-variance, clamped to ``[logvar_min, logvar_max]``.
The penalty anchors fine-tuned weights ``h`` to pre-trained weights ``h0``:

    truncated:  ||h - h0||^2_{G(h0)^-1} + tr(G(h0)^-1 G(h))
    full_kl:    KL(N(h, G(h)) || N(h0, G(h0)))

On the task-specific (last) layer the prior is N(0, I) instead.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .core_math import DiagonalGaussian, InvalidArgument, ParamVector, Segment

VARIANTS = ("truncated", "full_kl")
DENSE_MAX_PARAMS = 64


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class CovarianceEncoder:
    """Per-layer affine map from weights to log-variances.

    In ``elementwise`` mode ``theta`` holds one scale per model parameter
    followed by one bias per layer, so the encoder costs as many parameters
    as the model plus one per layer. ``dense`` mode holds, for each layer of
    size n, an n-by-n matrix and an n-vector; it is limited to small layers.
    """

    layout: tuple[Segment, ...]
    theta: np.ndarray
    task_layer: str | None
    logvar_min: float = -10.0
    logvar_max: float = 4.0
    mode: str = "elementwise"

    def __post_init__(self):
        theta = np.array(self.theta, dtype=np.float64).reshape(-1)
        if theta.size != self.expected_size(self.layout, self.mode):
            raise InvalidArgument(f"encoder expects {self.expected_size(self.layout, self.mode)}"
                                  f" parameters, got {theta.size}")
        if not self.logvar_min < self.logvar_max:
            raise InvalidArgument("logvar_min must be below logvar_max")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    @staticmethod
    def expected_size(layout, mode: str) -> int:
        if mode == "elementwise":
            return sum(s.length for s in layout) + len(layout)
        if mode == "dense":
            if any(s.length > DENSE_MAX_PARAMS for s in layout):
                raise ConfigurationError(
                    f"dense encoder mode supports layers of at most {DENSE_MAX_PARAMS} parameters")
            return sum(s.length * s.length + s.length for s in layout)
        raise ConfigurationError(f"unknown encoder mode {mode!r}")

    @classmethod
    def zeros(cls, layout, task_layer: str | None, mode: str = "elementwise",
              logvar_min: float = -10.0, logvar_max: float = 4.0) -> "CovarianceEncoder":
        """Scale 0 and bias 0: unit variance everywhere."""
        layout = tuple(layout)
        return cls(layout, np.zeros(cls.expected_size(layout, mode)), task_layer,
                   logvar_min, logvar_max, mode)

    @classmethod
    def for_params(cls, params: ParamVector, **kw) -> "CovarianceEncoder":
        return cls.zeros(params.layout, params.layout[-1].name, **kw)

    def with_theta(self, theta) -> "CovarianceEncoder":
        return replace(self, theta=np.asarray(theta, dtype=np.float64))

    @property
    def n_params(self) -> int:
        return sum(s.length for s in self.layout)

    def scale(self) -> np.ndarray:
        if self.mode != "elementwise":
            raise InvalidArgument("scale() is defined for elementwise encoders")
        return self.theta[:self.n_params]

    def bias(self) -> np.ndarray:
        if self.mode != "elementwise":
            raise InvalidArgument("bias() is defined for elementwise encoders")
        return self.theta[self.n_params:]

    def _dense_blocks(self):
        pos = 0
        for seg in self.layout:
            n = seg.length
            A = self.theta[pos:pos + n * n].reshape(n, n)
            b = self.theta[pos + n * n:pos + n * n + n]
            yield seg, A, b, pos
            pos += n * n + n

    def preactivation(self, params: ParamVector) -> np.ndarray:
        self._check_layout(params)
        x = params.values
        if self.mode == "elementwise":
            return self.scale() * x + self.bias()[params.layer_index()]
        out = np.empty_like(x)
        for seg, A, b, _ in self._dense_blocks():
            sl = slice(seg.offset, seg.offset + seg.length)
            out[sl] = A @ x[sl] + b
        return out

    def preactivation_vjp(self, params: ParamVector, d_pre: np.ndarray):
        """Pull a cotangent on the pre-activation back to (params, theta)."""
        x = params.values
        if self.mode == "elementwise":
            d_x = d_pre * self.scale()
            d_bias = np.bincount(params.layer_index(), weights=d_pre, minlength=len(self.layout))
            return d_x, np.concatenate([d_pre * x, d_bias])
        d_x = np.empty_like(x)
        d_theta = np.empty_like(self.theta)
        for seg, A, _, pos in self._dense_blocks():
            n = seg.length
            sl = slice(seg.offset, seg.offset + n)
            d_x[sl] = A.T @ d_pre[sl]
            d_theta[pos:pos + n * n] = np.outer(d_pre[sl], x[sl]).ravel()
            d_theta[pos + n * n:pos + n * n + n] = d_pre[sl]
        return d_x, d_theta

    def _check_layout(self, params: ParamVector):
        if params.layout != self.layout:
            raise InvalidArgument("parameter layout does not match encoder layout")

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "task_layer": self.task_layer,
            "logvar_min": self.logvar_min,
            "logvar_max": self.logvar_max,
            "layout": [[s.name, s.offset, s.length] for s in self.layout],
            "theta": self.theta.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CovarianceEncoder":
        layout = tuple(Segment(*s) for s in d["layout"])
        return cls(layout, np.array(d["theta"], dtype=np.float64), d["task_layer"],
                   d["logvar_min"], d["logvar_max"], d["mode"])


def _encode(g: CovarianceEncoder, params: ParamVector):
    pre = g.preactivation(params)
    clipped = np.clip(pre, g.logvar_min, g.logvar_max)
    var = np.exp(clipped)
    # zero subgradient through saturated coordinates
    live = (pre >= g.logvar_min) & (pre <= g.logvar_max)
    return var, live


def encode_covariance(g: CovarianceEncoder, params: ParamVector) -> np.ndarray:
    """Variance vector exp(clamp(pre-activation))."""
    return _encode(g, params)[0]


def induced_posterior(h: ParamVector, g: CovarianceEncoder) -> DiagonalGaussian:
    """N(h, G(h)), including the last layer."""
    return DiagonalGaussian(h, encode_covariance(g, h))


def penalty_prior(h0: ParamVector, g: CovarianceEncoder) -> DiagonalGaussian:
    """The prior the penalty measures against: N(h0, G(h0)), with N(0, 1) on the task layer."""
    mask = _task_mask(h0, g)
    mean = np.where(mask, 0.0, h0.values)
    var = np.where(mask, 1.0, encode_covariance(g, h0))
    return DiagonalGaussian(h0.with_values(mean), var)


def _task_mask(params: ParamVector, g: CovarianceEncoder) -> np.ndarray:
    if g.task_layer is None:
        raise ConfigurationError("encoder has no task-specific layer flagged")
    names = [s.name for s in params.layout]
    if g.task_layer not in names:
        raise ConfigurationError(f"task layer {g.task_layer!r} not in layout {names}")
    return params.layer_index() == names.index(g.task_layer)


@dataclass(frozen=True)
class PenaltyValue:
    mahalanobis_term: float
    trace_term: float
    logdet_term: float = 0.0
    variant: str = "truncated"
    total: float = field(init=False)

    def __post_init__(self):
        s = self.mahalanobis_term + self.trace_term
        if self.variant == "full_kl":
            s = 0.5 * (s + self.logdet_term)
        object.__setattr__(self, "total", s)


def ftlp_penalty(h: ParamVector, h0: ParamVector, g: CovarianceEncoder,
                 variant: str = "truncated") -> tuple[PenaltyValue, ParamVector, np.ndarray]:
    """Penalty value with gradients w.r.t. ``h`` and the encoder parameters.

    G(h0) is recomputed from the current encoder, so encoder gradients flow
    through both G(h) and G(h0).
    """
    if variant not in VARIANTS:
        raise ConfigurationError(f"unknown penalty variant {variant!r}")
    if h.layout != h0.layout:
        raise InvalidArgument("h and h0 layouts differ")
    g._check_layout(h)
    task = _task_mask(h, g)

    var_h, live_h = _encode(g, h)
    var_0, live_0 = _encode(g, h0)
    mu0 = np.where(task, 0.0, h0.values)
    var_0 = np.where(task, 1.0, var_0)
    diff = h.values - mu0

    maha_i = diff * diff / var_0
    trace_i = var_h / var_0
    maha, trace = float(np.sum(maha_i)), float(np.sum(trace_i))

    if variant == "truncated":
        value = PenaltyValue(maha, trace, 0.0, variant)
        d_h = 2.0 * diff / var_0
        d_var_h = 1.0 / var_0
        d_var_0 = -(diff * diff + var_h) / (var_0 * var_0)
    else:
        logdet = float(np.sum(np.log(var_0) - np.log(var_h))) - h.values.size
        value = PenaltyValue(maha, trace, logdet, variant)
        d_h = diff / var_0
        d_var_h = 0.5 * (1.0 / var_0 - 1.0 / var_h)
        d_var_0 = 0.5 * (1.0 / var_0 - (diff * diff + var_h) / (var_0 * var_0))
    d_var_0 = np.where(task, 0.0, d_var_0)

    d_pre_h = d_var_h * var_h * live_h
    d_pre_0 = d_var_0 * var_0 * live_0
    dx_h, dtheta_h = g.preactivation_vjp(h, d_pre_h)
    _, dtheta_0 = g.preactivation_vjp(h0, d_pre_0)
    return value, h.with_values(d_h + dx_h), dtheta_h + dtheta_0
