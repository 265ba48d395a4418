"""Diagonal-Gaussian arithmetic over flat parameter vectors.

Everything here is a pure function of its inputs. Variances are stored
directly (not standard deviations) and must be at least ``MIN_VARIANCE``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

MIN_VARIANCE = 1e-12


class InvalidArgument(ValueError):
    """Raised on dimension mismatches and out-of-domain arguments."""


@dataclass(frozen=True)
class Segment:
    name: str
    offset: int
    length: int


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Flat real vector split into named, contiguous layer segments."""

    values: np.ndarray
    layout: tuple[Segment, ...] = field(default=())

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64).reshape(-1)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        layout = self.layout
        if not layout:
            layout = (Segment("all", 0, values.size),)
        layout = tuple(Segment(*s) if not isinstance(s, Segment) else s for s in layout)
        object.__setattr__(self, "layout", layout)
        pos = 0
        for seg in layout:
            if seg.offset != pos or seg.length <= 0:
                raise InvalidArgument(f"layout segment {seg.name!r} is not contiguous")
            pos += seg.length
        if pos != values.size:
            raise InvalidArgument(f"layout covers {pos} values, vector has {values.size}")
        if not np.all(np.isfinite(values)):
            raise InvalidArgument("parameter values must be finite")

    def __len__(self):
        return self.values.size

    def __eq__(self, other):
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self.layout == other.layout and np.array_equal(self.values, other.values)

    def segment(self, name: str) -> np.ndarray:
        for seg in self.layout:
            if seg.name == name:
                return self.values[seg.offset:seg.offset + seg.length]
        raise KeyError(name)

    def with_values(self, values) -> "ParamVector":
        return ParamVector(values, self.layout)

    def layer_index(self) -> np.ndarray:
        """Segment number of each coordinate."""
        return np.repeat(np.arange(len(self.layout)), [s.length for s in self.layout])


def _as_values(x) -> np.ndarray:
    if isinstance(x, ParamVector):
        return x.values
    return np.asarray(x, dtype=np.float64).reshape(-1)


@dataclass(frozen=True, eq=False)
class DiagonalGaussian:
    mean: ParamVector
    variance: np.ndarray

    def __post_init__(self):
        mean = self.mean if isinstance(self.mean, ParamVector) else ParamVector(self.mean)
        object.__setattr__(self, "mean", mean)
        var = np.array(self.variance, dtype=np.float64).reshape(-1)
        if var.size == 1 and len(mean) != 1:
            var = np.full(len(mean), var[0])
        if var.size != len(mean):
            raise InvalidArgument(f"variance has {var.size} entries, mean has {len(mean)}")
        if not np.all(var >= MIN_VARIANCE):
            raise InvalidArgument(f"variances must be >= {MIN_VARIANCE}")
        var.setflags(write=False)
        object.__setattr__(self, "variance", var)

    def __len__(self):
        return len(self.mean)

    def __eq__(self, other):
        if not isinstance(other, DiagonalGaussian):
            return NotImplemented
        return self.mean == other.mean and np.array_equal(self.variance, other.variance)


def _check_same_length(*arrays):
    sizes = {a.size for a in arrays}
    if len(sizes) != 1:
        raise InvalidArgument(f"dimension mismatch: {sorted(sizes)}")


def mahalanobis_sq(x, mu, variance) -> float:
    """Squared distance sum_i (x_i - mu_i)^2 / var_i."""
    x, mu, var = _as_values(x), _as_values(mu), _as_values(variance)
    _check_same_length(x, mu, var)
    if not np.all(var > 0):
        raise InvalidArgument("variance must be positive")
    return float(np.sum((x - mu) ** 2 / var))


def trace_ratio(var_p, var_q) -> float:
    """tr(diag(var_q)^-1 diag(var_p))."""
    var_p, var_q = _as_values(var_p), _as_values(var_q)
    _check_same_length(var_p, var_q)
    if not np.all(var_q > 0):
        raise InvalidArgument("var_q must be positive")
    return float(np.sum(var_p / var_q))


def kl_diag_gaussian(p: DiagonalGaussian, q: DiagonalGaussian) -> float:
    """KL(p || q) for diagonal Gaussians, in nats."""
    mp, mq = p.mean.values, q.mean.values
    _check_same_length(mp, mq)
    vp, vq = p.variance, q.variance
    ratio = vp / vq
    terms = ratio + (mp - mq) ** 2 / vq - 1.0 - np.log(ratio)
    # log(ratio) - ratio + 1 <= 0 analytically; clip rounding below zero
    return max(0.5 * float(np.sum(terms)), 0.0)


def kl_prior_gradient(p: DiagonalGaussian, q: DiagonalGaussian) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of KL(p || q) w.r.t. q's mean and q's variance."""
    mp, mq = p.mean.values, q.mean.values
    _check_same_length(mp, mq)
    vp, vq = p.variance, q.variance
    d = mp - mq
    g_mean = -d / vq
    g_var = 0.5 * (1.0 / vq - (vp + d * d) / (vq * vq))
    return g_mean, g_var


def kl_taylor_gap(p: DiagonalGaussian, q_ref: DiagonalGaussian, delta_mean, delta_var) -> float:
    """Second-order remainder of KL(p || q) around q_ref.

    Returns ``KL(p, q_ref + delta) - KL(p, q_ref) - <grad, delta>`` with the
    gradient taken in closed form at q_ref.
    """
    dm, dv = _as_values(delta_mean), _as_values(delta_var)
    _check_same_length(dm, dv, q_ref.variance)
    new_var = q_ref.variance + dv
    if not np.all(new_var >= MIN_VARIANCE):
        raise InvalidArgument("perturbed variance must stay positive")
    q_new = DiagonalGaussian(q_ref.mean.with_values(q_ref.mean.values + dm), new_var)
    g_mean, g_var = kl_prior_gradient(p, q_ref)
    linear = float(np.dot(g_mean, dm) + np.dot(g_var, dv))
    return kl_diag_gaussian(p, q_new) - kl_diag_gaussian(p, q_ref) - linear


def sample_gaussian(d: DiagonalGaussian, count: int, seed) -> list[ParamVector]:
    """Draw ``count`` parameter vectors; pure in (d, count, seed)."""
    return [d.mean.with_values(row) for row in sample_matrix(d, count, seed)]


def sample_matrix(d: DiagonalGaussian, count: int, seed) -> np.ndarray:
    """Same draws as :func:`sample_gaussian`, stacked into a (count, dim) array."""
    if count < 1:
        raise InvalidArgument("count must be >= 1")
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((count, len(d)))
    return d.mean.values + noise * np.sqrt(d.variance)


def gaussian(mean: Sequence[float], variance: Sequence[float] | float) -> DiagonalGaussian:
    return DiagonalGaussian(ParamVector(mean), variance)
