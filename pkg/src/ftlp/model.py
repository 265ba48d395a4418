"""Small classifiers with hand-written backpropagation.

Parameter layout (frozen): for each layer, the weight matrix of shape
``(out_dim, in_dim)`` in row-major order, then the ``out_dim`` biases. Each
layer is one ParamVector segment named ``layer{i}``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core_math import DiagonalGaussian, InvalidArgument, ParamVector, Segment, sample_matrix

ACTIVATIONS = ("identity", "relu", "tanh")


@dataclass(frozen=True)
class Layer:
    in_dim: int
    out_dim: int
    activation: str = "identity"


@dataclass(frozen=True)
class Architecture:
    layers: tuple[Layer, ...]
    class_count: int

    def __post_init__(self):
        layers = tuple(l if isinstance(l, Layer) else Layer(*l) for l in self.layers)
        object.__setattr__(self, "layers", layers)
        if not layers:
            raise InvalidArgument("architecture needs at least one layer")
        for i, layer in enumerate(layers):
            if layer.activation not in ACTIVATIONS:
                raise InvalidArgument(f"unknown activation {layer.activation!r}")
            if layer.in_dim < 1 or layer.out_dim < 1:
                raise InvalidArgument("layer dimensions must be positive")
            if i and layers[i - 1].out_dim != layer.in_dim:
                raise InvalidArgument(f"layer {i} input does not chain from layer {i - 1}")
        if layers[-1].out_dim != self.class_count:
            raise InvalidArgument("final layer width must equal class_count")

    @classmethod
    def mlp(cls, dims: Sequence[int], activation: str = "tanh") -> "Architecture":
        """``dims = [in, hidden..., classes]``; hidden layers share one activation."""
        layers = [Layer(a, b, activation) for a, b in zip(dims[:-2], dims[1:-1])]
        layers.append(Layer(dims[-2], dims[-1], "identity"))
        return cls(tuple(layers), dims[-1])

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def layout(self) -> tuple[Segment, ...]:
        segs, pos = [], 0
        for i, layer in enumerate(self.layers):
            n = layer.in_dim * layer.out_dim + layer.out_dim
            segs.append(Segment(f"layer{i}", pos, n))
            pos += n
        return tuple(segs)

    @property
    def param_count(self) -> int:
        return sum(l.in_dim * l.out_dim + l.out_dim for l in self.layers)

    @property
    def last_layer(self) -> str:
        return f"layer{len(self.layers) - 1}"

    def to_dict(self) -> dict:
        return {
            "class_count": self.class_count,
            "layers": [
                {"in_dim": l.in_dim, "out_dim": l.out_dim, "activation": l.activation}
                for l in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        layers = tuple(Layer(l["in_dim"], l["out_dim"], l["activation"]) for l in d["layers"])
        return cls(layers, d["class_count"])


@dataclass(frozen=True)
class Classifier:
    arch: Architecture
    params: ParamVector

    def __post_init__(self):
        params = self.params
        if not isinstance(params, ParamVector):
            params = ParamVector(params, self.arch.layout)
        if len(params) != self.arch.param_count:
            raise InvalidArgument(
                f"expected {self.arch.param_count} parameters, got {len(params)}")
        if params.layout != self.arch.layout:
            raise InvalidArgument("parameter layout does not match architecture")
        object.__setattr__(self, "params", params)

    def weights(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return unpack(self.arch, self.params.values)


@dataclass(frozen=True)
class Batch:
    features: np.ndarray
    labels: np.ndarray
    env_ids: np.ndarray | None = None

    def __post_init__(self):
        x = np.array(self.features, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        y = np.array(self.labels, dtype=np.int64).reshape(-1)
        e = np.zeros(len(y), dtype=np.int64) if self.env_ids is None else \
            np.array(self.env_ids, dtype=np.int64).reshape(-1)
        if len(x) < 1 or len(x) != len(y) or len(y) != len(e):
            raise InvalidArgument("batch needs n >= 1 rows with matching labels and env ids")
        if np.any(y < 0):
            raise InvalidArgument("labels must be non-negative class indices")
        for a in (x, y, e):
            a.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "env_ids", e)

    def __len__(self):
        return len(self.labels)

    def environments(self) -> np.ndarray:
        return np.unique(self.env_ids)


def unpack(arch: Architecture, flat: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    out, pos = [], 0
    for layer in arch.layers:
        nw = layer.in_dim * layer.out_dim
        W = flat[pos:pos + nw].reshape(layer.out_dim, layer.in_dim)
        b = flat[pos + nw:pos + nw + layer.out_dim]
        out.append((W, b))
        pos += nw + layer.out_dim
    return out


def init_params(arch: Architecture, seed, scale: float = 1.0) -> ParamVector:
    """Gaussian init with std ``scale / sqrt(in_dim)`` for weights, zero biases."""
    rng = np.random.default_rng(seed)
    chunks = []
    for layer in arch.layers:
        W = rng.standard_normal((layer.out_dim, layer.in_dim)) * scale / np.sqrt(layer.in_dim)
        chunks += [W.ravel(), np.zeros(layer.out_dim)]
    return ParamVector(np.concatenate(chunks), arch.layout)


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name, z, a):
    if name == "relu":
        return (z > 0).astype(np.float64)
    if name == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


def _check_input(arch: Architecture, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[1] != arch.input_dim:
        raise InvalidArgument(f"features have {x.shape[1]} columns, model expects {arch.input_dim}")
    return x


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]      # activation entering each layer
    pre: list[np.ndarray]         # pre-activations
    logits: np.ndarray

    @property
    def penultimate(self) -> np.ndarray:
        """Activations entering the final layer (raw inputs for a linear model)."""
        return self.inputs[-1]


def forward_cache(arch: Architecture, flat: np.ndarray, x) -> ForwardCache:
    x = _check_input(arch, x)
    inputs, pre = [], []
    a = x
    for layer, (W, b) in zip(arch.layers, unpack(arch, flat)):
        inputs.append(a)
        z = a @ W.T + b
        pre.append(z)
        a = _act(layer.activation, z)
    return ForwardCache(inputs, pre, a)


def forward(c: Classifier, features) -> np.ndarray:
    """Logits of shape (n, class_count)."""
    return forward_cache(c.arch, c.params.values, features).logits


def backward(arch: Architecture, flat: np.ndarray, cache: ForwardCache,
             d_logits: np.ndarray, d_penultimate: np.ndarray | None = None) -> np.ndarray:
    """Flat gradient given dL/dlogits and optionally an extra dL/d(penultimate features)."""
    grads = [None] * len(arch.layers)
    weights = unpack(arch, flat)
    last = len(arch.layers) - 1
    d_a = d_logits
    for i in range(last, -1, -1):
        layer = arch.layers[i]
        W, _ = weights[i]
        out = cache.logits if i == last else cache.inputs[i + 1]
        d_z = d_a * _act_grad(layer.activation, cache.pre[i], out)
        grads[i] = np.concatenate([(d_z.T @ cache.inputs[i]).ravel(), d_z.sum(axis=0)])
        d_a = d_z @ W
        if i == last and d_penultimate is not None:
            d_a = d_a + d_penultimate
    return np.concatenate(grads)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def _check_labels(arch: Architecture, labels: np.ndarray):
    if labels.max() >= arch.class_count:
        raise InvalidArgument("label exceeds class_count")


def ce_from_logits(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    n = len(labels)
    logp = log_softmax(logits)
    loss = -float(np.mean(logp[np.arange(n), labels]))
    d = np.exp(logp)
    d[np.arange(n), labels] -= 1.0
    return loss, d / n


def cross_entropy(c: Classifier, batch: Batch) -> tuple[float, ParamVector]:
    """Mean negative log-likelihood of the true class and its parameter gradient."""
    _check_labels(c.arch, batch.labels)
    cache = forward_cache(c.arch, c.params.values, batch.features)
    loss, d_logits = ce_from_logits(cache.logits, batch.labels)
    grad = backward(c.arch, c.params.values, cache, d_logits)
    return loss, c.params.with_values(grad)


def predict(c: Classifier, features) -> np.ndarray:
    # argmax returns the first maximum, so ties go to the lowest class index
    return np.argmax(forward(c, features), axis=1)


def grad_check(c: Classifier, loss_fn: Callable, batch: Batch | None = None,
               step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn(classifier, batch)`` returns ``(value, gradient)``; the gradient
    may be a ParamVector or an array. Error per coordinate is
    ``|analytic - numeric| / (|numeric| + 1e-8)``.
    """
    _, analytic = loss_fn(c, batch)
    analytic = analytic.values if isinstance(analytic, ParamVector) else np.asarray(analytic)
    theta = c.params.values
    numeric = np.empty_like(theta)
    for i in range(theta.size):
        plus, minus = theta.copy(), theta.copy()
        plus[i] += step
        minus[i] -= step
        fp, _ = loss_fn(Classifier(c.arch, c.params.with_values(plus)), batch)
        fm, _ = loss_fn(Classifier(c.arch, c.params.with_values(minus)), batch)
        numeric[i] = (fp - fm) / (2 * step)
    return float(np.max(np.abs(analytic - numeric) / (np.abs(numeric) + 1e-8)))


def risk(c: Classifier, features, labels, loss: str = "zero_one") -> float:
    if loss == "zero_one":
        return float(np.mean(predict(c, features) != np.asarray(labels)))
    if loss == "cross_entropy":
        logits = forward(c, features)
        return ce_from_logits(logits, np.asarray(labels, dtype=np.int64))[0]
    raise InvalidArgument(f"unknown loss {loss!r}")


def gibbs_risk_mc(posterior: DiagonalGaussian, arch: Architecture, data, n_samples: int,
                  seed, loss: str = "zero_one") -> float:
    """Monte-Carlo estimate of E_{h~posterior} R_data(h)."""
    if len(posterior) != arch.param_count:
        raise InvalidArgument("posterior dimension does not match architecture")
    draws = sample_matrix(posterior, n_samples, seed)
    return float(np.mean(gibbs_risks(draws, arch, data, loss)))


def gibbs_risks(draws: np.ndarray, arch: Architecture, data, loss: str = "zero_one") -> np.ndarray:
    """Per-draw risks for a stack of parameter vectors."""
    x, y = data.features, data.labels
    layout = arch.layout
    return np.array([risk(Classifier(arch, ParamVector(row, layout)), x, y, loss) for row in draws])
