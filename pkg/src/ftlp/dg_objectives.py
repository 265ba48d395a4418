"""Domain-generalization losses over multi-environment batches.

Each objective returns ``(loss, grad)`` with ``grad`` laid out like the
classifier parameters. Penalized objectives add ``penalty_weight`` times a
cross-environment penalty to the mean cross-entropy over the whole batch:

* IRM: sum_e (d/ds risk_e(s * logits) at s = 1)^2  (the IRMv1 form)
* VREx: population variance of the per-environment risks
* CORAL: mean over environment pairs of ||Cov_a - Cov_b||_F^2
* MMD: mean over environment pairs of the biased Gaussian-kernel MMD^2

CORAL and MMD act on penultimate features, i.e. the activations entering
the last layer. Mixup trains on convex combinations of batch samples.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from itertools import combinations

import numpy as np

from .core_math import InvalidArgument
from .model import (Batch, Classifier, backward, ce_from_logits, forward_cache, log_softmax,
                    softmax)

KINDS = ("ERM", "IRM", "VREx", "CORAL", "MMD", "Mixup")
PENALIZED = ("IRM", "VREx", "CORAL", "MMD")
LAMBDA_FACTORS = (100.0, 10.0, 1.0, 0.1, 0.01)


@dataclass(frozen=True)
class DGObjectiveSpec:
    kind: str = "ERM"
    penalty_weight: float | None = None
    kernel_bandwidth: float | None = None
    mixup_alpha: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidArgument(f"unknown objective {self.kind!r}; choose from {KINDS}")
        if self.kind in PENALIZED:
            if self.penalty_weight is None or self.penalty_weight < 0:
                raise InvalidArgument(f"{self.kind} needs a non-negative penalty_weight")
        elif self.penalty_weight is not None:
            raise InvalidArgument(f"{self.kind} takes no penalty_weight")
        if self.kind != "MMD" and self.kernel_bandwidth is not None:
            raise InvalidArgument("kernel_bandwidth applies to MMD only")
        if self.kernel_bandwidth is not None and self.kernel_bandwidth <= 0:
            raise InvalidArgument("kernel_bandwidth must be positive")
        if self.kind == "Mixup":
            if self.mixup_alpha is None or self.mixup_alpha <= 0:
                raise InvalidArgument("Mixup needs a positive mixup_alpha")
        elif self.mixup_alpha is not None:
            raise InvalidArgument("mixup_alpha applies to Mixup only")

    @property
    def min_envs(self) -> int:
        return 2 if self.kind in PENALIZED else 1

    def to_dict(self) -> dict:
        return {k: v for k, v in vars(self).items() if v is not None}


def list_objectives() -> list[DGObjectiveSpec]:
    """One spec per kind with default hyperparameters, in a fixed order.

    MMD defaults to the per-batch median-distance bandwidth (``None``).
    """
    out = []
    for kind in KINDS:
        if kind in PENALIZED:
            out.append(DGObjectiveSpec(kind, penalty_weight=1.0))
        elif kind == "Mixup":
            out.append(DGObjectiveSpec(kind, mixup_alpha=0.2))
        else:
            out.append(DGObjectiveSpec(kind))
    return out


def expand_lambda(spec: DGObjectiveSpec, factors=LAMBDA_FACTORS) -> list[DGObjectiveSpec]:
    """Scale the objective's own hyperparameter by each factor (ERM has none)."""
    if spec.kind in PENALIZED:
        return [replace(spec, penalty_weight=spec.penalty_weight * f) for f in factors]
    if spec.kind == "Mixup":
        return [replace(spec, mixup_alpha=spec.mixup_alpha * f) for f in factors]
    return [spec]


def sample_mixup_weights(alpha: float, count: int, rng) -> np.ndarray:
    return rng.beta(alpha, alpha, size=count)


def _env_groups(batch: Batch):
    return [np.flatnonzero(batch.env_ids == e) for e in batch.environments()]


def dg_loss(spec: DGObjectiveSpec, c: Classifier, batch: Batch, rng=None,
            strict: bool = True) -> tuple[float, np.ndarray]:
    """Loss and flat parameter gradient for one batch.

    Mixup draws its permutation and mixing weights from ``rng`` (a
    ``numpy.random.Generator``). With ``strict=False`` a batch with fewer
    environments than the objective needs gets the penalty over the present
    environments only, which is zero for a single environment.
    """
    groups = _env_groups(batch)
    if len(groups) < spec.min_envs and strict:
        raise InvalidArgument(f"{spec.kind} needs at least {spec.min_envs} environments in the batch")
    if batch.labels.max() >= c.arch.class_count:
        raise InvalidArgument("label exceeds class_count")
    theta = c.params.values

    if spec.kind == "Mixup":
        return _mixup(spec, c, batch, rng)

    cache = forward_cache(c.arch, theta, batch.features)
    loss, d_logits = ce_from_logits(cache.logits, batch.labels)
    weight = spec.penalty_weight or 0.0
    if spec.kind == "ERM" or weight == 0.0 or len(groups) < 2:
        return loss, backward(c.arch, theta, cache, d_logits)

    d_feat = None
    if spec.kind == "IRM":
        pen, d_pen = _irm(cache.logits, batch.labels, groups)
        d_logits = d_logits + weight * d_pen
    elif spec.kind == "VREx":
        pen, d_pen = _vrex(cache.logits, batch.labels, groups)
        d_logits = d_logits + weight * d_pen
    elif spec.kind == "CORAL":
        pen, d_feat = _coral(cache.penultimate, groups)
        d_feat = weight * d_feat
    else:
        pen, d_feat = _mmd(cache.penultimate, groups, spec.kernel_bandwidth)
        d_feat = weight * d_feat
    return loss + weight * pen, backward(c.arch, theta, cache, d_logits, d_feat)


def _irm(logits, labels, groups):
    p = softmax(logits)
    onehot = np.zeros_like(p)
    onehot[np.arange(len(labels)), labels] = 1.0
    resid = p - onehot
    inner = np.sum(p * logits, axis=1, keepdims=True)
    # d/dz_j of <p - y, z> = (p_j - y_j) + p_j (z_j - <p, z>)
    d_scale = resid + p * (logits - inner)
    per_sample = np.sum(resid * logits, axis=1)
    pen, d = 0.0, np.zeros_like(logits)
    for idx in groups:
        g = float(np.mean(per_sample[idx]))
        pen += g * g
        d[idx] = 2.0 * g * d_scale[idx] / len(idx)
    return pen, d


def irm_scale_gradients(logits, labels, groups) -> np.ndarray:
    """Per-environment d/ds of the mean cross-entropy of ``s * logits`` at s = 1."""
    p = softmax(logits)
    onehot = np.zeros_like(p)
    onehot[np.arange(len(labels)), labels] = 1.0
    per_sample = np.sum((p - onehot) * logits, axis=1)
    return np.array([np.mean(per_sample[idx]) for idx in groups])


def _vrex(logits, labels, groups):
    risks, d_risks = [], []
    for idx in groups:
        r, d = ce_from_logits(logits[idx], labels[idx])
        risks.append(r)
        d_risks.append(d)
    risks = np.array(risks)
    centred = risks - risks.mean()
    pen = float(np.mean(centred ** 2))
    d = np.zeros_like(logits)
    for idx, dr, c in zip(groups, d_risks, centred):
        d[idx] = 2.0 * c / len(groups) * dr
    return pen, d


def _cov(f):
    fc = f - f.mean(axis=0)
    return fc, fc.T @ fc / len(f)


def _coral(feats, groups):
    stats = [_cov(feats[idx]) for idx in groups]
    pairs = list(combinations(range(len(groups)), 2))
    pen, d = 0.0, np.zeros_like(feats)
    for a, b in pairs:
        diff = stats[a][1] - stats[b][1]
        pen += float(np.sum(diff * diff))
        # d/dF of ||C_a - C_b||^2 with C = Fc^T Fc / n is (4 / n) Fc (C_a - C_b)
        d[groups[a]] += 4.0 / len(groups[a]) * stats[a][0] @ diff
        d[groups[b]] -= 4.0 / len(groups[b]) * stats[b][0] @ diff
    return pen / len(pairs), d / len(pairs)


def median_bandwidth(feats: np.ndarray) -> float:
    """Median pairwise Euclidean distance, floored at 1e-6."""
    sq = np.sum((feats[:, None, :] - feats[None, :, :]) ** 2, axis=-1)
    iu = np.triu_indices(len(feats), k=1)
    if iu[0].size == 0:
        return 1.0
    return max(float(np.median(np.sqrt(sq[iu]))), 1e-6)


def _kernel_mean(x, y, bw):
    """Mean Gaussian kernel value over all (x_i, y_j) and its gradient w.r.t. x and y."""
    diff = x[:, None, :] - y[None, :, :]
    k = np.exp(-np.sum(diff * diff, axis=-1) / (2.0 * bw * bw))
    scale = 1.0 / (len(x) * len(y) * bw * bw)
    dx = -scale * np.einsum("ij,ijd->id", k, diff)
    dy = scale * np.einsum("ij,ijd->jd", k, diff)
    return float(k.mean()), dx, dy


def _mmd(feats, groups, bandwidth):
    # a median-heuristic bandwidth is treated as a constant of the batch
    bw = median_bandwidth(feats) if bandwidth is None else bandwidth
    pairs = list(combinations(range(len(groups)), 2))
    pen, d = 0.0, np.zeros_like(feats)
    for a, b in pairs:
        xa, xb = feats[groups[a]], feats[groups[b]]
        kaa, da1, da2 = _kernel_mean(xa, xa, bw)
        kbb, db1, db2 = _kernel_mean(xb, xb, bw)
        kab, dab_a, dab_b = _kernel_mean(xa, xb, bw)
        pen += kaa + kbb - 2.0 * kab
        d[groups[a]] += da1 + da2 - 2.0 * dab_a
        d[groups[b]] += db1 + db2 - 2.0 * dab_b
    return pen / len(pairs), d / len(pairs)


def _mixup(spec, c, batch, rng):
    if rng is None:
        raise InvalidArgument("Mixup needs a random generator")
    n = len(batch)
    perm = rng.permutation(n)
    lam = sample_mixup_weights(spec.mixup_alpha, n, rng)
    x = lam[:, None] * batch.features + (1.0 - lam[:, None]) * batch.features[perm]
    theta = c.params.values
    cache = forward_cache(c.arch, theta, x)
    la, da = _weighted_ce(cache.logits, batch.labels, lam)
    lb, db = _weighted_ce(cache.logits, batch.labels[perm], 1.0 - lam)
    return la + lb, backward(c.arch, theta, cache, da + db)


def _weighted_ce(logits, labels, w):
    n = len(labels)
    logp = log_softmax(logits)
    loss = -float(np.sum(w * logp[np.arange(n), labels])) / n
    d = np.exp(logp)
    d[np.arange(n), labels] -= 1.0
    return loss, d * (w / n)[:, None]
