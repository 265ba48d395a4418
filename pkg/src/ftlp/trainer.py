"""Pre-training, prior-anchored fine-tuning, model selection and gamma sweeps.

Fine-tuning follows the usual loop: initialize h from h0, then per step draw
a batch from the pooled sources, compute ``dg_loss + gamma * penalty`` and
update h and the covariance encoder jointly (the encoder at a multiple of
the model learning rate). Losses are batch means, so gamma does not depend
on the batch size.
"""
from __future__ import annotations

import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import io
from .core_math import DiagonalGaussian, InvalidArgument, ParamVector
from .dg_objectives import DGObjectiveSpec, dg_loss
from .model import Architecture, Batch, Classifier, ce_from_logits, forward, init_params
from .prior_encoder import VARIANTS, CovarianceEncoder, ftlp_penalty
from .synthetic_domains import DomainDataset, pool, split_holdout

OPTIMIZERS = ("sgd", "sgd_momentum", "adam")
LR_GRID_FULL_SCALE = (8e-5, 5e-5, 3e-5, 1e-5)
LR_GRID_DESK = (1e-2, 5e-3, 3e-3, 1e-3)
GAMMA_EXPONENTS = tuple(range(-8, 3))


class TrainingDivergence(RuntimeError):
    """Loss went non-finite; carries the step index and the last finite state."""

    def __init__(self, step: int, last_params: ParamVector, last_encoder: CovarianceEncoder | None):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step
        self.last_params = last_params
        self.last_encoder = last_encoder


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-2
    encoder_lr_multiplier: float = 10.0
    batch_size: int = 32
    steps: int = 200
    gamma: float = 0.0
    seed: int = 0
    optimizer: str = "adam"
    objective: DGObjectiveSpec = field(default_factory=DGObjectiveSpec)
    penalty_variant: str = "truncated"
    encoder_mode: str = "elementwise"
    logvar_min: float = -10.0
    logvar_max: float = 4.0

    def __post_init__(self):
        if isinstance(self.objective, dict):
            object.__setattr__(self, "objective", DGObjectiveSpec(**self.objective))
        if self.learning_rate < 0 or self.encoder_lr_multiplier <= 0:
            raise InvalidArgument("learning rates must be non-negative")
        if self.batch_size < 1 or self.steps < 0:
            raise InvalidArgument("batch_size must be positive and steps non-negative")
        if self.gamma < 0:
            raise InvalidArgument("gamma must be non-negative")
        if self.optimizer not in OPTIMIZERS:
            raise InvalidArgument(f"optimizer must be one of {OPTIMIZERS}")
        if self.penalty_variant not in VARIANTS:
            raise InvalidArgument(f"penalty_variant must be one of {VARIANTS}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["objective"] = self.objective.to_dict()
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class Optimizer:
    """Plain SGD, SGD with momentum 0.9, or Adam(0.9, 0.999, 1e-8)."""

    def __init__(self, kind: str, lr: float, size: int):
        self.kind, self.lr, self.t = kind, lr, 0
        self.m = np.zeros(size)
        self.v = np.zeros(size)

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        if self.kind == "sgd":
            return theta - self.lr * grad
        if self.kind == "sgd_momentum":
            self.m = 0.9 * self.m + grad
            return theta - self.lr * self.m
        self.m = 0.9 * self.m + 0.1 * grad
        self.v = 0.999 * self.v + 0.001 * grad * grad
        m_hat = self.m / (1 - 0.9 ** self.t)
        v_hat = self.v / (1 - 0.999 ** self.t)
        return theta - self.lr * m_hat / (np.sqrt(v_hat) + 1e-8)


@dataclass(frozen=True, eq=False)
class Checkpoint:
    arch: Architecture
    params: ParamVector
    encoder: CovarianceEncoder
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.params) != self.arch.param_count:
            raise InvalidArgument("checkpoint parameters do not match architecture")

    @property
    def classifier(self) -> Classifier:
        return Classifier(self.arch, self.params)

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return (self.arch == other.arch and self.params == other.params
                and np.array_equal(self.encoder.theta, other.encoder.theta)
                and self.encoder.to_dict() == other.encoder.to_dict() and self.meta == other.meta)

    def to_dict(self) -> dict:
        layers = []
        for seg, (W, b) in zip(self.arch.layout, self.classifier.weights()):
            layers.append({"name": seg.name, "weights": W.ravel().tolist(), "biases": b.tolist()})
        return {"arch": self.arch.to_dict(), "layers": layers,
                "encoder": self.encoder.to_dict(), "meta": self.meta}

    @classmethod
    def from_dict(cls, d: dict) -> "Checkpoint":
        arch = Architecture.from_dict(d["arch"])
        flat = np.concatenate([np.r_[l["weights"], l["biases"]] for l in d["layers"]])
        return cls(arch, ParamVector(flat, arch.layout),
                   CovarianceEncoder.from_dict(d["encoder"]), d.get("meta", {}))

    def save(self, path):
        return io.write_json(self, path)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_dict(io.read_json(path))


@dataclass
class StepRecord:
    step: int
    dg_loss: float
    penalty: float
    total: float


@dataclass
class RunResult:
    records: list[StepRecord]
    accuracies: dict[str, float]
    selected_step: int

    def rows(self) -> list[dict]:
        return [asdict(r) for r in self.records]

    def summary(self) -> dict:
        return {"steps": len(self.records), "accuracies": self.accuracies,
                "selected_step": self.selected_step,
                "final": asdict(self.records[-1]) if self.records else None}

    def save(self, directory):
        io.write_csv(self.rows(), f"{directory}/run.csv", ["step", "dg_loss", "penalty", "total"])
        io.write_json(self.summary(), f"{directory}/summary.json")


def _fresh_encoder(arch: Architecture, cfg: TrainConfig) -> CovarianceEncoder:
    return CovarianceEncoder.zeros(arch.layout, arch.last_layer, cfg.encoder_mode,
                                   cfg.logvar_min, cfg.logvar_max)


def sample_batch(data: Batch, batch_size: int, rng) -> Batch:
    """Uniform draw from the pooled data (without replacement when possible)."""
    n = len(data)
    idx = rng.choice(n, size=batch_size, replace=batch_size > n)
    return Batch(data.features[idx], data.labels[idx], data.env_ids[idx])


def _check_finite(value, step, params, encoder):
    if not np.isfinite(value):
        raise TrainingDivergence(step, params, encoder)


def pretrain(arch: Architecture, corpus: Sequence[DomainDataset], cfg: TrainConfig) -> Checkpoint:
    """ERM on the pooled corpus from a seeded random init; returns h0 with a fresh encoder."""
    if not corpus:
        raise InvalidArgument("pre-training corpus is empty")
    data = pool(corpus)
    rng = np.random.default_rng(cfg.seed)
    params = init_params(arch, rng.integers(2**32))
    theta = params.values.copy()
    opt = Optimizer(cfg.optimizer, cfg.learning_rate, theta.size)
    erm = DGObjectiveSpec("ERM")
    for step in range(cfg.steps):
        batch = sample_batch(data, cfg.batch_size, rng)
        loss, grad = dg_loss(erm, Classifier(arch, params.with_values(theta)), batch)
        _check_finite(loss, step, params.with_values(theta), None)
        theta = opt.step(theta, grad)
    meta = {"kind": "pretrain", "config_hash": cfg.config_hash(), "steps": cfg.steps,
            "seed": cfg.seed, "corpus_size": len(data), "config": cfg.to_dict()}
    return Checkpoint(arch, params.with_values(theta), _fresh_encoder(arch, cfg), meta)


def _task_init(h0: Checkpoint, class_count: int | None, seed) -> tuple[Architecture, ParamVector]:
    """Copy h0, re-initializing the last layer if the class count changes."""
    if class_count is None or class_count == h0.arch.class_count:
        return h0.arch, h0.params
    layers = list(h0.arch.layers)
    layers[-1] = replace(layers[-1], out_dim=class_count)
    arch = Architecture(tuple(layers), class_count)
    fresh = init_params(arch, seed).values
    last = arch.layout[-1]
    flat = np.concatenate([h0.params.values[:last.offset], fresh[last.offset:]])
    return arch, ParamVector(flat, arch.layout)


def finetune_ftlp(h0: Checkpoint, sources: Sequence[DomainDataset], cfg: TrainConfig,
                  class_count: int | None = None,
                  validation: Sequence[DomainDataset] | None = None,
                  eval_every: int = 0) -> tuple[Checkpoint, RunResult]:
    """Fine-tune from h0 against ``dg_loss + gamma * ftlp_penalty``.

    Each step records the losses evaluated before that step's update, so the
    step-0 record is the objective at h0. When ``validation`` is given the
    model is scored every ``eval_every`` steps and the best step (mean
    accuracy, then lower cross-entropy) is reported as ``selected_step``;
    the returned checkpoint is always the final one.
    """
    if not sources:
        raise InvalidArgument("no source domains")
    arch, anchor = _task_init(h0, class_count, cfg.seed)
    encoder = h0.encoder if arch == h0.arch else _fresh_encoder(arch, cfg)
    data = pool(sources)
    if data.labels.max() >= arch.class_count:
        raise InvalidArgument("source labels exceed the model's class count")

    rng = np.random.default_rng(cfg.seed)
    theta = anchor.values.copy()
    enc_theta = encoder.theta.copy()
    opt = Optimizer(cfg.optimizer, cfg.learning_rate, theta.size)
    enc_opt = Optimizer(cfg.optimizer, cfg.learning_rate * cfg.encoder_lr_multiplier, enc_theta.size)

    records, best = [], (-np.inf, np.inf, 0)
    every = eval_every or max(cfg.steps // 10, 1)
    for step in range(cfg.steps):
        h = anchor.with_values(theta)
        g = encoder.with_theta(enc_theta)
        if validation and step % every == 0:
            best = _track(best, Classifier(arch, h), validation, step)
        batch = sample_batch(data, cfg.batch_size, rng)
        loss, grad = dg_loss(cfg.objective, Classifier(arch, h), batch, rng=rng, strict=False)
        pen, grad_h, grad_g = ftlp_penalty(h, anchor, g, cfg.penalty_variant)
        total = loss + cfg.gamma * pen.total
        records.append(StepRecord(step, loss, pen.total, total))
        _check_finite(total, step, h, g)
        if cfg.gamma > 0:
            grad = grad + cfg.gamma * grad_h.values
            enc_theta = enc_opt.step(enc_theta, cfg.gamma * grad_g)
        theta = opt.step(theta, grad)

    final = anchor.with_values(theta)
    if validation:
        best = _track(best, Classifier(arch, final), validation, cfg.steps)
    accs = {f"source_{i}": evaluate_params(arch, final, d)[0] for i, d in enumerate(sources)}
    meta = {"kind": "finetune", "config_hash": cfg.config_hash(), "steps": cfg.steps,
            "seed": cfg.seed, "loss_normalization": "batch_mean",
            "parent": h0.meta.get("config_hash"), "config": cfg.to_dict()}
    ckpt = Checkpoint(arch, final, encoder.with_theta(enc_theta), meta)
    selected = best[2] if validation else cfg.steps
    return ckpt, RunResult(records, accs, selected)


def _track(best, clf, validation, step):
    acc, ce = _mean_scores(clf, validation)
    if (acc, -ce) > (best[0], -best[1]):
        return (acc, ce, step)
    return best


def _mean_scores(clf: Classifier, datasets) -> tuple[float, float]:
    scores = [evaluate_params(clf.arch, clf.params, d) for d in datasets]
    return float(np.mean([s[0] for s in scores])), float(np.mean([s[1] for s in scores]))


def evaluate_params(arch, params, data) -> tuple[float, float]:
    logits = forward(Classifier(arch, params), data.features)
    labels = np.asarray(data.labels)
    acc = float(np.mean(np.argmax(logits, axis=1) == labels))
    return acc, ce_from_logits(logits, labels)[0]


def evaluate(ckpt: Checkpoint, data) -> tuple[float, float]:
    """(accuracy, mean cross-entropy); argmax ties go to the lowest class index."""
    return evaluate_params(ckpt.arch, ckpt.params, data)


def select_by_training_domain_validation(candidates, sources_with_holdout):
    """Pick the candidate with the best mean validation accuracy over source holdouts.

    ``candidates`` is a list of ``(checkpoint, config)``; ``sources_with_holdout``
    a list of ``(train, validation)`` pairs, of which only the validation
    halves are read. Ties go to lower mean validation cross-entropy, then to
    the earlier candidate. Returns ``(index, checkpoint)``.
    """
    if not candidates:
        raise InvalidArgument("no candidates to select from")
    holdouts = [val for _, val in sources_with_holdout]
    best_i, best_key = 0, None
    for i, (ckpt, _) in enumerate(candidates):
        acc, ce = _mean_scores(ckpt.classifier, holdouts)
        key = (acc, -ce)
        if best_key is None or key > best_key:
            best_i, best_key = i, key
    return best_i, candidates[best_i][0]


def gamma_grid(exponents: Sequence[int] = GAMMA_EXPONENTS) -> list[float]:
    """{10^i, 0.5 * 10^i} for each exponent, in order."""
    if len(exponents) == 0:
        raise InvalidArgument("gamma grid is empty")
    out = []
    for i in exponents:
        out += [10.0 ** i, 0.5 * 10.0 ** i]
    return out


@dataclass
class SweepResult:
    rows: list[dict]
    selected_index: int
    checkpoints: list[Checkpoint]
    runs: list[RunResult]

    @property
    def selected(self) -> Checkpoint:
        return self.checkpoints[self.selected_index]

    @property
    def selected_gamma(self) -> float:
        return self.rows[self.selected_index]["gamma"]


def _sweep_cell(args):
    h0, train, cfg = args
    return finetune_ftlp(h0, train, cfg)


def gamma_sweep(h0: Checkpoint, sources: Sequence[DomainDataset], base_cfg: TrainConfig,
                grid_exponents: Sequence[int] = GAMMA_EXPONENTS, gammas: Sequence[float] | None = None,
                target: DomainDataset | None = None, holdout_fraction: float = 0.2,
                jobs: int = 1) -> SweepResult:
    """Fine-tune once per gamma and select on source-domain validation only.

    Each source is split 80/20 (by ``base_cfg.seed``) into train/validation.
    Target metrics, when a target is given, are computed after the selection
    is fixed and never feed into it.
    """
    gammas = list(gammas) if gammas is not None else gamma_grid(grid_exponents)
    if not gammas:
        raise InvalidArgument("gamma grid is empty")
    splits = [split_holdout(s, holdout_fraction, base_cfg.seed + i) for i, s in enumerate(sources)]
    train = [t for t, _ in splits]
    cells = [(h0, train, replace(base_cfg, gamma=float(g))) for g in gammas]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_sweep_cell, cells))
    else:
        results = [_sweep_cell(c) for c in cells]

    candidates = [(ck, c[2]) for (ck, _), c in zip(results, cells)]
    idx, _ = select_by_training_domain_validation(candidates, splits)
    rows = []
    for i, ((ck, run), g) in enumerate(zip(results, gammas)):
        val_acc, val_ce = _mean_scores(ck.classifier, [v for _, v in splits])
        row = {"gamma": float(g), "val_acc": val_acc, "val_ce": val_ce,
               "final_total": run.records[-1].total if run.records else float("nan"),
               "selected": i == idx}
        rows.append(row)
    if target is not None:
        for row, (ck, _) in zip(rows, results):
            row["target_acc"], row["target_ce"] = evaluate(ck, target)
    return SweepResult(rows, idx, [r[0] for r in results], [r[1] for r in results])


def displacement(ckpt: Checkpoint, h0: Checkpoint, include_last: bool = False) -> float:
    """||h - h0|| over the non-task layers (or all layers)."""
    diff = ckpt.params.values - h0.params.values
    if not include_last:
        diff = diff[:ckpt.arch.layout[-1].offset]
    return float(np.linalg.norm(diff))


def feature_weight_ratio(ckpt: Checkpoint, data, eps: float = 1e-12) -> float:
    """Mean |d margin / d x_inv| over mean |d margin / d x_sup| on ``data``.

    The margin is logit[1] - logit[0]; input derivatives are taken by central
    differences, which is exact for piecewise-linear and linear models. For a
    linear model this is |W_inv| / |W_sup| of the margin weights.
    """
    x = np.asarray(data.features, dtype=np.float64)
    clf = ckpt.classifier
    grads = []
    for j in range(x.shape[1]):
        step = np.zeros(x.shape[1])
        step[j] = 1e-4
        up = forward(clf, x + step)
        dn = forward(clf, x - step)
        grads.append(np.mean(np.abs(((up[:, 1] - up[:, 0]) - (dn[:, 1] - dn[:, 0])) / 2e-4)))
    return grads[0] / (grads[1] + eps)


def make_posterior_rule(arch: Architecture, cfg: TrainConfig, variance: float,
                        init: ParamVector | None = None):
    """A learning rule data -> N(trained weights, variance * I).

    Training is ERM with ``cfg`` from ``init`` (or a seeded random init).
    """
    def rule(data: DomainDataset, seed: int) -> DiagonalGaussian:
        start = init if init is not None else init_params(arch, seed)
        h0 = Checkpoint(arch, start, _fresh_encoder(arch, cfg))
        ckpt, _ = finetune_ftlp(h0, [data], replace(cfg, seed=int(seed), gamma=0.0))
        return DiagonalGaussian(ckpt.params, np.full(arch.param_count, variance))
    return rule
