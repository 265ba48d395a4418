"""Toy two-feature environments with an invariant and a spurious feature.

Variant A: ``x_inv`` uniform on {0, 0.2, ..., 1}, ``y = [x_inv > 1/2]`` and
``x_sup = W * x_inv`` with ``W ~ Bernoulli(1 - p_e)``.

Variant B: ``x_inv ~ N(1/k, 1)``, ``y = [x_inv > 1/k]`` and
``x_sup = W * x_inv + e / n_envs``.

Every dataset carries the spec that generated it, so ``regenerate(ds)``
reproduces it bit-for-bit.
"""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core_math import InvalidArgument
from .model import Batch

GRID_A = np.array([0.0, 0.2, 0.4, 0.6, 0.8, 1.0])
COLUMNS = ("x_inv", "x_sup")


@dataclass(frozen=True)
class ToyEnvSpecA:
    p_e: float
    n: int
    seed: int = 0
    env_id: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p_e <= 1.0:
            raise InvalidArgument("p_e must lie in [0, 1]")
        if self.n < 1:
            raise InvalidArgument("n must be positive")


@dataclass(frozen=True)
class ToyEnvSpecB:
    k: float
    e: int
    n_envs: int
    p_e: float
    n: int
    seed: int = 0
    env_id: int | None = None

    def __post_init__(self):
        if abs(self.k) <= 1 or self.k == 2:
            raise InvalidArgument("variant B needs |k| > 1 and k != 2")
        if not 1 <= self.e <= self.n_envs:
            raise InvalidArgument("environment index must satisfy 1 <= e <= n_envs")
        if not 0.0 <= self.p_e <= 1.0:
            raise InvalidArgument("p_e must lie in [0, 1]")
        if self.n < 1:
            raise InvalidArgument("n must be positive")


@dataclass(frozen=True, eq=False)
class DomainDataset:
    features: np.ndarray
    labels: np.ndarray
    env_id: int = 0
    gen_spec: dict = field(default_factory=dict)
    columns: tuple[str, ...] = COLUMNS

    def __post_init__(self):
        x = np.array(self.features, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        y = np.array(self.labels, dtype=np.int64).reshape(-1)
        if len(y) < 1 or len(x) != len(y):
            raise InvalidArgument("dataset needs n >= 1 rows with one label each")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return len(self.labels)

    def __eq__(self, other):
        if not isinstance(other, DomainDataset):
            return NotImplemented
        return (self.env_id == other.env_id and np.array_equal(self.features, other.features)
                and np.array_equal(self.labels, other.labels))

    @property
    def env_ids(self) -> np.ndarray:
        return np.full(len(self), self.env_id, dtype=np.int64)

    def subset(self, idx) -> "DomainDataset":
        idx = np.asarray(idx)
        spec = dict(self.gen_spec)
        spec["subset_of"] = spec.get("variant", "unknown")
        return DomainDataset(self.features[idx], self.labels[idx], self.env_id, spec, self.columns)

    def to_batch(self) -> Batch:
        return Batch(self.features, self.labels, self.env_ids)


def _indicator(t: np.ndarray) -> np.ndarray:
    return (t > 0).astype(np.int64)


def gen_variant_a(spec: ToyEnvSpecA) -> DomainDataset:
    rng = np.random.default_rng(spec.seed)
    x_inv = GRID_A[rng.integers(0, GRID_A.size, spec.n)]
    w = (rng.random(spec.n) < 1.0 - spec.p_e).astype(np.float64)
    x_sup = w * x_inv
    y = _indicator(x_inv - 0.5)
    return DomainDataset(np.column_stack([x_inv, x_sup]), y, spec.env_id,
                         {"variant": "A", **asdict(spec)})


def gen_variant_b(spec: ToyEnvSpecB) -> DomainDataset:
    rng = np.random.default_rng(spec.seed)
    x_inv = rng.normal(1.0 / spec.k, 1.0, spec.n)
    w = (rng.random(spec.n) < 1.0 - spec.p_e).astype(np.float64)
    x_sup = w * x_inv + spec.e / spec.n_envs
    y = _indicator(x_inv - 1.0 / spec.k)
    env_id = spec.e if spec.env_id is None else spec.env_id
    return DomainDataset(np.column_stack([x_inv, x_sup]), y, env_id,
                         {"variant": "B", **asdict(spec)})


def gen_pretrain_corpus(n_envs: int, per_env: int, k: float, p_schedule: Sequence[float],
                        seed: int) -> list[DomainDataset]:
    """One variant-B environment per index e = 1..n_envs (the D0 surrogate)."""
    if len(p_schedule) != n_envs:
        raise InvalidArgument("p_schedule must have one entry per environment")
    seeds = np.random.SeedSequence(seed).spawn(n_envs)
    return [
        gen_variant_b(ToyEnvSpecB(k, e + 1, n_envs, float(p), per_env,
                                  int(s.generate_state(1)[0])))
        for e, (p, s) in enumerate(zip(p_schedule, seeds))
    ]


def regenerate(ds: DomainDataset) -> DomainDataset:
    spec = dict(ds.gen_spec)
    variant = spec.pop("variant", None)
    if "subset_of" in spec:
        raise InvalidArgument("subsets cannot be regenerated from their spec alone")
    if variant == "A":
        return gen_variant_a(ToyEnvSpecA(**spec))
    if variant == "B":
        return gen_variant_b(ToyEnvSpecB(**spec))
    raise InvalidArgument(f"no generator recorded for variant {variant!r}")


def relabel(ds: DomainDataset) -> np.ndarray:
    """Labels re-derived from the x_inv column and the recorded rule."""
    variant = ds.gen_spec.get("variant")
    threshold = 0.5 if variant == "A" else 1.0 / ds.gen_spec["k"]
    return _indicator(ds.features[:, 0] - threshold)


def leave_one_out(datasets: Sequence[DomainDataset], target_index: int):
    """Split into (sources, target), keeping source order."""
    if len(datasets) < 2:
        raise InvalidArgument("leave-one-out needs at least two domains")
    if not 0 <= target_index < len(datasets):
        raise InvalidArgument(f"target index {target_index} out of range")
    sources = [d for i, d in enumerate(datasets) if i != target_index]
    return sources, datasets[target_index]


def pool(datasets: Sequence[DomainDataset]) -> Batch:
    """Concatenate datasets into one batch, keeping env ids."""
    return Batch(np.concatenate([d.features for d in datasets]),
                 np.concatenate([d.labels for d in datasets]),
                 np.concatenate([d.env_ids for d in datasets]))


def split_holdout(ds: DomainDataset, fraction: float = 0.2, seed: int = 0):
    """Random (train, validation) split with ``fraction`` held out."""
    if not 0.0 < fraction < 1.0:
        raise InvalidArgument("holdout fraction must lie in (0, 1)")
    n_val = int(round(fraction * len(ds)))
    if n_val < 1 or n_val >= len(ds):
        raise InvalidArgument("holdout split leaves an empty side")
    perm = np.random.default_rng(seed).permutation(len(ds))
    return ds.subset(np.sort(perm[n_val:])), ds.subset(np.sort(perm[:n_val]))


def write_csv(ds: DomainDataset, path) -> None:
    """Columns ``x_inv, x_sup, label, env_id``; floats at 17 significant digits."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([*ds.columns, "label", "env_id"])
        for row, y in zip(ds.features, ds.labels):
            w.writerow([format(v, ".17g") for v in row] + [int(y), ds.env_id])


def read_csv(path) -> DomainDataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise InvalidArgument(f"{path}: empty file")
    header = rows[0]
    if header[-2:] != ["label", "env_id"] or len(header) < 3:
        raise InvalidArgument(f"{path}: header must end with label, env_id")
    body = rows[1:]
    if not body:
        raise InvalidArgument(f"{path}: no data rows")
    x = np.array([[float(v) for v in r[:-2]] for r in body])
    y = np.array([int(r[-2]) for r in body])
    envs = {int(r[-1]) for r in body}
    if len(envs) != 1:
        raise InvalidArgument(f"{path}: a dataset file holds exactly one environment")
    return DomainDataset(x, y, envs.pop(), {"variant": "file", "path": str(Path(path))},
                         tuple(header[:-2]))
