"""Datasets and their CSV format, plus the two-feature spurious-correlation benchmark.

Labels and environments are stored as class indices ``0..K-1``. For the
synthetic benchmark the signed values map as ``-1 -> 0`` and ``+1 -> 1``.

Gaussian draws use numpy's ``Generator(PCG64)`` (``standard_normal`` is a
ziggurat sampler), so statistics are reproducible per seed.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

SPLIT_NAMES = ("train", "val", "test")


@dataclass
class Dataset:
    """Feature matrix with class labels and optional environment/split annotations."""

    X: np.ndarray
    y: np.ndarray
    env: np.ndarray | None = None
    split: np.ndarray | None = None
    num_classes: int | None = None
    num_envs: int | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim == 1 and self.X.size == 0:
            self.X = self.X.reshape(0, 0)
        if self.X.ndim != 2:
            raise ValueError(f"X must be 2-D, got shape {self.X.shape}")
        n = self.X.shape[0]
        self.y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        if self.y.shape != (n,):
            raise ValueError(f"y has length {self.y.shape[0]}, X has {n} rows")
        if self.env is not None:
            self.env = np.asarray(self.env, dtype=np.int64).reshape(-1)
            if self.env.shape != (n,):
                raise ValueError(f"env has length {self.env.shape[0]}, X has {n} rows")
        if self.split is not None:
            self.split = np.asarray(self.split, dtype=object).reshape(-1)
            if self.split.shape != (n,):
                raise ValueError(f"split has length {self.split.shape[0]}, X has {n} rows")
        if not np.all(np.isfinite(self.X)):
            raise ValueError("X contains non-finite entries")
        if self.num_classes is None:
            self.num_classes = int(self.y.max()) + 1 if n else 0
        if self.env is not None and self.num_envs is None:
            self.num_envs = int(self.env.max()) + 1 if n else 0
        _check_range("label", self.y, self.num_classes)
        if self.env is not None:
            _check_range("env", self.env, self.num_envs)

    @property
    def N(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def has_env(self) -> bool:
        return self.env is not None

    def groups(self, num_envs: int | None = None) -> np.ndarray:
        """Hard group index ``y * |E| + env`` per row."""
        if self.env is None:
            raise ValueError("dataset has no environment annotations")
        return self.y * (num_envs or self.num_envs) + self.env

    def take(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.intp)
        return Dataset(
            self.X[idx],
            self.y[idx],
            None if self.env is None else self.env[idx],
            None if self.split is None else self.split[idx],
            self.num_classes,
            self.num_envs,
        )

    def select_split(self, name: str) -> "Dataset":
        if self.split is None:
            raise ValueError("dataset has no split column")
        return self.take(np.flatnonzero(self.split == name))


def _check_range(what: str, values: np.ndarray, k: int) -> None:
    bad = np.flatnonzero((values < 0) | (values >= k))
    if bad.size:
        i = int(bad[0])
        raise ValueError(f"{what} {values[i]} at row {i} outside [0, {k})")


# ---------------------------------------------------------------------------
# synthetic benchmark

@dataclass(frozen=True)
class SyntheticParams:
    n: int = 4000
    p: float = 0.95
    sigma2_inv: float = 0.5
    sigma2_e: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.n < 4:
            raise ValueError(f"n must be >= 4, got {self.n}")
        if not 0.0 < self.p < 1.0:
            raise ValueError(f"p must lie in (0, 1), got {self.p}")
        if self.sigma2_inv <= 0 or self.sigma2_e <= 0:
            raise ValueError("variances must be positive")

    def group_sizes(self) -> np.ndarray:
        """Sizes of groups (y, e) in index order (0,0), (0,1), (1,0), (1,1).

        ``n_maj = floor(p * n + 1/2)``; each pair splits evenly and an odd
        remainder goes to the lower group index of the pair.
        """
        n_maj = math.floor(self.p * self.n + 0.5)
        n_min = self.n - n_maj
        sizes = np.array([
            n_maj - n_maj // 2,  # (y=-1, e=-1) majority
            n_min - n_min // 2,  # (y=-1, e=+1) minority
            n_min // 2,          # (y=+1, e=-1) minority
            n_maj // 2,          # (y=+1, e=+1) majority
        ])
        if sizes.min() == 0:
            raise ValueError(
                f"n={self.n}, p={self.p} leaves an empty group (sizes {sizes.tolist()})")
        return sizes


def sample_groups(group_sizes: Sequence[int], sigma2_inv: float, sigma2_e: float,
                  seed) -> Dataset:
    """Draw ``x = [z_inv, z_e]`` with ``z_inv ~ N(y, s_inv^2)``, ``z_e ~ N(e, s_e^2)``.

    ``group_sizes`` lists counts for groups (y, e) in index order; rows are
    shuffled before returning.
    """
    sizes = np.asarray(group_sizes, dtype=np.int64)
    if sizes.shape != (4,) or np.any(sizes < 0):
        raise ValueError(f"need four nonnegative group sizes, got {group_sizes}")
    rng = np.random.default_rng(seed)
    g = np.repeat(np.arange(4), sizes)
    y = g // 2
    env = g % 2
    sign_y = 2.0 * y - 1.0
    sign_e = 2.0 * env - 1.0
    z_inv = sign_y + math.sqrt(sigma2_inv) * rng.standard_normal(len(g))
    z_e = sign_e + math.sqrt(sigma2_e) * rng.standard_normal(len(g))
    order = rng.permutation(len(g))
    X = np.column_stack([z_inv, z_e])[order]
    return Dataset(X, y[order], env[order], num_classes=2, num_envs=2)


def generate_synthetic(params: SyntheticParams) -> Dataset:
    return sample_groups(params.group_sizes(), params.sigma2_inv, params.sigma2_e, params.seed)


def generate_balanced(per_group: int, sigma2_inv: float, sigma2_e: float, seed) -> Dataset:
    """Same feature model with every group the same size (validation / test sets)."""
    if per_group < 1:
        raise ValueError("per_group must be >= 1")
    return sample_groups([per_group] * 4, sigma2_inv, sigma2_e, seed)


# ---------------------------------------------------------------------------
# CSV

def save_csv(dataset: Dataset, path) -> None:
    """Write ``f0..f{d-1},label[,env][,split]``; floats use ``repr`` so reload is exact."""
    if dataset.N == 0:
        raise ValueError("refusing to write an empty dataset")
    header = [f"f{j}" for j in range(dataset.d)] + ["label"]
    if dataset.env is not None:
        header.append("env")
    if dataset.split is not None:
        header.append("split")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(dataset.N):
            row = [repr(float(v)) for v in dataset.X[i]] + [int(dataset.y[i])]
            if dataset.env is not None:
                row.append(int(dataset.env[i]))
            if dataset.split is not None:
                row.append(dataset.split[i])
            w.writerow(row)


def load_csv(path, num_classes: int | None = None, num_envs: int | None = None) -> Dataset:
    """Read a dataset CSV; ``num_classes``/``num_envs`` bound the allowed index values."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        rows = list(reader)
    if "label" not in header:
        raise ValueError(f"{path}: missing required column 'label'")
    feat_cols = [j for j, h in enumerate(header) if h.startswith("f") and h[1:].isdigit()]
    if not feat_cols:
        raise ValueError(f"{path}: no feature columns (f0, f1, ...)")
    expected = [f"f{j}" for j in range(len(feat_cols))]
    if [header[j] for j in feat_cols] != expected:
        raise ValueError(f"{path}: feature columns must be {expected}")
    unknown = set(header) - set(expected) - {"label", "env", "split"}
    if unknown:
        raise ValueError(f"{path}: unknown columns {sorted(unknown)}")
    lab_col = header.index("label")
    env_col = header.index("env") if "env" in header else None
    split_col = header.index("split") if "split" in header else None

    n = len(rows)
    X = np.empty((n, len(feat_cols)))
    y = np.empty(n, dtype=np.int64)
    env = np.empty(n, dtype=np.int64) if env_col is not None else None
    split = np.empty(n, dtype=object) if split_col is not None else None
    for i, row in enumerate(rows):
        line = i + 2
        if len(row) != len(header):
            raise ValueError(f"{path}:{line}: expected {len(header)} cells, got {len(row)}")
        for k, j in enumerate(feat_cols):
            try:
                X[i, k] = float(row[j])
            except ValueError:
                raise ValueError(f"{path}:{line}: column {header[j]!r}: "
                                 f"cannot parse {row[j]!r} as a number") from None
        y[i] = _parse_index(path, line, "label", row[lab_col])
        if env is not None:
            env[i] = _parse_index(path, line, "env", row[env_col])
        if split is not None:
            if row[split_col] not in SPLIT_NAMES:
                raise ValueError(f"{path}:{line}: split must be one of {SPLIT_NAMES}, "
                                 f"got {row[split_col]!r}")
            split[i] = row[split_col]
    if num_classes is not None and n:
        bad = np.flatnonzero(y >= num_classes)
        if bad.size:
            raise ValueError(f"{path}:{int(bad[0]) + 2}: label {y[bad[0]]} outside "
                             f"declared class count {num_classes}")
    if num_envs is not None and env is not None and n:
        bad = np.flatnonzero(env >= num_envs)
        if bad.size:
            raise ValueError(f"{path}:{int(bad[0]) + 2}: env {env[bad[0]]} outside "
                             f"declared environment count {num_envs}")
    return Dataset(X, y, env, split, num_classes, num_envs)


def _parse_index(path, line, col, cell) -> int:
    try:
        v = int(cell)
    except ValueError:
        raise ValueError(f"{path}:{line}: column {col!r}: cannot parse {cell!r} "
                         f"as an integer") from None
    if v < 0:
        raise ValueError(f"{path}:{line}: column {col!r}: negative index {v}")
    return v


# ---------------------------------------------------------------------------
# splitting and labeled subsets

def _stratum(dataset: Dataset) -> np.ndarray:
    return dataset.groups() if dataset.env is not None else dataset.y


def split(dataset: Dataset, fractions=(0.6, 0.2, 0.2), seed=0) -> tuple[Dataset, Dataset, Dataset]:
    """Stratified train/val/test split.

    Rows of each group (or each class, without env) are shuffled and cut by
    the same fractions. Cut points are rounded on the running total across
    groups, so the split sizes match the global fractions and each group
    differs from its exact share by less than one row.
    """
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or np.any(fr < 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three nonnegative reals summing to 1, got {fractions}")
    active = np.flatnonzero(fr > 0)
    rng = np.random.default_rng(seed)
    strata = _stratum(dataset)
    bounds = np.cumsum(fr)[:-1]
    parts = [[], [], []]
    seen = 0
    for g in np.unique(strata):
        rows = np.flatnonzero(strata == g)
        if len(rows) < len(active):
            raise ValueError(f"group {g} has {len(rows)} rows, fewer than the "
                             f"{len(active)} nonempty splits")
        rows = rows[rng.permutation(len(rows))]
        before = np.floor(bounds * seen + 0.5).astype(int)
        after = np.floor(bounds * (seen + len(rows)) + 0.5).astype(int)
        a, c = np.clip(after - before, 0, len(rows))
        c = max(a, c)
        counts = _ensure_each_active(np.array([a, c - a, len(rows) - c]), active)
        edges = np.concatenate([[0], np.cumsum(counts)])
        for k in range(3):
            parts[k].append(rows[edges[k]:edges[k + 1]])
        seen += len(rows)
    return tuple(dataset.take(np.sort(np.concatenate(p))) for p in parts)


def _ensure_each_active(counts: np.ndarray, active: np.ndarray) -> np.ndarray:
    # a positive-fraction split never ends up without rows of a group
    counts = counts.copy()
    for k in active:
        if counts[k] == 0:
            donor = int(np.argmax(counts))
            counts[donor] -= 1
            counts[k] += 1
    return counts


@dataclass(frozen=True)
class LabeledSubset:
    """Indices of the group-annotated rows of a parent dataset."""

    indices: np.ndarray = field(repr=False)

    @property
    def m(self) -> int:
        return len(self.indices)

    def take(self, parent: Dataset) -> Dataset:
        return parent.take(self.indices)


def subsample_labeled(dataset: Dataset, m: int, seed) -> LabeledSubset:
    """Uniform sample of ``m`` distinct rows (sorted) that keep their env labels."""
    if dataset.env is None:
        raise ValueError("cannot form the group-labeled subset without environment annotations")
    if not 0 < m <= dataset.N:
        raise ValueError(f"m must be in [1, {dataset.N}], got {m}")
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(dataset.N, size=m, replace=False))
    return LabeledSubset(idx)


def frequency_weighted_indices(subset: LabeledSubset, parent: Dataset, size: int,
                               seed) -> np.ndarray:
    """Draw ``size`` parent indices from the subset with replacement.

    Each member is picked with probability proportional to one over the size
    of its (y, env) group inside the subset, so every occurring group is
    drawn equally often in expectation.
    """
    groups = parent.groups()[subset.indices]
    _, inverse, counts = np.unique(groups, return_inverse=True, return_counts=True)
    prob = 1.0 / counts[inverse]
    prob /= prob.sum()
    rng = np.random.default_rng(seed)
    return subset.indices[rng.choice(subset.m, size=size, replace=True, p=prob)]
