"""Group space, probabilistic group labels, and the two pseudo-labelers.

A group is a (class, environment) pair with flat index ``g = y * |E| + e``.
Soft group labels ``Q`` put a sample's environment distribution on the
groups of its own class and exact zeros everywhere else.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from pgdro import numerics
from pgdro.data import Dataset, LabeledSubset, frequency_weighted_indices

ROW_SUM_TOL = 1e-9


@dataclass(frozen=True)
class GroupSpace:
    num_classes: int
    num_envs: int

    def __post_init__(self):
        if self.num_classes < 1 or self.num_envs < 1:
            raise ValueError(f"need >= 1 class and env, got {self.num_classes}, {self.num_envs}")

    @property
    def num_groups(self) -> int:
        return self.num_classes * self.num_envs

    def index(self, y, e):
        y_arr, e_arr = np.asarray(y), np.asarray(e)
        if np.any((y_arr < 0) | (y_arr >= self.num_classes)):
            raise ValueError(f"class index out of range [0, {self.num_classes}): {y}")
        if np.any((e_arr < 0) | (e_arr >= self.num_envs)):
            raise ValueError(f"env index out of range [0, {self.num_envs}): {e}")
        g = y_arr * self.num_envs + e_arr
        return int(g) if g.ndim == 0 else g

    def components(self, g):
        g_arr = np.asarray(g)
        if np.any((g_arr < 0) | (g_arr >= self.num_groups)):
            raise ValueError(f"group index out of range [0, {self.num_groups}): {g}")
        y, e = np.divmod(g_arr, self.num_envs)
        if g_arr.ndim == 0:
            return int(y), int(e)
        return y, e

    def label(self, g) -> str:
        y, e = self.components(g)
        return f"y={y},e={e}"

    @classmethod
    def for_dataset(cls, data: Dataset) -> "GroupSpace":
        if data.num_envs is None:
            raise ValueError("dataset has no environment annotations")
        return cls(data.num_classes, data.num_envs)


def check_distribution_rows(P, what: str = "probabilities", tol: float = ROW_SUM_TOL) -> np.ndarray:
    P = np.asarray(P, dtype=np.float64)
    if P.ndim != 2:
        raise ValueError(f"{what} must be a 2-D array, got shape {P.shape}")
    if not np.all(np.isfinite(P)):
        i = int(np.flatnonzero(~np.isfinite(P).all(axis=1))[0])
        raise ValueError(f"{what}: row {i} has non-finite entries")
    neg = np.flatnonzero((P < 0).any(axis=1))
    if neg.size:
        raise ValueError(f"{what}: row {int(neg[0])} has negative entries")
    off = np.flatnonzero(np.abs(P.sum(axis=1) - 1.0) > tol)
    if off.size:
        i = int(off[0])
        raise ValueError(f"{what}: row {i} sums to {P[i].sum()!r}, not 1")
    return P


def env_to_group_probs(env_probs, y, space: GroupSpace) -> np.ndarray:
    """Lift ``P(e | x_i)`` to soft group labels: ``Q[i, (y_i, e)] = P[i, e]``, zero elsewhere."""
    P = check_distribution_rows(env_probs, "env probabilities")
    y = np.asarray(y, dtype=np.int64)
    if P.shape[1] != space.num_envs:
        raise ValueError(f"env probabilities have {P.shape[1]} columns, expected {space.num_envs}")
    if y.shape != (P.shape[0],):
        raise ValueError(f"labels have shape {y.shape}, expected ({P.shape[0]},)")
    if np.any((y < 0) | (y >= space.num_classes)):
        raise ValueError(f"labels outside [0, {space.num_classes})")
    Q = np.zeros((P.shape[0], space.num_groups))
    cols = y[:, None] * space.num_envs + np.arange(space.num_envs)[None, :]
    Q[np.arange(P.shape[0])[:, None], cols] = P
    return Q


def one_hot(groups, num_groups: int) -> np.ndarray:
    groups = np.asarray(groups, dtype=np.int64)
    if np.any((groups < 0) | (groups >= num_groups)):
        raise ValueError(f"group indices outside [0, {num_groups})")
    Q = np.zeros((len(groups), num_groups))
    Q[np.arange(len(groups)), groups] = 1.0
    return Q


def harden(Q) -> np.ndarray:
    """Argmax group per row; ties go to the lowest index."""
    return np.argmax(np.asarray(Q), axis=1)


def apply_floor(P, eps: float) -> np.ndarray:
    """Mix each row toward uniform so every entry is at least ``eps``; ``eps=0`` is a no-op."""
    P = np.asarray(P, dtype=np.float64)
    if eps == 0:
        return P
    k = P.shape[1]
    if not 0 < eps <= 1.0 / k:
        raise ValueError(f"floor must lie in (0, 1/{k}], got {eps}")
    lam = eps * k
    return (1.0 - lam) * P + lam / k


# ---------------------------------------------------------------------------
# supervised pseudo-labeler

@dataclass
class EnvClassifierConfig:
    hidden_sizes: tuple = (16, 16, 16)
    epochs: int = 200
    batch_size: int = 32
    epoch_len: int | None = None  # draws per epoch; defaults to the subset size
    lr: float = 0.1
    l2: float = 1e-4
    seed: int = 0


def train_env_classifier(subset: LabeledSubset, parent: Dataset,
                         cfg: EnvClassifierConfig | None = None) -> numerics.Network:
    """Fit a network predicting env from features on the group-labeled subset.

    Minibatches are drawn with :func:`frequency_weighted_indices`, so every
    (y, env) group present in the subset contributes equally. Trains for a
    fixed number of epochs; no validation-based selection.
    """
    cfg = cfg or EnvClassifierConfig()
    if subset.m == 0:
        raise ValueError("labeled subset is empty")
    if parent.env is None:
        raise ValueError("parent dataset has no environment annotations")
    envs = parent.env[subset.indices]
    missing = sorted(set(range(parent.num_envs)) - set(envs.tolist()))
    if missing:
        raise ValueError(f"labeled subset has no samples of environment(s) {missing}; "
                         f"the classifier cannot cover every environment")

    rng = np.random.default_rng(cfg.seed)
    init_seed, draw_seed = rng.integers(0, 2**63, size=2)
    net = numerics.init_network([parent.d, *cfg.hidden_sizes, parent.num_envs], init_seed)
    epoch_len = cfg.epoch_len or subset.m
    draws = frequency_weighted_indices(subset, parent, epoch_len * cfg.epochs, draw_seed)
    for start in range(0, len(draws), cfg.batch_size):
        idx = draws[start:start + cfg.batch_size]
        w = np.full(len(idx), 1.0 / len(idx))
        grads = numerics.backward(net, parent.X[idx], parent.env[idx], w)
        net = numerics.sgd_step(net, grads, cfg.lr, cfg.l2)
    return net


def predict_env_probs(net: numerics.Network, X, num_envs: int | None = None) -> np.ndarray:
    if num_envs is not None and net.num_classes != num_envs:
        raise numerics.DimensionError("env classifier outputs", num_envs, net.num_classes)
    return numerics.softmax(numerics.forward(net, X))


# ---------------------------------------------------------------------------
# zero-shot labeler

@dataclass
class EmbeddingSet:
    """Precomputed input embeddings plus one prototype embedding per environment."""

    inputs: np.ndarray
    prototypes: np.ndarray
    temperature: float = 0.01

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.prototypes = np.asarray(self.prototypes, dtype=np.float64)
        if self.inputs.ndim != 2 or self.prototypes.ndim != 2:
            raise ValueError("embeddings and prototypes must be 2-D")
        if self.inputs.shape[1] != self.prototypes.shape[1]:
            raise numerics.DimensionError("embedding width", self.prototypes.shape[1],
                                          self.inputs.shape[1])
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        for name, M in (("input", self.inputs), ("prototype", self.prototypes)):
            zero = np.flatnonzero(np.linalg.norm(M, axis=1) == 0)
            if zero.size:
                raise ValueError(f"{name} embedding row {int(zero[0])} has zero norm; "
                                 f"cosine similarity is undefined")


def cosine_similarity(A, B) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    A = A / np.linalg.norm(A, axis=1, keepdims=True)
    B = B / np.linalg.norm(B, axis=1, keepdims=True)
    return A @ B.T


def zero_shot_env_probs(emb: EmbeddingSet) -> np.ndarray:
    """Temperature softmax over cosine similarity to each environment prototype."""
    return numerics.softmax(cosine_similarity(emb.inputs, emb.prototypes) / emb.temperature)


# ---------------------------------------------------------------------------
# files

def save_group_probs(Q, path) -> None:
    Q = np.asarray(Q, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index"] + [f"q{g}" for g in range(Q.shape[1])])
        for i, row in enumerate(Q):
            w.writerow([i] + [repr(float(v)) for v in row])


def _read_indexed_matrix(path, key: str, prefix: str) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        rows = list(reader)
    k = len(header) - 1
    expected = [key] + [f"{prefix}{j}" for j in range(k)]
    if k < 1 or header != expected:
        raise ValueError(f"{path}: header must be {key},{prefix}0,...; got {','.join(header)}")
    keys = np.empty(len(rows), dtype=np.int64)
    M = np.empty((len(rows), k))
    for i, row in enumerate(rows):
        if len(row) != k + 1:
            raise ValueError(f"{path}:{i + 2}: expected {k + 1} cells, got {len(row)}")
        try:
            keys[i] = int(row[0])
            M[i] = [float(c) for c in row[1:]]
        except ValueError as exc:
            raise ValueError(f"{path}:{i + 2}: {exc}") from None
    return keys, M


def load_group_probs(path, space: GroupSpace | None = None, y=None) -> np.ndarray:
    """Read and validate a ``index,q0,...`` file; with ``y`` also checks the class-support zeros."""
    idx, Q = _read_indexed_matrix(path, "index", "q")
    if not np.array_equal(idx, np.arange(len(idx))):
        raise ValueError(f"{path}: index column must run 0..{len(idx) - 1} in order")
    if space is not None and Q.shape[1] != space.num_groups:
        raise ValueError(f"{path}: {Q.shape[1]} group columns, expected {space.num_groups}")
    check_distribution_rows(Q, f"{path}")
    if y is not None:
        check_support(Q, y, space)
    return Q


def check_support(Q, y, space: GroupSpace) -> None:
    """Raise unless ``Q[i, g] == 0`` whenever group g belongs to a class other than ``y[i]``."""
    Q = np.asarray(Q)
    cls_of_group = np.arange(space.num_groups) // space.num_envs
    mask = cls_of_group[None, :] != np.asarray(y)[:, None]
    bad = np.flatnonzero((Q * mask != 0).any(axis=1))
    if bad.size:
        raise ValueError(f"group probabilities row {int(bad[0])} puts mass on another class's group")


def load_embeddings(path) -> np.ndarray:
    idx, M = _read_indexed_matrix(path, "index", "e")
    if not np.array_equal(idx, np.arange(len(idx))):
        raise ValueError(f"{path}: index column must run 0..{len(idx) - 1} in order")
    return M


def load_prototypes(path) -> np.ndarray:
    env, M = _read_indexed_matrix(path, "env", "e")
    if not np.array_equal(np.sort(env), np.arange(len(env))):
        raise ValueError(f"{path}: env column must list 0..{len(env) - 1} once each")
    return M[np.argsort(env)]


def save_embeddings(M, path, key: str = "index") -> None:
    M = np.asarray(M, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([key] + [f"e{j}" for j in range(M.shape[1])])
        for i, row in enumerate(M):
            w.writerow([i] + [repr(float(v)) for v in row])
