"""The shared training loop for every objective, plus the synthetic benchmark pipeline.

Model selection follows the worst-group rule: after every epoch the model
is evaluated on a group-annotated validation set, and the checkpoint with
the highest validation worst-group accuracy (earliest on ties) is returned.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from pgdro import data as data_mod
from pgdro import grouping, numerics, objectives
from pgdro.data import Dataset, SyntheticParams
from pgdro.grouping import EnvClassifierConfig, GroupSpace
from pgdro.objectives import MaxMode, Objective

# stage ids for derive_seed; changing these changes every reference number
SEED_STAGES = {
    "train_data": 0,
    "val_data": 1,
    "test_data": 2,
    "labeled_subset": 3,
    "env_classifier": 4,
    "model": 5,
}


def derive_seed(master: int, stage: str | int) -> int:
    """Counter-based child seed: first word of ``SeedSequence([master, stage_id])``."""
    sid = SEED_STAGES[stage] if isinstance(stage, str) else int(stage)
    return int(np.random.SeedSequence([int(master), sid]).generate_state(1, np.uint64)[0])


@dataclass
class TrainConfig:
    objective: Objective = Objective.PGDRO
    epochs: int = 300
    batch_size: int = 128
    lr: float = 0.1
    l2: float = 1e-4
    C: float = 2.0
    eta_q: float = 0.01
    hidden_sizes: tuple = (16, 16, 16)
    seed: int = 0
    max_mode: MaxMode = MaxMode.EG

    def __post_init__(self):
        self.objective = Objective(self.objective)
        self.max_mode = MaxMode(self.max_mode)
        self.hidden_sizes = tuple(int(h) for h in self.hidden_sizes)
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs must be >= 0, batch_size >= 1 and lr > 0")
        if self.C < 0 or self.l2 < 0 or self.eta_q <= 0:
            raise ValueError("C and l2 must be >= 0 and eta_q > 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["objective"] = self.objective.value
        d["max_mode"] = self.max_mode.value
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d


@dataclass
class MetricsReport:
    avg_acc: float
    worst_group_acc: float
    per_group_acc: list  # None where the group is empty
    group_counts: list

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(d["avg_acc"], d["worst_group_acc"], list(d["per_group_acc"]),
                   list(d["group_counts"]))


def group_accuracy(pred, target, groups, num_groups: int) -> MetricsReport:
    """Accuracy of ``pred`` against ``target`` overall and within each group."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    groups = np.asarray(groups, dtype=np.int64)
    correct = (pred == target).astype(np.int64)
    counts = np.bincount(groups, minlength=num_groups)
    hits = np.bincount(groups, weights=correct, minlength=num_groups)
    per_group = [float(h / c) if c else None for h, c in zip(hits, counts)]
    occupied = [a for a in per_group if a is not None]
    if not occupied:
        raise ValueError("no samples to evaluate")
    return MetricsReport(
        avg_acc=float(correct.sum() / len(correct)),
        worst_group_acc=min(occupied),
        per_group_acc=per_group,
        group_counts=[int(c) for c in counts],
    )


def predict(net: numerics.Network, X) -> np.ndarray:
    return np.argmax(numerics.forward(net, X), axis=1)


def evaluate(net: numerics.Network, data: Dataset, space: GroupSpace | None = None) -> MetricsReport:
    """Average, worst-group and per-group accuracy over ground-truth groups."""
    if data.env is None:
        raise ValueError("evaluation needs environment annotations")
    space = space or GroupSpace.for_dataset(data)
    return group_accuracy(predict(net, data.X), data.y, data.y * space.num_envs + data.env,
                          space.num_groups)


def evaluate_env_labeler(env_probs, data: Dataset, space: GroupSpace | None = None) -> MetricsReport:
    """Per-group accuracy of the hardened env prediction against the annotated env."""
    if data.env is None:
        raise ValueError("labeler evaluation needs environment annotations")
    space = space or GroupSpace.for_dataset(data)
    return group_accuracy(np.argmax(env_probs, axis=1), data.env,
                          data.y * space.num_envs + data.env, space.num_groups)


@dataclass
class EpochRecord:
    epoch: int
    objective_value: float
    train_group_risk: list
    q: list
    val: MetricsReport

    def to_dict(self) -> dict:
        d = asdict(self)
        d["val"] = self.val.to_dict()
        return d


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    selected_epoch: int | None = None

    @property
    def selected(self) -> EpochRecord | None:
        return None if self.selected_epoch is None else self.epochs[self.selected_epoch]

    def to_dict(self) -> dict:
        return {
            "selected_epoch": self.selected_epoch,
            "epochs": [e.to_dict() for e in self.epochs],
        }


def _check_val(val: Dataset, space: GroupSpace) -> None:
    if val.env is None:
        raise ValueError("validation set needs environment annotations for model selection")
    counts = np.bincount(val.y * space.num_envs + val.env, minlength=space.num_groups)
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise ValueError(f"validation group(s) {[space.label(g) for g in empty]} are empty; "
                         f"worst-group model selection is undefined")


class _GroupView:
    """Batch-level group sums and weights for either soft or hard group labels."""

    def __init__(self, cfg: TrainConfig, Q, N: int, num_groups: int):
        self.hard = None
        self.Q = None
        if cfg.objective is Objective.GDRO:
            self.hard = grouping.harden(Q)
            n_tilde = objectives.hard_group_sizes(self.hard, num_groups)
        else:
            self.Q = Q
            n_tilde = objectives.effective_group_sizes(Q)
        self.state = objectives.init_state(n_tilde, cfg.C, cfg.eta_q, cfg.objective, cfg.max_mode)

    def risks(self, losses, idx, scale: float) -> np.ndarray:
        if self.hard is not None:
            sums = objectives.hard_group_loss_sums(losses, self.hard[idx], len(self.state.q))
        else:
            sums = objectives.group_loss_sums(losses, self.Q[idx])
        return objectives.risks_from_sums(sums, self.state.n_tilde, scale)

    def weights(self, idx, scale: float) -> np.ndarray:
        if self.hard is not None:
            return objectives.hard_sample_weights(self.state, self.hard[idx], scale)
        return objectives.sample_weights(self.state, self.Q[idx], scale)

    def full_report(self, losses) -> objectives.GroupRiskReport:
        if self.hard is not None:
            return objectives.gdro_risk(losses, self.hard, self.state.C, len(self.state.q))
        return objectives.pg_dro_risk(losses, self.Q, self.state.n_tilde, self.state.C)


def train(train_data: Dataset, Q, val: Dataset, cfg: TrainConfig,
          space: GroupSpace | None = None, trace=None) -> tuple[numerics.Network, TrainHistory]:
    """Minimize the configured objective with minibatch SGD.

    ``Q`` holds soft group labels for every training row (ignored under ERM;
    hardened by argmax under GDRO). Robust objectives alternate an update of
    the group weights ``q`` on the batch's adjusted group risks with an SGD
    step on the ``q``-weighted risk. ``trace``, when given, is called as
    ``trace(step, net, info)`` after every parameter update.

    Returns the network from the epoch with the best validation worst-group
    accuracy together with the per-epoch history.
    """
    space = space or GroupSpace(train_data.num_classes, val.num_envs or train_data.num_envs)
    _check_val(val, space)
    N = train_data.N
    if N == 0:
        raise ValueError("training set is empty")
    view = None
    if cfg.objective is not Objective.ERM:
        if Q is None:
            raise ValueError(f"{cfg.objective.value} needs group probabilities")
        Q = grouping.check_distribution_rows(Q, "group probabilities")
        if Q.shape != (N, space.num_groups):
            raise ValueError(f"group probabilities have shape {Q.shape}, "
                             f"expected ({N}, {space.num_groups})")
        view = _GroupView(cfg, Q, N, space.num_groups)

    rng = np.random.default_rng(cfg.seed)
    init_seed, shuffle_seed = (int(s) for s in rng.integers(0, 2**63, size=2))
    shuffle_rng = np.random.default_rng(shuffle_seed)
    net = numerics.init_network([train_data.d, *cfg.hidden_sizes, train_data.num_classes], init_seed)
    history = TrainHistory()
    best_net, best_acc = net, -math.inf
    step = 0

    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(N)
        for start in range(0, N, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            scale = N / len(idx)
            logits, acts = numerics.forward_cached(net, train_data.X[idx])
            losses = numerics.softmax_cross_entropy(logits, train_data.y[idx])
            if view is None:
                w = np.full(len(idx), 1.0 / len(idx))
                info = None
            else:
                risks = view.risks(losses, idx, scale)
                view.state = objectives.update_group_weights(
                    view.state, risks + view.state.adjustment())
                w = view.weights(idx, scale)
                info = {"risks": risks, "q": view.state.q, "weights": w}
            grads = numerics.backward_cached(net, acts, train_data.y[idx], w)
            net = numerics.sgd_step(net, grads, cfg.lr, cfg.l2)
            step += 1
            if trace is not None:
                trace(step, net, info)

        losses = numerics.softmax_cross_entropy(numerics.forward(net, train_data.X), train_data.y)
        if view is None:
            obj_value = objectives.erm_risk(losses)
            group_risk = []
            q = []
        else:
            report = view.full_report(losses)
            obj_value = report.objective_value
            group_risk = report.per_group_risk.tolist()
            q = view.state.q.tolist()
        val_metrics = evaluate(net, val, space)
        history.epochs.append(EpochRecord(epoch, obj_value, group_risk, q, val_metrics))
        if val_metrics.worst_group_acc > best_acc:
            best_acc = val_metrics.worst_group_acc
            best_net = net
            history.selected_epoch = epoch
    return best_net, history


def decision_boundary_grid(net: numerics.Network, x_range, y_range, resolution: int) -> np.ndarray:
    """Rows ``(x1, x2, predicted class, max softmax probability)`` on a regular grid.

    ``x1`` varies fastest; there are ``resolution ** 2`` rows.
    """
    if net.layer_sizes[0] != 2:
        raise numerics.DimensionError("model input dimension", 2, net.layer_sizes[0])
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    xs = np.linspace(x_range[0], x_range[1], resolution)
    ys = np.linspace(y_range[0], y_range[1], resolution)
    g1, g2 = np.meshgrid(xs, ys)
    pts = np.column_stack([g1.ravel(), g2.ravel()])
    probs = numerics.softmax(numerics.forward(net, pts))
    return np.column_stack([pts, probs.argmax(axis=1), probs.max(axis=1)])


# ---------------------------------------------------------------------------
# synthetic pipeline

@dataclass
class PipelineConfig:
    n: int = 4000
    p: float = 0.95
    sigma2_inv: float = 0.5
    sigma2_e: float = 0.05
    m: int = 100
    val_per_group: int = 100
    test_per_group: int = 500
    env_classifier: EnvClassifierConfig = field(default_factory=EnvClassifierConfig)
    train: dict = field(default_factory=lambda: {o: TrainConfig(objective=o) for o in Objective})
    objectives: tuple = (Objective.ERM, Objective.GDRO, Objective.PGDRO)
    seed: int = 0

    def synthetic_params(self, seed: int) -> SyntheticParams:
        return SyntheticParams(self.n, self.p, self.sigma2_inv, self.sigma2_e, seed)


@dataclass
class Benchmark:
    """Everything the three objectives train on for one master seed."""

    train: Dataset
    val: Dataset
    test: Dataset
    subset: data_mod.LabeledSubset
    env_net: numerics.Network
    env_probs: np.ndarray
    Q: np.ndarray
    space: GroupSpace


def build_benchmark(cfg: PipelineConfig, seed: int | None = None) -> Benchmark:
    """Generate data, draw the labeled subset, fit the env classifier and build ``Q``."""
    seed = cfg.seed if seed is None else seed
    train_data, val, test = generate_splits(cfg, seed)
    space = GroupSpace(2, 2)
    subset, env_net, env_probs = fit_env_labeler(train_data, cfg.m, cfg.env_classifier, seed)
    Q = grouping.env_to_group_probs(env_probs, train_data.y, space)
    return Benchmark(train_data, val, test, subset, env_net, env_probs, Q, space)


def generate_splits(cfg: PipelineConfig, seed: int) -> tuple[Dataset, Dataset, Dataset]:
    """Imbalanced training set plus group-balanced validation and test sets."""
    train_data = data_mod.generate_synthetic(cfg.synthetic_params(derive_seed(seed, "train_data")))
    val = data_mod.generate_balanced(cfg.val_per_group, cfg.sigma2_inv, cfg.sigma2_e,
                                     derive_seed(seed, "val_data"))
    test = data_mod.generate_balanced(cfg.test_per_group, cfg.sigma2_inv, cfg.sigma2_e,
                                      derive_seed(seed, "test_data"))
    return train_data, val, test


def fit_env_labeler(train_data: Dataset, m: int, env_cfg: EnvClassifierConfig, seed: int):
    """Draw the labeled subset, fit the env classifier, and predict env probabilities."""
    subset = data_mod.subsample_labeled(train_data, m, derive_seed(seed, "labeled_subset"))
    env_cfg = replace(env_cfg, seed=derive_seed(seed, "env_classifier"))
    env_net = grouping.train_env_classifier(subset, train_data, env_cfg)
    return subset, env_net, grouping.predict_env_probs(env_net, train_data.X, train_data.num_envs)


def train_on_benchmark(bench: Benchmark, tcfg: TrainConfig, seed: int):
    tcfg = replace(tcfg, seed=derive_seed(seed, "model"))
    net, hist = train(bench.train, bench.Q, bench.val, tcfg, bench.space)
    return net, hist, evaluate(net, bench.test, bench.space)


def run_pipeline(cfg: PipelineConfig, seed: int | None = None) -> dict:
    """Run every configured objective on one synthetic benchmark; JSON-ready report.

    All objectives share the model seed, so they start from the same
    initialization and see the same minibatch order.
    """
    seed = cfg.seed if seed is None else seed
    bench = build_benchmark(cfg, seed)
    report = {
        "seed": seed,
        "labeler": {
            "train": evaluate_env_labeler(bench.env_probs, bench.train, bench.space).to_dict(),
            "m": bench.subset.m,
        },
        "objectives": {},
    }
    for obj in cfg.objectives:
        obj = Objective(obj)
        _, hist, test_metrics = train_on_benchmark(bench, cfg.train[obj], seed)
        report["objectives"][obj.value] = {
            "test": test_metrics.to_dict(),
            "val": hist.selected.val.to_dict() if hist.selected else None,
            "selected_epoch": hist.selected_epoch,
            "config": cfg.train[obj].to_dict(),
        }
    return report


def _map(fn, items, workers: int):
    if workers <= 1:
        return [fn(*it) for it in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, *zip(*items)))


def run_seeds(cfg: PipelineConfig, seeds, workers: int = 1) -> list[dict]:
    """:func:`run_pipeline` for each seed; results come back in seed order."""
    return _map(run_pipeline, [(cfg, s) for s in seeds], workers)


def _sweep_one(cfg: PipelineConfig, seed: int, values, objectives_) -> list[dict]:
    bench = build_benchmark(cfg, seed)
    rows = []
    for obj in objectives_:
        obj = Objective(obj)
        for C in values:
            _, hist, test_metrics = train_on_benchmark(bench, replace(cfg.train[obj], C=C), seed)
            rows.append({"seed": seed, "objective": obj.value, "C": C,
                         "avg_acc": test_metrics.avg_acc,
                         "worst_group_acc": test_metrics.worst_group_acc,
                         "val_worst_group_acc": hist.selected.val.worst_group_acc
                         if hist.selected else None,
                         "selected_epoch": hist.selected_epoch})
    return rows


def _median_or_none(values):
    values = [v for v in values if v is not None]
    return float(np.median(values)) if values else None


def sweep_c(cfg: PipelineConfig, values=(0, 1, 2, 3, 4, 5), seeds=(0,),
            objectives_=(Objective.PGDRO,), workers: int = 1) -> tuple[list[dict], list[dict]]:
    """Train every objective at every C on each seed's benchmark.

    Returns ``(per_run_rows, summary_rows)``; summary rows hold the median
    test accuracies over seeds for each (objective, C), plus the median
    validation worst-group accuracy of the selected checkpoints so C can be
    chosen without looking at test data.
    """
    if any(c < 0 for c in values):
        raise ValueError(f"C values must be nonnegative, got {list(values)}")
    per_seed = _map(_sweep_one, [(cfg, s, tuple(values), tuple(objectives_)) for s in seeds], workers)
    runs = [r for rows in per_seed for r in rows]
    summary = []
    for obj in objectives_:
        obj = Objective(obj)
        for C in values:
            sel = [r for r in runs if r["objective"] == obj.value and r["C"] == C]
            summary.append({"objective": obj.value, "C": C,
                            "avg_acc": float(np.median([r["avg_acc"] for r in sel])),
                            "worst_group_acc": float(np.median([r["worst_group_acc"] for r in sel])),
                            "val_worst_group_acc": _median_or_none(
                                [r["val_worst_group_acc"] for r in sel])})
    return runs, summary
