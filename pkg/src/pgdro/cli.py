"""Command-line front end.

Every subcommand reads one YAML config (all defaults are embedded, so the
chain ``gen-data -> pseudo-label -> train -> eval`` runs with no flags at
all), writes into a single output directory, and exits 0 on success. On
failure it prints one ``error:`` line, removes whatever it had already
written, and exits nonzero.

Output directory precedence: ``--out``, then ``$PGDRO_OUT_DIR``, then the
config's ``out_dir``.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

import numpy as np
import yaml

from pgdro import data as data_mod
from pgdro import grouping, numerics, training
from pgdro.grouping import EnvClassifierConfig, GroupSpace
from pgdro.objectives import Objective
from pgdro.training import PipelineConfig, TrainConfig

log = logging.getLogger("pgdro")

OUT_DIR_ENV = "PGDRO_OUT_DIR"

DEFAULT_CONFIG = {
    "seed": 0,
    "out_dir": "pgdro-out",
    "data": {
        "n": 4000,
        "p": 0.95,
        "sigma2_inv": 0.5,
        "sigma2_e": 0.05,
        "val_per_group": 100,
        "test_per_group": 500,
    },
    "labeling": {
        "mode": "supervised",  # supervised | zero-shot | given-file
        "m": 100,
        "env_classifier": {
            "hidden_sizes": [16, 16, 16],
            "epochs": 200,
            "batch_size": 32,
            "epoch_len": None,
            "lr": 0.1,
            "l2": 1e-4,
        },
        "embeddings": None,
        "prototypes": None,
        "temperature": 0.01,
        "probs_file": None,
    },
    "train": {
        "objective": "PGDRO",
        "epochs": 300,
        "batch_size": 128,
        "lr": 0.1,
        "l2": 1e-4,
        "C": 2.0,
        "eta_q": 0.01,
        "hidden_sizes": [16, 16, 16],
        "max_mode": "eg",
    },
    # per-objective overrides layered on top of ``train``
    "objectives": {"ERM": {}, "GDRO": {}, "PGDRO": {}},
    "pipeline": {"objectives": ["ERM", "GDRO", "PGDRO"], "seeds": [0], "workers": 1},
    "sweep": {"values": [0, 1, 2, 3, 4, 5], "seeds": [0, 1, 2, 3, 4],
              "objectives": ["PGDRO"], "workers": 1},
    "boundary": {"x_range": [-3.0, 3.0], "y_range": [-3.0, 3.0], "resolution": 200},
}


class CliError(Exception):
    pass


# ---------------------------------------------------------------------------
# config

def merge_config(base: dict, extra: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in extra.items():
        path = f"{where}{key}"
        if key not in base:
            raise CliError(f"unknown config key '{path}'")
        if isinstance(base[key], dict) and base[key]:
            if not isinstance(value, dict):
                raise CliError(f"config key '{path}' must be a mapping")
            out[key] = merge_config(base[key], value, path + ".")
        else:
            out[key] = value
    return out


def _set_path(cfg: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            raise CliError(f"unknown config key '{dotted}'")
        node = node[k]
    if keys[-1] not in node:
        raise CliError(f"unknown config key '{dotted}'")
    node[keys[-1]] = value


def load_config(path=None, overrides=()) -> dict:
    """Defaults, then the YAML file, then ``key.path=value`` overrides."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise CliError(f"cannot read config {path}: {exc.strerror}") from None
        try:
            user = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise CliError(f"{path}: invalid YAML ({str(exc).splitlines()[0]})") from None
        if not isinstance(user, dict):
            raise CliError(f"{path}: top level must be a mapping")
        cfg = merge_config(cfg, user)
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise CliError(f"override '{item}' must look like key.path=value")
        _set_path(cfg, key.strip(), yaml.safe_load(raw))
    return cfg


def train_config(cfg: dict, objective, seed: int) -> TrainConfig:
    objective = Objective(objective)
    merged = {**cfg["train"], **cfg["objectives"].get(objective.value, {})}
    merged["objective"] = objective
    merged["seed"] = seed
    return TrainConfig(**merged)


def env_classifier_config(cfg: dict) -> EnvClassifierConfig:
    return EnvClassifierConfig(**cfg["labeling"]["env_classifier"])


def pipeline_config(cfg: dict) -> PipelineConfig:
    d = cfg["data"]
    return PipelineConfig(
        n=d["n"], p=d["p"], sigma2_inv=d["sigma2_inv"], sigma2_e=d["sigma2_e"],
        m=cfg["labeling"]["m"], val_per_group=d["val_per_group"],
        test_per_group=d["test_per_group"], env_classifier=env_classifier_config(cfg),
        train={o: train_config(cfg, o, 0) for o in Objective},
        objectives=tuple(Objective(o) for o in cfg["pipeline"]["objectives"]),
        seed=cfg["seed"],
    )


# ---------------------------------------------------------------------------
# output handling

class Outputs:
    """Atomic writes into one directory, with rollback of everything written so far."""

    def __init__(self, root: Path):
        self.root = root
        self.written: list[Path] = []
        self._created_root = False

    def path(self, name: str) -> Path:
        return self.root / name

    def write(self, name: str, writer) -> Path:
        """Run ``writer(tmp_path)`` and move the result to ``name`` in one rename."""
        if not self.root.exists():
            self.root.mkdir(parents=True)
            self._created_root = True
        target = self.path(name)
        fd, tmp = tempfile.mkstemp(dir=self.root, prefix=f".{name}.", suffix=".tmp")
        os.close(fd)
        try:
            writer(Path(tmp))
            os.replace(tmp, target)
        except BaseException:
            Path(tmp).unlink(missing_ok=True)
            raise
        self.written.append(target)
        return target

    def text(self, name: str, content: str) -> Path:
        return self.write(name, lambda p: p.write_text(content))

    def json(self, name: str, obj) -> Path:
        return self.text(name, json.dumps(obj, indent=2) + "\n")

    def rollback(self) -> None:
        for p in self.written:
            p.unlink(missing_ok=True)
        if self._created_root and not any(self.root.iterdir()):
            self.root.rmdir()


def _table(headers, rows) -> str:
    cells = [[str(h) for h in headers]] + [["-" if v is None else _fmt(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    lines = ["  ".join([r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])])
             for r in cells]
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    return f"{v:.4f}" if isinstance(v, float) else str(v)


def _metrics_table(rep: training.MetricsReport, space: GroupSpace, title: str) -> str:
    rows = [(space.label(g), c, a) for g, (a, c) in
            enumerate(zip(rep.per_group_acc, rep.group_counts))]
    return (f"{title}\n"
            f"average accuracy      {rep.avg_acc:.4f}\n"
            f"worst-group accuracy  {rep.worst_group_acc:.4f}\n\n"
            + _table(["group", "count", "accuracy"], rows))


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# inputs

def _input(args, attr: str, out: Outputs, default: str) -> Path:
    given = getattr(args, attr, None)
    path = Path(given) if given else out.path(default)
    if not path.exists():
        raise CliError(f"input file {path} does not exist")
    return path


def _space(*datasets) -> GroupSpace:
    K = max(d.num_classes for d in datasets)
    envs = [d.num_envs for d in datasets if d.num_envs]
    if not envs:
        raise CliError("no environment annotations to size the group space")
    return GroupSpace(K, max(envs))


def _load(path: Path, space: GroupSpace | None = None):
    if space is None:
        return data_mod.load_csv(path)
    return data_mod.load_csv(path, space.num_classes, space.num_envs)


def _model_stem(objective: Objective) -> str:
    return f"model_{objective.value.lower()}"


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(cfg: dict, args, out: Outputs) -> None:
    train_data, val, test = training.generate_splits(pipeline_config(cfg), cfg["seed"])
    for name, ds in (("train", train_data), ("val", val), ("test", test)):
        out.write(f"{name}.csv", lambda p, ds=ds: data_mod.save_csv(ds, p))
    sizes = [(n, ds.N, *np.bincount(ds.groups(), minlength=4).tolist())
             for n, ds in (("train", train_data), ("val", val), ("test", test))]
    print(_table(["split", "rows", "g0", "g1", "g2", "g3"], sizes), end="")


def cmd_pseudo_label(cfg: dict, args, out: Outputs) -> None:
    lab = cfg["labeling"]
    train_path = _input(args, "train_data", out, "train.csv")
    train_data = _load(train_path)
    mode = lab["mode"]
    report = {"mode": mode, "rows": train_data.N}

    if mode == "supervised":
        if not train_data.has_env:
            raise CliError(f"{train_path}: supervised labeling needs an env column")
        subset, env_net, env_probs = training.fit_env_labeler(
            train_data, lab["m"], env_classifier_config(cfg), cfg["seed"])
        space = GroupSpace(train_data.num_classes, env_probs.shape[1])
        out.write("env_model.json", lambda p: numerics.save_network(env_net, p))
        report["m"] = subset.m
    elif mode == "zero-shot":
        if not lab["embeddings"] or not lab["prototypes"]:
            raise CliError("zero-shot labeling needs labeling.embeddings and labeling.prototypes")
        emb = grouping.EmbeddingSet(grouping.load_embeddings(lab["embeddings"]),
                                    grouping.load_prototypes(lab["prototypes"]),
                                    lab["temperature"])
        if len(emb.inputs) != train_data.N:
            raise CliError(f"{len(emb.inputs)} embeddings for {train_data.N} training rows")
        env_probs = grouping.zero_shot_env_probs(emb)
        space = GroupSpace(train_data.num_classes, env_probs.shape[1])
        report["temperature"] = lab["temperature"]
    elif mode == "given-file":
        if not lab["probs_file"]:
            raise CliError("given-file labeling needs labeling.probs_file")
        env_probs = grouping.check_distribution_rows(
            grouping.load_group_probs(lab["probs_file"]), lab["probs_file"])
        G = env_probs.shape[1]
        if G % train_data.num_classes:
            raise CliError(f"{G} group columns do not fit {train_data.num_classes} classes")
        space = GroupSpace(train_data.num_classes, G // train_data.num_classes)
        Q = env_probs
        grouping.check_support(Q, train_data.y, space)
        env_probs = Q.reshape(train_data.N, space.num_classes, space.num_envs).sum(axis=1)
    else:
        raise CliError(f"unknown labeling mode '{mode}' (supervised, zero-shot, given-file)")

    if mode != "given-file":
        Q = grouping.env_to_group_probs(env_probs, train_data.y, space)
    if len(Q) != train_data.N:
        raise CliError(f"{len(Q)} probability rows for {train_data.N} training rows")
    out.write("group_probs.csv", lambda p: grouping.save_group_probs(Q, p))

    text = f"labeling mode: {mode}\nrows: {train_data.N}\n"
    if train_data.has_env:
        rep = training.evaluate_env_labeler(env_probs, train_data, space)
        report["labeler"] = rep.to_dict()
        text += "\n" + _metrics_table(rep, space, "env labeler accuracy by group")
    out.json("labeler_report.json", report)
    out.text("labeler_report.txt", text)
    print(text, end="")


def cmd_train(cfg: dict, args, out: Outputs) -> None:
    objective = Objective(cfg["train"]["objective"])
    tcfg = train_config(cfg, objective, training.derive_seed(cfg["seed"], "model"))
    train_data = _load(_input(args, "train_data", out, "train.csv"))
    val = _load(_input(args, "val_data", out, "val.csv"))
    space = _space(train_data, val)

    Q = None
    if objective is Objective.ERM:
        if args.probs:
            log.warning("ERM ignores the group probabilities file %s", args.probs)
    else:
        Q = grouping.load_group_probs(_input(args, "probs", out, "group_probs.csv"),
                                      space, train_data.y)
    net, hist = training.train(train_data, Q, val, tcfg, space)

    stem = _model_stem(objective)
    out.write(f"{stem}.json", lambda p: numerics.save_network(net, p))
    report = {"objective": objective.value, "config": tcfg.to_dict(), **hist.to_dict()}
    out.json(f"train_{objective.value.lower()}.json", report)
    rows = [(e.epoch, e.objective_value, e.val.avg_acc, e.val.worst_group_acc)
            for e in hist.epochs]
    text = (f"objective {objective.value}, selected epoch {hist.selected_epoch}\n\n"
            + _table(["epoch", "train_objective", "val_avg", "val_worst"], rows))
    out.text(f"train_{objective.value.lower()}.txt", text)
    if hist.selected is not None:
        print(_metrics_table(hist.selected.val, space,
                             f"{objective.value}: validation at epoch {hist.selected_epoch}"), end="")


def _model_path(cfg: dict, args, out: Outputs) -> Path:
    default = _model_stem(Objective(cfg["train"]["objective"])) + ".json"
    return _input(args, "model", out, default)


def cmd_eval(cfg: dict, args, out: Outputs) -> None:
    model_path = _model_path(cfg, args, out)
    net = numerics.load_network(model_path)
    ds = _load(_input(args, "data", out, "test.csv"))
    if not ds.has_env:
        raise CliError("evaluation needs an env column in the dataset")
    space = GroupSpace(max(ds.num_classes, net.num_classes), ds.num_envs)
    rep = training.evaluate(net, ds, space)
    stem = f"eval_{model_path.stem}"
    out.json(f"{stem}.json", rep.to_dict())
    rows = []
    for g, (a, c) in enumerate(zip(rep.per_group_acc, rep.group_counts)):
        y, e = space.components(g)
        rows.append([g, y, e, c, "" if a is None else repr(a)])
    out.text(f"{stem}.csv", _csv_text(["group", "y", "e", "count", "accuracy"], rows))
    text = _metrics_table(rep, space, f"{model_path.name} on {ds.N} rows")
    out.text(f"{stem}.txt", text)
    print(text, end="")


def cmd_sweep_c(cfg: dict, args, out: Outputs) -> None:
    sw = cfg["sweep"]
    values = [float(v) for v in sw["values"]]
    objectives_ = [Objective(o) for o in sw["objectives"]]
    if not objectives_:
        raise CliError("sweep.objectives is empty")
    runs, summary = training.sweep_c(pipeline_config(cfg), values, list(sw["seeds"]),
                                     objectives_, sw["workers"])
    out.json("sweep_c.json", {"values": values, "seeds": list(sw["seeds"]),
                              "runs": runs, "summary": summary})
    for obj in objectives_:
        rows = [[repr(r["C"]), repr(r["avg_acc"]), repr(r["worst_group_acc"])]
                for r in summary if r["objective"] == obj.value]
        out.text(f"sweep_c_{obj.value.lower()}.csv",
                 _csv_text(["C", "avg_acc", "worst_group_acc"], rows))
    text = _table(["objective", "C", "test_avg", "test_worst", "val_worst"],
                  [(r["objective"], r["C"], r["avg_acc"], r["worst_group_acc"],
                    r["val_worst_group_acc"]) for r in summary])
    out.text("sweep_c.txt", text)
    print(text, end="")


def cmd_boundary(cfg: dict, args, out: Outputs) -> None:
    b = cfg["boundary"]
    model_path = _model_path(cfg, args, out)
    net = numerics.load_network(model_path)
    grid = training.decision_boundary_grid(net, b["x_range"], b["y_range"], int(b["resolution"]))
    rows = [[repr(float(x1)), repr(float(x2)), int(pred), repr(float(conf))]
            for x1, x2, pred, conf in grid]
    out.text(f"boundary_{model_path.stem}.csv", _csv_text(["x1", "x2", "pred", "confidence"], rows))
    print(f"{len(rows)} grid points written for {model_path.name}")


def cmd_pipeline(cfg: dict, args, out: Outputs) -> None:
    pc = pipeline_config(cfg)
    seeds = list(cfg["pipeline"]["seeds"])
    if not pc.objectives:
        raise CliError("pipeline.objectives is empty")
    reports = training.run_seeds(pc, seeds, cfg["pipeline"]["workers"])
    summary = {}
    for obj in pc.objectives:
        tests = [r["objectives"][obj.value]["test"] for r in reports]
        summary[obj.value] = {
            "median_avg_acc": float(np.median([t["avg_acc"] for t in tests])),
            "median_worst_group_acc": float(np.median([t["worst_group_acc"] for t in tests])),
        }
    out.json("pipeline.json", {"seeds": seeds, "runs": reports, "summary": summary})
    text = _table(["objective", "median_avg", "median_worst"],
                  [(o, s["median_avg_acc"], s["median_worst_group_acc"]) for o, s in summary.items()])
    out.text("pipeline.txt", text)
    print(text, end="")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pseudo-label": cmd_pseudo_label,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep-c": cmd_sweep_c,
    "boundary": cmd_boundary,
    "pipeline": cmd_pipeline,
}


# ---------------------------------------------------------------------------
# argument parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def _float_list(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML config file; omitted keys keep their defaults")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--out", help=f"output directory (overrides ${OUT_DIR_ENV})")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key, e.g. train.epochs=50")

    parser = _Parser(prog="pgdro", description="Group-robust training with probabilistic group labels.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="write synthetic train/val/test CSVs")
    p.add_argument("--n", type=int)
    p.add_argument("--p", type=float)

    p = sub.add_parser("pseudo-label", parents=[common], help="write group probabilities")
    p.add_argument("--mode", choices=["supervised", "zero-shot", "given-file"])
    p.add_argument("--m", type=int, help="labeled subset size")
    p.add_argument("--train-data")
    p.add_argument("--embeddings")
    p.add_argument("--prototypes")
    p.add_argument("--probs-file")

    p = sub.add_parser("train", parents=[common], help="train one objective")
    p.add_argument("--objective", choices=[o.value for o in Objective])
    p.add_argument("--epochs", type=int)
    p.add_argument("--C", type=float)
    p.add_argument("--train-data")
    p.add_argument("--val-data")
    p.add_argument("--probs")

    p = sub.add_parser("eval", parents=[common], help="evaluate a saved model")
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--objective", choices=[o.value for o in Objective],
                   help="pick the default model file by objective")

    p = sub.add_parser("sweep-c", parents=[common], help="sweep the adjustment constant C")
    p.add_argument("--values", type=_float_list)
    p.add_argument("--seeds", type=_int_list)
    p.add_argument("--objectives", type=lambda s: s.split(","))
    p.add_argument("--workers", type=int)

    p = sub.add_parser("boundary", parents=[common], help="export a decision-boundary grid")
    p.add_argument("--model")
    p.add_argument("--resolution", type=int)
    p.add_argument("--objective", choices=[o.value for o in Objective])

    p = sub.add_parser("pipeline", parents=[common], help="run the synthetic benchmark end to end")
    p.add_argument("--seeds", type=_int_list)
    p.add_argument("--workers", type=int)
    return parser


# flag name -> config key it overrides, per command
_FLAG_KEYS = {
    "gen-data": {"n": "data.n", "p": "data.p"},
    "pseudo-label": {"mode": "labeling.mode", "m": "labeling.m", "embeddings": "labeling.embeddings",
                     "prototypes": "labeling.prototypes", "probs_file": "labeling.probs_file"},
    "train": {"objective": "train.objective", "epochs": "train.epochs", "C": "train.C"},
    "eval": {"objective": "train.objective"},
    "sweep-c": {"values": "sweep.values", "seeds": "sweep.seeds",
                "objectives": "sweep.objectives", "workers": "sweep.workers"},
    "boundary": {"resolution": "boundary.resolution", "objective": "train.objective"},
    "pipeline": {"seeds": "pipeline.seeds", "workers": "pipeline.workers"},
}


def resolve(args) -> tuple[dict, Path]:
    cfg = load_config(args.config, args.set)
    if args.seed is not None:
        cfg["seed"] = args.seed
    for flag, key in _FLAG_KEYS[args.command].items():
        value = getattr(args, flag, None)
        if value is not None:
            _set_path(cfg, key, value)
    out_dir = args.out or os.environ.get(OUT_DIR_ENV) or cfg["out_dir"]
    return cfg, Path(out_dir)


def main(argv=None) -> int:
    logging.basicConfig(format="%(levelname)s: %(message)s", stream=sys.stderr)
    out = None
    try:
        args = build_parser().parse_args(argv)
        cfg, out_dir = resolve(args)
        out = Outputs(out_dir)
        COMMANDS[args.command](cfg, args, out)
    except KeyboardInterrupt:
        if out is not None:
            out.rollback()
        print("error: interrupted", file=sys.stderr)
        return 130
    except Exception as exc:  # every failure becomes one line plus cleanup
        if out is not None:
            out.rollback()
        msg = str(exc).replace("\n", " ") or type(exc).__name__
        print(f"error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
