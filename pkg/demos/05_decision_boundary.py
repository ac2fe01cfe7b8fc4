"""What each model actually learned, as a coarse text map.

The invariant feature runs left to right and the environment feature bottom
to top. A model that ignores the shortcut splits the plane with a roughly
vertical line; ERM's boundary tilts toward the horizontal.
"""
import numpy as np

from pgdro import training
from pgdro.objectives import Objective
from pgdro.training import PipelineConfig

cfg = PipelineConfig()
bench = training.build_benchmark(cfg, seed=0)

res = 21
for obj in (Objective.ERM, Objective.PGDRO):
    net, _, test = training.train_on_benchmark(bench, cfg.train[obj], seed=0)
    grid = training.decision_boundary_grid(net, (-2, 2), (-1.5, 2.5), res)
    pred = grid[:, 2].reshape(res, res)
    conf = grid[:, 3].reshape(res, res)
    print(f"{obj.value}: worst-group test accuracy {test.worst_group_acc:.3f}")
    # top row = largest environment feature; '#' and '.' are confident class 1 and 0, '+' and '-' unsure
    for row_pred, row_conf in zip(pred[::-1], conf[::-1]):
        print("  " + "".join(("#" if p else ".") if c > 0.75 else ("+" if p else "-")
                             for p, c in zip(row_pred, row_conf)))
    print(f"  mean confidence {conf.mean():.3f}\n")
