"""Synthetic spurious-correlation data.

Each sample has two features: an invariant one centred on the label and an
environment one centred on the environment. Most training rows have
label == environment, so the environment feature is a tempting shortcut.
"""
import numpy as np

from pgdro import data
from pgdro.data import SyntheticParams

params = SyntheticParams(n=4000, p=0.95, sigma2_inv=0.5, sigma2_e=0.05, seed=0)
train = data.generate_synthetic(params)

# %% group sizes: two big majority groups, two small minority groups
print("group sizes (y,e) = (0,0) (0,1) (1,0) (1,1):", np.bincount(train.groups()).tolist())

# %% the environment feature is much less noisy than the invariant one
for g, (y, e) in enumerate([(0, 0), (0, 1), (1, 0), (1, 1)]):
    rows = train.X[train.groups() == g]
    print(f"y={y} e={e}  mean {rows.mean(axis=0).round(3)}  std {rows.std(axis=0).round(3)}")

# %% how well does each feature alone predict the label on the training set?
for j, name in enumerate(["invariant", "environment"]):
    acc = np.mean((train.X[:, j] > 0) == train.y)
    print(f"sign of the {name} feature predicts y with accuracy {acc:.3f}")

# %% a stratified split keeps every group in every part
tr, va, te = data.split(train, (0.6, 0.2, 0.2), seed=0)
for name, part in (("train", tr), ("val", va), ("test", te)):
    print(name, np.bincount(part.groups(), minlength=4).tolist())

# %% CSV round trips are exact
data.save_csv(train, "/tmp/pgdro_demo_train.csv")
back = data.load_csv("/tmp/pgdro_demo_train.csv")
print("CSV round trip exact:", np.array_equal(back.X, train.X))
