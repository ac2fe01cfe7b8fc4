"""The worst-group objectives on a hand-sized example.

Two groups: a large one with mean loss 1.0 and a single sample with loss 0.2.
Adding C / sqrt(n) to each group risk eventually makes the small group the
worst one, which is the point of the size adjustment.
"""
import numpy as np

from pgdro import grouping, objectives

losses = np.array([0.5, 1.5, 1.0, 1.0, 0.2])
groups = np.array([0, 0, 0, 0, 1])

for C in (0.0, 1.0, 1.6, 2.0):
    rep = objectives.gdro_risk(losses, groups, C=C)
    print(f"C={C}: adjusted risks {np.round(rep.adjusted_risk, 3)} worst group {rep.worst_group}")

# %% soft labels: a row split 50/50 counts half in each group
Q = np.array([[1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [0.5, 0.5]])
n_tilde = objectives.effective_group_sizes(Q)
rep = objectives.pg_dro_risk(losses, Q, n_tilde, C=1.0)
print("soft sizes", n_tilde, "per-group risk", np.round(rep.per_group_risk, 3))

# %% with one-hot labels the soft and hard objectives agree exactly
one_hot = grouping.one_hot(groups, 2)
soft = objectives.pg_dro_risk(losses, one_hot, objectives.effective_group_sizes(one_hot), 1.0)
hard = objectives.gdro_risk(losses, groups, 1.0)
print("one-hot soft == hard:", soft.objective_value == hard.objective_value)

# %% the group weights follow an exponentiated-gradient rule
state = objectives.init_state(n_tilde, C=1.0, eta_q=0.5)
for step in range(5):
    state = objectives.update_group_weights(state, rep.per_group_risk + state.adjustment())
    print(f"step {step}: q = {np.round(state.q, 4)}")

# %% per-sample weights turn the weighted risk into an ordinary weighted loss
w = objectives.sample_weights(state, Q)
print("sum w * loss =", round(float(w @ losses), 12),
      " sum q * L =", round(float(state.q @ rep.per_group_risk), 12))
