"""From a hundred annotated rows to soft group labels for every row.

Only a small labeled subset carries environment annotations. An environment
classifier trained on it (with draws balanced across groups) predicts
P(e | x) for the whole training set; combining that with the known class
gives a distribution over groups for each row.
"""
import numpy as np

from pgdro import data, grouping, objectives
from pgdro.data import SyntheticParams
from pgdro.grouping import EmbeddingSet, EnvClassifierConfig, GroupSpace

space = GroupSpace(num_classes=2, num_envs=2)

# %% a noisier environment feature makes the labels genuinely uncertain
train = data.generate_synthetic(SyntheticParams(sigma2_e=0.5, seed=0))
subset = data.subsample_labeled(train, m=100, seed=1)
print("labeled subset group counts:", np.bincount(subset.take(train).groups(), minlength=4).tolist())

env_net = grouping.train_env_classifier(subset, train, EnvClassifierConfig(seed=2))
env_probs = grouping.predict_env_probs(env_net, train.X)
Q = grouping.env_to_group_probs(env_probs, train.y, space)

# %% each row only has mass on the two groups of its own class
print("first rows of Q:")
print(np.round(Q[:4], 3), "labels", train.y[:4])

# %% effective group sizes replace hard counts; they still add up to N
n_tilde = objectives.effective_group_sizes(Q)
print("effective sizes:", np.round(n_tilde, 1), "sum", round(float(n_tilde.sum()), 6))
print("true counts:    ", np.bincount(train.groups()).tolist())
print("hardened counts:", np.bincount(grouping.harden(Q), minlength=4).tolist())

# %% zero-shot alternative: cosine similarity to one prototype per environment
emb = EmbeddingSet(inputs=[[1.0, 0.0], [1.0, 1.0], [0.2, 1.0]], prototypes=np.eye(2), temperature=1.0)
print("zero-shot P(e|x) at T=1:")
print(np.round(grouping.zero_shot_env_probs(emb), 4))
for T in (1.0, 0.1, 0.01):
    emb.temperature = T
    print(f"T={T}: first row {np.round(grouping.zero_shot_env_probs(emb)[0], 4)}")
