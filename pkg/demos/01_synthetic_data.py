# %% [markdown]
# # Long-tailed synthetic labels
#
# Features are standard normal; each label is a thresholded linear teacher.
# Prevalence decays with label rank, and rare labels share most of their
# teacher with a frequent sibling, so the two get similar scores.

# %%
import numpy as np

from fairpo import SplitSpec, SyntheticConfig, generate_synthetic, partition_by_frequency, split_dataset

cfg = SyntheticConfig(n_instances=2000, n_labels=20, n_features=16, seed=0)
ds = generate_synthetic(cfg)
print(ds.n_instances, "instances,", ds.n_labels, "labels,", ds.n_features, "features")

# %%
target = cfg.target_prevalences()
observed = ds.labels.mean(axis=0)
for t in (0, 1, 4, 9, 19):
    print(f"label {t:2d}  target {target[t]:.3f}  observed {observed[t]:.3f}")

# %% [markdown]
# The privileged group is the rarest 20% of labels, counted on the training split.

# %%
train, test = split_dataset(ds, SplitSpec(train_fraction=0.8, seed=0))
part = partition_by_frequency(train, 0.2)
print("privileged:", part.privileged)
print("their training counts:", [part.frequencies[t] for t in part.privileged])

# %%
rare, sibling = 19, 0
Y = ds.labels
print(f"P(label {sibling} | label {rare}) = {Y[Y[:, rare] == 1, sibling].mean():.2f}")
print("fingerprint of the test split:", test.fingerprint())
