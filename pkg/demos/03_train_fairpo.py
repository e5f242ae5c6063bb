# %% [markdown]
# # One FairPO-CPO run against its BCE reference
#
# Pass --steps to shorten the run.

# %%
import argparse

import numpy as np

from fairpo import (SplitSpec, SyntheticConfig, TrainConfig, evaluate, generate_synthetic,
                    partition_by_frequency, snapshot_reference, split_dataset, train)

ap = argparse.ArgumentParser()
ap.add_argument("--steps", type=int, default=20000)
args = ap.parse_args()

ds = generate_synthetic(SyntheticConfig())
tr, te = split_dataset(ds, SplitSpec())
part = partition_by_frequency(tr, 0.2)

# %% [markdown]
# The reference is plain BCE from a small random start.

# %%
ref_cfg = TrainConfig(mode="single_loss", init="scratch", max_iterations=args.steps)
ref = snapshot_reference(train(tr, part, None, ref_cfg)[0])
base = evaluate(ref, te, part)
print(f"reference  mAP P {base.map_p:.2f}  mAP NP {base.map_np:.2f}")

# %% [markdown]
# FairPO starts from the reference and keeps it frozen for the hinge.

# %%
cfg = TrainConfig(variant="CPO", max_iterations=args.steps)
params, trace, state = train(tr, part, ref, cfg)
rep = evaluate(params, te, part, baseline=base, baseline_name="BCE-SFT")
print(f"FairPO-CPO mAP P {rep.map_p:.2f} ({rep.delta_map_p:+.2f})  "
      f"mAP NP {rep.map_np:.2f} ({rep.delta_map_np:+.2f})")

# %%
S = len(trace)
marks = np.linspace(0, S - 1, 6).astype(int)
print("alpha_P at", marks.tolist(), "->", np.round(trace.alpha_p[marks], 3).tolist())
k = max(S // 10, 1)
print(f"fallback rate first 10%: {trace.fallback_rate(slice(0, k)):.4f}, "
      f"last 10%: {trace.fallback_rate(slice(S - k, S)):.4f}")
