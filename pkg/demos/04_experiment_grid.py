# %% [markdown]
# # The full grid: baselines, variants and ablations over three seeds
#
# Runs the shipped plan (a few minutes on one core). --steps shortens every
# arm for a quick look; the numbers are then not meaningful.

# %%
import argparse

from fairpo import experiments as E

ap = argparse.ArgumentParser()
ap.add_argument("--steps", type=int, default=None)
ap.add_argument("--out", default="runs/demo-grid")
args = ap.parse_args()

plan = E.default_plan()
if args.steps:
    d = plan.to_dict()
    d["defaults"]["max_iterations"] = args.steps
    plan = E.ExperimentPlan.from_dict(d)
print([a.name for a in plan.arms])

# %%
results, table = E.run_plan(plan, args.out)
print(table)

# %%
by = {r.name: r for r in results}
print("CPO minus Only Confusing Negatives, mAP P:",
      round(by["FairPO-CPO"].mean["map_p"] - by["Only Confusing Negatives"].mean["map_p"], 2))
