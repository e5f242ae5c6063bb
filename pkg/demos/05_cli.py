# %% [markdown]
# # Command-line walkthrough
#
# Each step is a `fairpo` subcommand; here they are called through `main` so
# the script stays self-contained. Outputs land in a temporary directory.

# %%
import json
import tempfile
from pathlib import Path

from fairpo import experiments as E
from fairpo.cli import main

root = Path(tempfile.mkdtemp())
plan = E.default_plan().to_dict()
plan["defaults"]["max_iterations"] = 2000
plan["seeds"] = [0]
(root / "plan.json").write_text(json.dumps(plan))
P = str(root / "plan.json")

# %%
steps = [
    ["gen-data", "--config", P, "--out", str(root / "data")],
    ["train-ref", "--data", str(root / "data"), "--config", P, "--out", str(root / "ref.json")],
    ["train", "--data", str(root / "data"), "--ref", str(root / "ref.json"), "--arm", "FairPO-CPO",
     "--config", P, "--seed", "0", "--out", str(root / "cpo")],
    ["eval", "--data", str(root / "data"), "--model", str(root / "ref.json"),
     "--partition", str(root / "data" / "partition.json"), "--out", str(root / "ref_report.json")],
    ["eval", "--data", str(root / "data"), "--model", str(root / "cpo" / "model.json"),
     "--partition", str(root / "data" / "partition.json"),
     "--baseline", str(root / "ref_report.json"), "--out", str(root / "cpo_report.json")],
]
for argv in steps:
    print("fairpo", argv[0], "->", main(argv))

# %%
rep = json.loads((root / "cpo_report.json").read_text())
print(f"dmAP P {rep['delta_map_p']:+.2f}, dmAP NP {rep['delta_map_np']:+.2f}")
print("a bad flag exits with", main(["train", "--bogus"]))
