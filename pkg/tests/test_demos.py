import subprocess
import sys
from pathlib import Path

import pytest

DEMOS = Path(__file__).resolve().parents[1] / "demos"

CASES = [
    ("01_synthetic_data.py", []),
    ("02_losses.py", []),
    ("03_train_fairpo.py", ["--steps", "300"]),
    ("04_experiment_grid.py", ["--steps", "30", "--out", "{tmp}/grid"]),
    ("05_cli.py", []),
]


@pytest.mark.parametrize("name,args", CASES)
def test_demo_runs(name, args, tmp_path):
    argv = [a.replace("{tmp}", str(tmp_path)) for a in args]
    r = subprocess.run([sys.executable, str(DEMOS / name), *argv], capture_output=True, text=True,
                       cwd=tmp_path, timeout=300)
    assert r.returncode == 0, r.stderr
    assert r.stdout.strip()
