"""Every demo script runs to completion (03 with a short training run)."""

import subprocess
import sys
from pathlib import Path

import pytest

DEMOS = Path(__file__).resolve().parents[1] / "demos"


def run(name, *args):
    proc = subprocess.run([sys.executable, str(DEMOS / name), *args], capture_output=True, text=True, timeout=600)
    assert proc.returncode == 0, proc.stderr[-2000:]
    return proc.stdout


@pytest.mark.parametrize("name", ["01_synthetic_profiles.py", "02_projections_and_guidance.py", "05_scaler_baseline.py"])
def test_quick_demos(name):
    assert run(name).strip()


def test_model_demos():
    out = run("03_train_and_generate.py", "200")
    assert "permutation p-value" in out
    out = run("04_impute_and_superres.py")
    assert "super-resolution CRPS" in out


def test_cli_demo():
    out = run("06_cli_walkthrough.py")
    assert out.count("exit 0") == 7 and "exit 4" in out
