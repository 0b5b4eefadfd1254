"""End to end through the command-line interface, driven from Python.

Equivalent shell session:

    meterflow synth    --config run.ini --out data
    meterflow train    --config run.ini --data data --out model
    meterflow impute   --manifest impute.json --out impute
    meterflow evaluate --real data/profiles.csv --generated impute/samples.csv --task impute --out eval

Run:  python demos/06_cli_walkthrough.py
"""

import json
import tempfile
from pathlib import Path

from meterflow.cli import main

CONFIG = """
[synth]
n_customers = 12
period = week
steps_per_day = 24
months = 1,4,7,10
years = 2022

[model]
n_layers = 1
model_dim = 32
ff_dim = 64
n_heads = 4

[train]
n_iters = 300
learning_rate = 1e-3
log_every = 100
val_every = 100

[sample]
n_steps = 50
n_samples = 4
"""

# 300 iterations only exercise the plumbing; expect poor scores from evaluate.
root = Path(tempfile.mkdtemp(prefix="meterflow-demo-"))
(root / "run.ini").write_text(CONFIG)
ini = str(root / "run.ini")


def run(*argv):
    code = main(list(argv))
    print(f"$ meterflow {' '.join(argv)}  -> exit {code}")
    return code


run("synth", "--config", ini, "--out", str(root / "data"), "--seed", "4")
run("train", "--config", ini, "--data", str(root / "data"), "--out", str(root / "model"))
print("  loss.csv tail:", (root / "model" / "loss.csv").read_text().splitlines()[-1])

# One sampling manifest per task, all pointing at the same checkpoint.
tasks = {
    "generate": None,
    "constrained": {"kind": "peak_total", "payload": {}},
    "impute": {"kind": "impute", "payload": {"mask": {"rate": 0.2, "min_block": 3, "max_block": 12}}},
    "superres": {"kind": "superres", "payload": {"block_len": 4}},
}
for cmd, guidance in tasks.items():
    doc = {"checkpoint_path": "model/model.ckpt", "seed": 1, "source": {"csv": "data/profiles.csv", "row": 0}}
    if guidance:
        doc["guidance"] = guidance
    (root / f"{cmd}.json").write_text(json.dumps(doc, indent=2))
    run(cmd, "--config", ini, "--manifest", str(root / f"{cmd}.json"), "--out", str(root / cmd))
    m = json.loads((root / cmd / "manifest.json").read_text())
    print(f"  params checksum {m['params_checksum'][:16]}")
    if (root / cmd / "diagnostics.csv").exists():
        print("  diagnostics:", (root / cmd / "diagnostics.csv").read_text().splitlines()[1])

# Weekly data has several weeks per (customer, month) starting on the same
# weekday, so the real side is narrowed to the week each sample was drawn for.
rows = (root / "data" / "profiles.csv").read_text().splitlines()
(root / "targets.csv").write_text("\n".join(rows[:2]) + "\n")
run("evaluate", "--config", ini, "--real", str(root / "targets.csv"),
    "--generated", str(root / "impute" / "samples.csv"), "--task", "impute", "--out", str(root / "eval"))
report = json.loads((root / "eval" / "report.json").read_text())
print("  overall:", json.dumps(report["overall"], indent=None)[:200])

# Mistakes come back as exit codes rather than tracebacks.
run("impute", "--manifest", str(root / "missing.json"), "--out", str(root / "x"))
print(f"outputs under {root}")
