"""Pretrain, search and retrain end to end through the CLI entry point.

This is a shrunken run (seconds on one core, so accuracy stays modest).
The full-size run is ``jointprune pretrain|search|retrain -c config.json`` with default sections.
"""
import json
import sys
import tempfile
from pathlib import Path

from jointprune.cli import run_cli

config = {
    "seed": 0,
    "paths": {"out": "."},
    "data": {"n_train": 600, "n_test": 200, "size": 16},
    "controller": {"h_dim": 32, "e_dim": 32},
    "rl": {"episodes": 60, "lam": 2500.0},
    "child": {"epochs": 6, "batch_size": 32},
}

out = Path(sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="jointprune-"))
out.mkdir(parents=True, exist_ok=True)
(out / "config.json").write_text(json.dumps(config, indent=2))
for stage in ("pretrain", "search", "retrain"):
    print(f"--- {stage}")
    code = run_cli([stage, "-c", str(out / "config.json")])
    if code:
        sys.exit(code)

report = json.loads((out / "retrain.json").read_text())
print(f"\nFLOPs {report['flops_base']:,d} -> {report['flops_pruned']:,d} "
      f"({100 * report['flops_reduction']:.1f}% fewer)")
print(f"accuracy {report['accuracy_base']:.3f} -> {report['accuracy_pruned']:.3f}")
print("artifacts in", out)
