"""Write a synthetic dataset, a power log and a JSON run file for the CLI.

    python demos/make_run_files.py demo-data
    edgebench-host --config demo-data/run.json --runs 2
"""

import json
import sys
from pathlib import Path

from edgebench.metrics import write_power_log
from edgebench.synthetic import constant_power_log, make_dataset, write_dataset

root = Path(sys.argv[1] if len(sys.argv) > 1 else "demo-data")
image_dir, annotations = write_dataset(make_dataset(n_frames=30, n_classes=3, width=160, height=120, seed=4), root)
power = write_power_log(root / "board-a-power.csv", constant_power_log(16.5, duration_s=30, seed=1, jitter_w=0.1))

run = {
    "broker": "loopback",
    "dataset": str(image_dir),
    "annotations": str(annotations),
    "targets": ["board-a", "board-b"],
    "detector": "gt-replay",
    "conf_thr": 0.25,
    "nms_thr": 0.45,
    "runs": 6,
    "width": 416,
    "height": 416,
    "power_logs": {"board-a": str(power)},
    "idle_watts": {"board-a": 9.5},
    "precision_labels": {"board-a": "INT8", "board-b": "FP16"},
    "mock": {"board-b": {"drop_probability": 0.3, "coordinate_jitter_px": 1.0, "seed": 9}},
    "out": str(root / "reports"),
}
(root / "run.json").write_text(json.dumps(run, indent=2))
print(f"wrote {root / 'run.json'}")
