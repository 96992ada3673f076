# Train a small model end to end on generated audio and score it.
#
# This runs the library API directly rather than the command line.
# It uses a narrow network so it finishes in a minute or two on one core.
#
# Run with:  python3 demos/tiny_training.py

import tempfile
from pathlib import Path

from multibreath import pipeline
from multibreath.config import resolve_config
from multibreath.metrics import format_metrics

root = Path(tempfile.mkdtemp(prefix="multibreath-demo-"))

# 12 train and 4 test cycles per class; every recording gets its own patient.
cfg = resolve_config(overrides={
    "synth_per_class": 12, "synth_test_per_class": 4, "seed": 3,
    "widths": "16,32,64", "epochs": 15, "batch_size": 16, "learning_rate": 0.003,
})
manifest = pipeline.synth(root / "work", cfg)
print("dataset:", manifest.summary["train"]["cycles"], "train /", manifest.summary["test"]["total"], "test")

paths = pipeline.train(root / "work", root / "run", cfg)
print("training log:")
print((root / "run" / "train_log.csv").read_text())

report = pipeline.evaluate(paths["checkpoint"], root / "work", root / "run", split="test")
print(format_metrics(report))
print("outputs in", root)
