"""
The command line, end to end
============================

Every capability is also reachable from the ``osma`` command. This script
drives it in-process with a small JSON config; the same calls work from a
shell as ``osma bench-gen --config cfg.json --out bench`` and so on.
"""
import json
import tempfile
from pathlib import Path

from osma import cli

work = Path(tempfile.mkdtemp())
config = {
    "manifest": "bench/manifest.jsonl",
    "run_dir": "run",
    "split": {"input_size": 32, "train_per_class": 100, "test_per_class": 20,
              "seen": [{"name": "m1", "seed": 1, "architecture": "conv2_k3", "domain": "fractal"},
                       {"name": "m2", "seed": 2, "architecture": "conv2_k5", "domain": "shapes"}],
              "unseen_seed": [{"name": "s1", "seed": 11, "architecture": "conv2_k3", "domain": "fractal"}],
              "unseen_architecture": [{"name": "a1", "seed": 21, "architecture": "up_down", "domain": "fractal"}],
              "unseen_dataset": [{"name": "d1", "seed": 1, "architecture": "conv2_k3", "domain": "mosaic"}]},
    "train": {"input_size": 32, "width": 0.25, "embed_dim": 64, "epochs": 6, "aug_steps_per_epoch": 30,
              "lr_task": 1e-3},
}
cfg = work / "cfg.json"
cfg.write_text(json.dumps(config, indent=2))

# %%
cli.main(["bench-gen", "--config", str(cfg), "--out", str(work / "bench")])
cli.main(["train", "--config", str(cfg)])
cli.main(["eval", "--config", str(cfg), "--theta-sweep", "0.5,0.7,0.9"])

# %%
# Clustering and a spectrum comparison between two stamp folders.
cli.main(["cluster", "--config", str(cfg), "--k", "6"])
images = work / "bench" / "images"
cli.main(["spectrum", str(images / "m1"), str(images / "s1"), "--out", str(work / "spectrum")])
print(sorted(p.name for p in (work / "run" / "eval").iterdir()))
