"""The full command-line pipeline, end to end.

Drives every subcommand in-process: generate a dataset, train briefly,
evaluate, caption a scene, export attention heatmaps, dump the checkpoint,
and score a hand-written pair file.
"""

import json
import os
import shutil

from multiabn.cli import main
from multiabn.dataset import load_dataset

OUT = os.path.join(os.path.dirname(__file__), "out", "cli")
shutil.rmtree(OUT, ignore_errors=True)
os.makedirs(OUT)
data = os.path.join(OUT, "dataset")
run = os.path.join(OUT, "run")

def cli(*args: str) -> None:
    print(f"$ multiabn {' '.join(args)}")
    code = main(list(args))
    if code:
        raise SystemExit(f"command failed with exit code {code}")
    print()

cli("generate-dataset", "--out", data, "--scenes", "6", "--seed", "5",
    "--refs-per-target", "1", "--val-fraction", "0.2")

overrides = ["hidden_dim=12", "lstm_layers=1", "feature_size=4",
             "feature_channels=6", "image_size=8", "crop_dim=6",
             "att_channels=5", "ctx_channels=3", "mlp_hidden=[8]", "max_len=14"]
cli("train", "--dataset", data, "--out-dir", run, "--preset", "toy",
    "--batch-size", "2", "--max-steps", "40", "--lr", "0.002",
    "--beta1", "0.9", "--beta2", "0.999", "--log-interval", "20",
    "--checkpoint-interval", "40", "--seed", "3",
    *(f for o in overrides for f in ("--model-override", o)))

ckpt = os.path.join(run, "checkpoint.ckpt")
cli("evaluate", "--checkpoint", ckpt, "--dataset", data, "--split", "val",
    "--json-out", os.path.join(OUT, "scores.json"))

# scene ids are not row numbers; pick a real one from the val split
scene_id = load_dataset(data).splits["val"][0]
cli("caption", "--checkpoint", ckpt, "--dataset", data,
    "--scene-id", str(scene_id), "--json")

heat = os.path.join(OUT, "attention")
cli("export-attention", "--checkpoint", ckpt, "--dataset", data,
    "--scene-id", str(scene_id), "--out", heat)
names = sorted(os.listdir(heat))
print(f"{len(names)} attention files, first few: {names[:4]}")
print()

cli("dump-checkpoint", ckpt)

pairs_path = os.path.join(OUT, "pairs.json")
with open(pairs_path, "w") as fh:
    json.dump([
        {"candidate": "bring me the red ball",
         "references": ["bring me the red ball"]},
        {"candidate": "take the cup",
         "references": ["carry the green cup to me", "take the green cup"]},
    ], fh)
cli("score", "--pairs", pairs_path, "--label", "hand-written")
