"""Write a synthetic stress corpus as feature/label CSVs, then train on it
through the CSV loader (load, align, window, normalize, train, evaluate).

    python scripts/csv_demo.py [out_dir]
"""
import sys
from pathlib import Path

import numpy as np

from mmfusion.cli import main
from mmfusion.data import FeatureTable, SyntheticSpec, generate_synthetic, write_feature_csv

CONFIG = """\
task = "stress-valence"
seed = 0
out_dir = "run"

[data]
source = "csv"
hop_ms = 40
labels = "labels.csv"
dev_segments = [8, 9]
win_len = 50
win_hop = 50

[[data.modalities]]
name = "audio"
path = "audio.csv"

[[data.modalities]]
name = "video"
path = "video.csv"

[model]
hidden = 16

[train]
lr = 0.005
batch_size = 8
max_epochs = 30

[fusion_train]
batch_size = 4
"""


def write_corpus(root: Path, n_segments: int = 10) -> Path:
    root.mkdir(parents=True, exist_ok=True)
    samples = generate_synthetic(SyntheticSpec([6, 4], (100, 100), n_segments, 3, [0.5, 0.5], "series", seed=1))
    for m, name in enumerate(["audio", "video"]):
        ts = np.concatenate([s.timestamps for s in samples])
        segs = np.repeat(np.arange(n_segments), [s.T for s in samples])
        feats = np.concatenate([s.features[m] for s in samples])
        write_feature_csv(root / f"{name}.csv", FeatureTable(name, [f"f_{j}" for j in range(feats.shape[1])],
                                                              ts, segs, feats))
    with open(root / "labels.csv", "w", encoding="utf-8") as fh:
        fh.write("timestamp,segment_id,arousal,valence\n")
        for seg, s in enumerate(samples):
            for t, (a, v) in zip(s.timestamps, s.labels):
                fh.write(f"{int(t)},{seg},{float(a)!r},{float(v)!r}\n")
    (root / "exp.toml").write_text(CONFIG, encoding="utf-8")
    return root / "exp.toml"


if __name__ == "__main__":
    out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("runs/csv_demo")
    sys.exit(main(["run", "--config", str(write_corpus(out))]))
