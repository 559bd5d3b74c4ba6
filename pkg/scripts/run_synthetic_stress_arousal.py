"""Train and evaluate on the synthetic stress arousal config; artifacts land in runs/."""
import sys
from pathlib import Path

from mmfusion.cli import main

CONFIG = Path(__file__).resolve().parent.parent / "configs" / "stress_arousal_synthetic.toml"

if __name__ == "__main__":
    sys.exit(main(["run", "--config", str(CONFIG), *sys.argv[1:]]))
