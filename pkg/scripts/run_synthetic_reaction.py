"""Train and evaluate on the synthetic reaction config; artifacts land in runs/."""
import sys
from pathlib import Path

from mmfusion.cli import main

CONFIG = Path(__file__).resolve().parent.parent / "configs" / "reaction_synthetic.toml"

if __name__ == "__main__":
    sys.exit(main(["run", "--config", str(CONFIG), *sys.argv[1:]]))
