import os
import sys

# ---------------------- Import path ----------------------
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from histoage.pipeline.cli import main  # noqa: E402

# ---------------------- Example Usage ----------------------
# python3 src/main.py --config configs/desk.cfg run-all
# python3 src/main.py --config configs/desk.cfg --set gbt.bootstraps=50 predict-age
if __name__ == "__main__":
    main()
