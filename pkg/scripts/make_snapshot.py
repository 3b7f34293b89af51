"""Regenerate the untrained-denoiser regression snapshot used by the tests.

Run only when the denoiser architecture changes on purpose.
"""
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))
from test_denoiser import SNAPSHOT, inputs, small  # noqa: E402

if __name__ == "__main__":
    SNAPSHOT.parent.mkdir(parents=True, exist_ok=True)
    np.save(SNAPSHOT, small().predict_x0(inputs(), 37).data)
    print(f"wrote {SNAPSHOT}")
