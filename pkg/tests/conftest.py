"""Test session setup.

BLAS thread pools are pinned to one thread before numpy loads anywhere:
the timing-sensitive acceptance criteria are stated for a single-threaded
CPU, and one thread is actually faster for these small kernels anyway.
"""

import os
import sys
from pathlib import Path

for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))
