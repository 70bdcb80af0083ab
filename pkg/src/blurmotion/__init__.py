"""Affine object-motion and segmentation estimation from a single motion-blurred image."""

import os

# workqueue avoids the TBB version warning; a fixed pool size lets --threads go up to it
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")
os.environ.setdefault("NUMBA_NUM_THREADS", str(max(4, os.cpu_count() or 1)))

__version__ = "0.1.0"
