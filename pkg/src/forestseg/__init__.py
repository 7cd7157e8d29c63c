"""Multispectral LiDAR forest segmentation toolkit."""

import os

# Prefer OpenMP for numba's parallel loops; the TBB probe warns on older TBB builds.
os.environ.setdefault("NUMBA_THREADING_LAYER_PRIORITY", "omp workqueue tbb")

__version__ = "0.1.0"
