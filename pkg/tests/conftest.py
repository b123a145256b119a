import os
import sys

# single BLAS thread before numpy loads: reproducible, and faster on these sizes
for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

sys.path.insert(0, os.path.dirname(__file__))  # make oracles importable
