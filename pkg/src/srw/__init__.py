"""Session-aware query rewriting: encode, fuse with session context, decode."""

import os

# Desk-scale matrices gain nothing from BLAS threads, and single-threaded
# reductions keep repeated runs bit-identical. Best effort: only takes hold
# if srw is imported before numpy.
for _var in ("OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "OMP_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

__version__ = "0.1.0"
