"""Pin numeric libraries to one thread before numpy loads.

The acceptance runtime budgets are stated for a single CPU core, and
single-threaded BLAS keeps every run bit-reproducible regardless of the
host's core count.
"""

import os

for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(var, "1")
