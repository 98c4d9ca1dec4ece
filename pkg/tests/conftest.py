import os

# Pin BLAS/OpenMP pools before numpy gets imported anywhere: keeps timings
# stable and removes one source of run-to-run nondeterminism.
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS"):
    os.environ.setdefault(_var, "1")
