import os

# keep BLAS single-threaded; parallelism lives in numba prange and the rep pool
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("NUMBA_THREADING_LAYER_PRIORITY", "omp workqueue tbb")
