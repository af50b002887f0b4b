"""Console entry point.

Applies MGD_THREADS to the BLAS thread-count env vars before numpy is
imported, so MGD_THREADS=1 gives the single-thread reference mode.
"""
import os
import sys


def main():
    threads = os.environ.get("MGD_THREADS")
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                    "VECLIB_MAXIMUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ.setdefault(var, threads)
    from .cli import main as cli_main
    sys.exit(cli_main())
