"""Dynamic scheduled sampling with imitation loss, at desk scale."""

import os

# DYSI_THREADS must reach the BLAS runtime before numpy is first imported
if os.environ.get("DYSI_THREADS"):
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["DYSI_THREADS"])

__version__ = "0.1.0"
