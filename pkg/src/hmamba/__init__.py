"""Selective state-space scans and a hybrid (support-recapped / query-intercepted) Mamba block
for few-shot segmentation, in plain numpy with hand-written gradients."""

import os as _os

# HMK_THREADS caps BLAS / numba threads; it must be read before numpy loads
_threads = _os.environ.get("HMK_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

from .ssm import (DomainError, ScanResult, SsmParams, discretize, project_params, scan_backward,  # noqa: E402
                  scan_parallel, scan_sequential)

__version__ = "0.1.0"

__all__ = ["DomainError", "ScanResult", "SsmParams", "discretize", "project_params",
           "scan_backward", "scan_parallel", "scan_sequential"]
