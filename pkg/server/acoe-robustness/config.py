"""
Configuration settings for the average-cost solver and robustness experiments.

Everything here is read from the environment once at import time. Experiment
parameters (families, n grids, seeds) live in the JSON experiment config instead.
"""

import os
import logging
import multiprocessing

logger = logging.getLogger(__name__)


def _env_float(name, default):
    return float(os.getenv(name, str(default)))


def _env_int(name, default):
    return int(os.getenv(name, str(default)))


def _env_flag(name, default):
    return os.getenv(name, "true" if default else "false").lower() == "true"


# Solver configuration
ACOE_TOL = _env_float("ACOE_TOL", 1e-10)  # span residual of Tv - v
ACOE_MAX_ITER = _env_int("ACOE_MAX_ITER", 100000)
ACOE_ANCHOR = _env_int("ACOE_ANCHOR", 0)
UNICHAIN_SV_THRESHOLD = _env_float("UNICHAIN_SV_THRESHOLD", 1e-8)
PROBABILITY_TOL = 1e-12  # row sums, invariant-measure normalization

# Ergodicity checker configuration
ERGODICITY_T_MAX = _env_int("ERGODICITY_T_MAX", 64)
POLICY_BUDGET = _env_int("POLICY_BUDGET", 1000000)  # cap on |U|^|X|
POLICY_BATCH_SIZE = _env_int("POLICY_BATCH_SIZE", 4096)
DECAY_RESIDUAL_TOL = _env_float("DECAY_RESIDUAL_TOL", 0.1)


def detect_accelerators():
    """
    Detect which optional array libraries can run batched kernel arithmetic.

    Returns:
        tuple: (has_cupy, has_torch_cuda, accelerator_info)
    """
    has_cupy = False
    has_torch_cuda = False
    accelerator_info = {}

    try:
        import cupy as cp
        has_cupy = cp.cuda.runtime.getDeviceCount() > 0
        accelerator_info['cupy_devices'] = cp.cuda.runtime.getDeviceCount()
    except ImportError:
        logger.info("CuPy not available for batched kernel arithmetic")
    except Exception as e:
        logger.warning(f"CuPy detection failed: {e}")

    try:
        import torch
        has_torch_cuda = torch.cuda.is_available()
        if has_torch_cuda:
            accelerator_info['cuda_device_name'] = torch.cuda.get_device_name(0)
    except ImportError:
        logger.info("PyTorch not available for batched kernel arithmetic")
    except Exception as e:
        logger.warning(f"CUDA detection failed: {e}")

    return has_cupy, has_torch_cuda, accelerator_info


# numpy keeps sweeps bit-reproducible; accelerators are opt-in
ARRAY_BACKEND = os.getenv("ARRAY_BACKEND", "numpy").lower()

if ARRAY_BACKEND in ("auto", "cupy", "torch"):
    HAS_CUPY, HAS_TORCH_CUDA, ACCELERATOR_INFO = detect_accelerators()
    if HAS_CUPY or HAS_TORCH_CUDA:
        logger.info(f"Accelerator detected: CuPy={HAS_CUPY}, torch CUDA={HAS_TORCH_CUDA}")
    else:
        logger.info("No accelerator detected, using numpy")
else:
    HAS_CUPY, HAS_TORCH_CUDA, ACCELERATOR_INFO = False, False, {}

# Parallel sweeps
CPU_COUNT = multiprocessing.cpu_count()
MAX_WORKERS = _env_int("ACOE_THREADS", _env_int("MAX_WORKERS", CPU_COUNT))
ENABLE_PARALLEL_PROCESSING = _env_flag("ENABLE_PARALLEL_PROCESSING", True)

# Logging configuration
LOG_LEVEL = os.getenv("LOG_LEVEL", "WARNING")
SHOW_PROGRESS = _env_flag("SHOW_PROGRESS", True)
PROGRESS_EVERY = _env_int("PROGRESS_EVERY", 10)

# HTTP surface
API_HOST = os.getenv("API_HOST", "0.0.0.0")
API_PORT = _env_int("API_PORT", 5002)


def get_config_summary():
    """Get a summary of the current configuration."""
    return {
        'acoe_tol': ACOE_TOL,
        'acoe_max_iter': ACOE_MAX_ITER,
        'acoe_anchor': ACOE_ANCHOR,
        'ergodicity_t_max': ERGODICITY_T_MAX,
        'policy_budget': POLICY_BUDGET,
        'policy_batch_size': POLICY_BATCH_SIZE,
        'array_backend': ARRAY_BACKEND,
        'cupy_available': HAS_CUPY,
        'torch_cuda_available': HAS_TORCH_CUDA,
        'cpu_cores': CPU_COUNT,
        'max_workers': MAX_WORKERS,
        'parallel_processing': ENABLE_PARALLEL_PROCESSING,
        'log_level': LOG_LEVEL,
    }
