"""
Batched kernel arithmetic for policy sweeps.
Runs on CuPy or PyTorch when configured and available, with a NumPy fallback.

Every statistic returned is a max or min over the batch, so chunk order and
device never change the reduced result beyond floating-point rounding of the
matrix powers themselves.
"""

import logging
from typing import Dict, Optional

import numpy as np

from config import ARRAY_BACKEND, HAS_CUPY, HAS_TORCH_CUDA

logger = logging.getLogger(__name__)

try:
    import cupy as cp
    CUPY_AVAILABLE = True
except ImportError:
    CUPY_AVAILABLE = False

try:
    import torch
    TORCH_AVAILABLE = True
except ImportError:
    TORCH_AVAILABLE = False


def _statistics_xp(xp, matrices, t_max, stationary):
    """Per-t sweep statistics with a NumPy-compatible module (numpy or cupy)."""
    batch, n_states, _ = matrices.shape
    dobrushin = np.zeros(t_max)
    column_min = np.zeros((t_max, n_states))
    column_max = np.zeros((t_max, n_states))
    policy_min_mass = np.zeros(t_max)
    stationary_tv = np.full(t_max, np.nan)
    power = matrices
    for t in range(t_max):
        if t > 0:
            power = xp.matmul(power, matrices)
        rows_l1 = xp.abs(power[:, :, None, :] - power[:, None, :, :]).sum(axis=-1)
        dobrushin[t] = float(0.5 * rows_l1.max())
        per_policy_min = power.min(axis=1)
        column_min[t] = _to_numpy(xp, per_policy_min.min(axis=0))
        column_max[t] = _to_numpy(xp, power.max(axis=1).max(axis=0))
        policy_min_mass[t] = float(per_policy_min.sum(axis=1).min())
        if stationary is not None:
            stationary_tv[t] = float(xp.abs(power - stationary[:, None, :]).sum(axis=-1).max())
    return {
        'dobrushin': dobrushin,
        'column_min': column_min,
        'column_max': column_max,
        'policy_min_mass': policy_min_mass,
        'stationary_tv': stationary_tv,
    }


def _to_numpy(xp, array):
    if xp is np:
        return np.asarray(array)
    return cp.asnumpy(array)


class KernelArithmetic:
    """Batched powers and row statistics of policy kernels with device fallback."""

    def __init__(self, backend: str = ARRAY_BACKEND):
        self.requested = backend
        self.device = self._get_best_device(backend)
        logger.info(f"Kernel arithmetic initialized - requested: {backend}, device: {self.device}")

    def _get_best_device(self, backend: str) -> str:
        """Resolve the requested backend against what is installed."""
        if backend in ("cupy", "auto") and CUPY_AVAILABLE and HAS_CUPY:
            return "cupy"
        if backend in ("torch", "auto") and TORCH_AVAILABLE and HAS_TORCH_CUDA:
            return "torch"
        if backend not in ("numpy", "auto"):
            logger.warning(f"Backend {backend} not available, falling back to numpy")
        return "numpy"

    def sweep_statistics(self, matrices: np.ndarray, t_max: int,
                         stationary: Optional[np.ndarray] = None) -> Dict[str, np.ndarray]:
        """
        Statistics of P^t for t = 1..t_max over a batch of policy kernels.

        Args:
            matrices: batch of row-stochastic matrices (B x S x S)
            t_max: largest power
            stationary: invariant measures of the batch (B x S), or None

        Returns:
            Dictionary of arrays indexed by t - 1:
                dobrushin: max over the batch of the Dobrushin coefficient of P^t
                column_min: min over batch and x of P^t(y|x), per y
                column_max: max over batch and x of P^t(y|x), per y
                policy_min_mass: min over the batch of sum_y min_x P^t(y|x)
                stationary_tv: max over batch and x of ||P^t(.|x) - pi||_1 (nan without pi)
        """
        if self.device == "cupy":
            return self._cupy_statistics(matrices, t_max, stationary)
        elif self.device == "torch":
            return self._torch_statistics(matrices, t_max, stationary)
        return _statistics_xp(np, np.asarray(matrices, dtype=float), t_max, stationary)

    def _cupy_statistics(self, matrices, t_max, stationary):
        """CuPy sweep statistics."""
        try:
            gpu_matrices = cp.asarray(matrices, dtype=cp.float64)
            gpu_stationary = cp.asarray(stationary, dtype=cp.float64) if stationary is not None else None
            return _statistics_xp(cp, gpu_matrices, t_max, gpu_stationary)
        except Exception as e:
            logger.error(f"CuPy sweep statistics failed: {e}")
            return _statistics_xp(np, np.asarray(matrices, dtype=float), t_max, stationary)

    def _torch_statistics(self, matrices, t_max, stationary):
        """PyTorch sweep statistics."""
        try:
            device = torch.device('cuda' if torch.cuda.is_available() else 'cpu')
            base = torch.tensor(matrices, dtype=torch.float64, device=device)
            pi = torch.tensor(stationary, dtype=torch.float64, device=device) if stationary is not None else None
            n_states = base.shape[1]
            stats = {
                'dobrushin': np.zeros(t_max),
                'column_min': np.zeros((t_max, n_states)),
                'column_max': np.zeros((t_max, n_states)),
                'policy_min_mass': np.zeros(t_max),
                'stationary_tv': np.full(t_max, np.nan),
            }
            power = base
            for t in range(t_max):
                if t > 0:
                    power = torch.matmul(power, base)
                rows_l1 = (power[:, :, None, :] - power[:, None, :, :]).abs().sum(dim=-1)
                stats['dobrushin'][t] = 0.5 * rows_l1.max().item()
                per_policy_min = power.min(dim=1).values
                stats['column_min'][t] = per_policy_min.min(dim=0).values.cpu().numpy()
                stats['column_max'][t] = power.max(dim=1).values.max(dim=0).values.cpu().numpy()
                stats['policy_min_mass'][t] = per_policy_min.sum(dim=1).min().item()
                if pi is not None:
                    stats['stationary_tv'][t] = (power - pi[:, None, :]).abs().sum(dim=-1).max().item()
            return stats
        except Exception as e:
            logger.error(f"PyTorch sweep statistics failed: {e}")
            return _statistics_xp(np, np.asarray(matrices, dtype=float), t_max, stationary)

    def get_performance_info(self) -> dict:
        """Get information about the active backend."""
        return {
            'requested': self.requested,
            'device': self.device,
            'cupy_available': CUPY_AVAILABLE,
            'torch_available': TORCH_AVAILABLE,
        }


# Global instance for easy access
_kernel_arithmetic = None


def get_kernel_arithmetic() -> KernelArithmetic:
    """Get or create the global kernel arithmetic instance."""
    global _kernel_arithmetic
    if _kernel_arithmetic is None:
        _kernel_arithmetic = KernelArithmetic()
    return _kernel_arithmetic
