"""Stochastic kernel regularisation.

During training the learned inducing Gram matrix is swapped for a Wishart
draw whose mean is that matrix; at evaluation the matrix is used as is.  The
same jitter is added on both paths so predictions are not biased between
them.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import linalg

PSD_CHECK_JITTER = 1e-10


@dataclass(frozen=True)
class RegConfig:
    gamma: Optional[int] = None
    jitter: float = 0.0
    enabled: bool = True
    gamma_ratio: Optional[float] = None

    def __post_init__(self):
        if self.gamma is not None and (int(self.gamma) != self.gamma or self.gamma < 1):
            raise ValueError(f"gamma must be a positive integer, got {self.gamma}")
        if not np.isfinite(self.jitter) or self.jitter < 0:
            raise ValueError(f"jitter must be finite and non-negative, got {self.jitter}")
        if self.gamma_ratio is not None and not self.gamma_ratio > 0:
            raise ValueError("gamma_ratio must be positive")

    def gamma_for(self, num_inducing):
        """Degrees of freedom used for a layer with ``num_inducing`` points."""
        if self.gamma is not None:
            return int(self.gamma)
        if self.gamma_ratio is not None:
            return max(1, int(round(num_inducing * self.gamma_ratio)))
        return int(num_inducing)


def sample_variance_scale(gamma):
    if gamma < 1:
        raise ValueError("gamma must be >= 1")
    return 1.0 / gamma


def skr_sample(g_ii, cfg, rng, mode="train", chol=None):
    """Regularised inducing Gram matrix for one forward pass.

    In training mode (with ``cfg.enabled``) returns ``A A^T / gamma +
    jitter * I`` where the ``gamma`` columns of ``A`` are draws from
    ``N(0, g_ii)``.  Otherwise returns ``g_ii + jitter * I``.  ``chol`` may
    supply an existing lower factor of ``g_ii`` (so that gradients reach it
    through the reparameterised draw); without it one is computed here.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    gv = np.asarray(ad.value(g_ii))
    n = gv.shape[0]
    eye = np.eye(n, dtype=gv.dtype)
    if mode == "eval" or not cfg.enabled:
        if chol is None:
            linalg.cholesky_lower(gv, PSD_CHECK_JITTER)
        return ad.add(g_ii, cfg.jitter * eye) if cfg.jitter else g_ii
    if chol is None:
        chol = ad.cholesky(g_ii, PSD_CHECK_JITTER)
    gamma = cfg.gamma_for(n)
    # drawn in double so both precisions see the same stream
    z = rng.standard_normal((n, gamma)).astype(gv.dtype)
    a = ad.matmul(chol, z)
    sample = ad.mul(ad.matmul(a, ad.transpose(a)), 1.0 / gamma)
    return ad.add(sample, cfg.jitter * eye) if cfg.jitter else sample
