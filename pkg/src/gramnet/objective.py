"""Training objective: expected log-likelihood minus KL regularisers.

Layer regularisers compare the learned inducing Gram ``G`` with the kernel
``K`` computed from the layer below.  The exact form is the Gaussian KL
without its one-half, ``Tr(K^-1 G) - logdet(K^-1 G) - P``; the Taylor form
is its second-order expansion in the eigenvalues of ``G^-1 K``.
"""

from dataclasses import dataclass
from typing import Any, Sequence, Union

import numpy as np

from . import autodiff as ad

KL_MODES = ("exact", "taylor")


@dataclass(frozen=True)
class ObjectiveConfig:
    nu: Union[float, Sequence[float]] = 0.0
    kl_mode: str = "taylor"
    mc_samples_train: int = 1

    def __post_init__(self):
        if self.kl_mode not in KL_MODES:
            raise ValueError(f"kl_mode must be one of {KL_MODES}, got {self.kl_mode!r}")
        if self.mc_samples_train < 1:
            raise ValueError("mc_samples_train must be >= 1")
        nus = np.atleast_1d(np.asarray(self.nu, dtype=float))
        if np.any(nus < 0) or not np.all(np.isfinite(nus)):
            raise ValueError("nu must be finite and non-negative")

    def nu_for(self, layer, depth):
        """Strength for 1-based ``layer`` out of ``depth`` hidden layers."""
        nus = np.atleast_1d(np.asarray(self.nu, dtype=float))
        if nus.size == 1:
            return float(nus[0])
        if nus.size != depth:
            raise ValueError(f"{nus.size} nu values given for {depth} layers")
        return float(nus[layer - 1])


def _jittered(k, jitter):
    if not jitter:
        return k
    n = np.shape(ad.value(k))[0]
    return ad.add(k, jitter * np.eye(n, dtype=np.asarray(ad.value(k)).dtype))


def kl_exact_core(g, k, g_chol=None, jitter=0.0):
    """``Tr(K^-1 G) - logdet(K^-1 G) - P`` via Cholesky factors of both."""
    l_g = ad.cholesky(g) if g_chol is None else g_chol
    l_k = ad.cholesky(_jittered(k, jitter))
    p = np.shape(ad.value(l_k))[0]
    tr = ad.frobenius_norm_sq(ad.solve_triangular(l_k, l_g))
    return ad.sub(ad.add(ad.sub(tr, ad.logdet_chol(l_g)), ad.logdet_chol(l_k)), float(p))


def kl_taylor_core(g, k, g_chol=None, jitter=0.0):
    """``1/2 ||G^-1 K - I||^2`` with the inverse applied through ``G``'s factor.

    Evaluated as ``1/2 ||L^-1 K L^-T - I||_F^2`` (``G = L L^T``).  That matrix
    is similar to ``G^-1 K - I`` and symmetric, so the value is
    ``1/2 sum (lambda - 1)^2`` over the eigenvalues of ``G^-1 K``: the
    second-order expansion of the exact form, invariant under congruence.
    It equals the literal Frobenius norm whenever ``G`` and ``K`` commute.
    """
    l_g = ad.cholesky(g) if g_chol is None else g_chol
    kj = _jittered(k, jitter)
    p = np.shape(ad.value(l_g))[0]
    half = ad.solve_triangular(l_g, kj)
    m = ad.solve_triangular(l_g, ad.transpose(half))
    eye = np.eye(p, dtype=np.asarray(ad.value(l_g)).dtype)
    return ad.mul(ad.frobenius_norm_sq(ad.sub(m, eye)), 0.5)


def kl_core(mode, g, k, g_chol=None, jitter=0.0):
    if mode == "exact":
        return kl_exact_core(g, k, g_chol, jitter)
    if mode == "taylor":
        return kl_taylor_core(g, k, g_chol, jitter)
    raise ValueError(f"unknown kl mode {mode!r}")


def output_kl(head, k_ii, jitter=0.0):
    """Sum over classes of ``KL(N(mu_c, Sigma) || N(0, K))``."""
    l_k = ad.cholesky(_jittered(k_ii, jitter))
    l_s = head.sigma_chol
    p, classes = np.shape(ad.value(head.mu))
    tr = ad.frobenius_norm_sq(ad.solve_triangular(l_k, l_s))
    maha = ad.frobenius_norm_sq(ad.solve_triangular(l_k, head.mu))
    per_class = ad.sub(ad.add(ad.sub(tr, float(p)), ad.logdet_chol(l_k)), ad.logdet_chol(l_s))
    return ad.mul(ad.add(ad.mul(per_class, float(classes)), maha), 0.5)


def expected_log_likelihood(logits, labels):
    """Mean categorical log-likelihood over Monte-Carlo draws and datapoints."""
    return ad.mean(ad.softmax_log_likelihood(logits, labels))


@dataclass
class ObjectiveTerms:
    loss: Any
    objective: float
    ell: float
    kl_total: float
    layer_kls: list


def assemble_objective(result, labels, cfg, n_train, jitter=0.0):
    """Per-datapoint objective for a minibatch; ``loss`` is its negation.

    KL terms are divided by the training-set size so minibatch gradients are
    unbiased for the full-data objective per datapoint.
    """
    if n_train < 1:
        raise ValueError("n_train must be >= 1")
    ell = expected_log_likelihood(result.logits, labels)
    kl = output_kl(result.head, result.k_flat.ii, jitter)
    layer_kls = []
    depth = len(result.layers)
    for l, trace in enumerate(result.layers, start=1):
        nu = cfg.nu_for(l, depth)
        if nu == 0.0:
            layer_kls.append(0.0)
            continue
        g = ad.matmul(trace.gram_chol, ad.transpose(trace.gram_chol))
        term = kl_core(cfg.kl_mode, g, trace.k_ii, trace.gram_chol, jitter)
        layer_kls.append(float(np.asarray(ad.value(term))))
        kl = ad.add(kl, ad.mul(term, nu))
    obj = ad.sub(ell, ad.mul(kl, 1.0 / n_train))
    return ObjectiveTerms(ad.neg(obj), float(np.asarray(ad.value(obj))),
                          float(np.asarray(ad.value(ell))), float(np.asarray(ad.value(kl))),
                          layer_kls)
