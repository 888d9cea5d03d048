"""Kernel nonlinearities acting on Gram-matrix blocks.

A layer never sees features, only their inner products, so every kernel here
is written in terms of Gram entries: the diagonals give squared norms and the
off-diagonals give dot products.  Blocks follow the inducing / train-test
split: ``ii`` is inducing-by-inducing, ``ti`` is test-by-inducing, and of
the test-by-test block only the diagonal is carried.
"""

from dataclasses import dataclass
from typing import Any, Optional

import numpy as np

from . import autodiff as ad
from .errors import NonPositiveDiagonal, ShapeMismatch

KERNEL_KINDS = ("sq_exp", "arccos1", "normalised_gaussian")


@dataclass(frozen=True)
class KernelBlocks:
    ii: Any
    ti: Any
    tt_diag: Any

    @property
    def num_inducing(self):
        return ad.value(self.ii).shape[0]

    @property
    def num_test(self):
        return ad.value(self.ti).shape[0]

    def values(self):
        """Copy with plain arrays in place of tape nodes."""
        return KernelBlocks(np.asarray(ad.value(self.ii)), np.asarray(ad.value(self.ti)),
                            np.asarray(ad.value(self.tt_diag)))

    def check(self):
        ii, ti, tt = (np.shape(ad.value(b)) for b in (self.ii, self.ti, self.tt_diag))
        if len(ii) != 2 or ii[0] != ii[1]:
            raise ShapeMismatch(f"ii block must be square, got {ii}")
        if len(ti) != 2 or ti[1] != ii[0]:
            raise ShapeMismatch(f"ti block {ti} does not match ii block {ii}")
        if tt != (ti[0],):
            raise ShapeMismatch(f"tt diagonal {tt} does not match ti rows {ti[0]}")
        return self


@dataclass(frozen=True)
class KernelKind:
    tag: str
    lengthscale: Optional[float] = None

    def __post_init__(self):
        if self.tag not in KERNEL_KINDS:
            raise ValueError(f"unknown kernel {self.tag!r}; expected one of {KERNEL_KINDS}")
        if self.tag == "sq_exp":
            ls = 1.0 if self.lengthscale is None else float(self.lengthscale)
            if not ls > 0:
                raise ValueError("lengthscale must be positive")
            object.__setattr__(self, "lengthscale", ls)


def _with_diagonal(m, d):
    """Replace the diagonal of ``m`` by ``d``."""
    n = np.shape(ad.value(m))[0]
    off = 1.0 - np.eye(n, dtype=np.asarray(ad.value(m)).dtype)
    return ad.add(ad.mul(m, off), ad.diag_embed(d))


def _require_positive(d, what):
    vd = np.asarray(ad.value(d))
    if vd.size and not np.all(vd > 0):
        raise NonPositiveDiagonal(f"{what} diagonal has non-positive entries (min {vd.min():.3g})")


def apply_kernel(kind, g):
    """Map Gram blocks ``g`` through the kernel nonlinearity ``kind``."""
    g.check()
    d_i = ad.diag_part(g.ii)
    d_t = g.tt_diag
    if kind.tag == "sq_exp":
        c = 1.0 / (2.0 * kind.lengthscale ** 2)
        dist_ii = ad.sub(ad.add(ad.reshape(d_i, (-1, 1)), ad.reshape(d_i, (1, -1))), ad.mul(g.ii, 2.0))
        dist_ti = ad.sub(ad.add(ad.reshape(d_t, (-1, 1)), ad.reshape(d_i, (1, -1))), ad.mul(g.ti, 2.0))
        phi_ii = ad.exp(ad.mul(dist_ii, -c))
        phi_ti = ad.exp(ad.mul(dist_ti, -c))
        ones_t = np.ones(np.shape(ad.value(d_t)), dtype=np.asarray(ad.value(g.ti)).dtype)
        ones_i = np.ones(np.shape(ad.value(d_i)), dtype=ones_t.dtype)
        return KernelBlocks(_with_diagonal(phi_ii, ones_i), phi_ti, ones_t)

    _require_positive(d_i, "inducing")
    _require_positive(d_t, "train/test")
    s_i = ad.sqrt(d_i)
    s_t = ad.sqrt(d_t)
    norm_ii = ad.mul(ad.reshape(s_i, (-1, 1)), ad.reshape(s_i, (1, -1)))
    norm_ti = ad.mul(ad.reshape(s_t, (-1, 1)), ad.reshape(s_i, (1, -1)))
    rho_ii = ad.div(g.ii, norm_ii)
    rho_ti = ad.div(g.ti, norm_ti)

    if kind.tag == "normalised_gaussian":
        phi_ii = ad.exp(ad.sub(rho_ii, 1.0))
        phi_ti = ad.exp(ad.sub(rho_ti, 1.0))
        ones_t = np.ones(np.shape(ad.value(d_t)), dtype=np.asarray(ad.value(g.ti)).dtype)
        ones_i = np.ones(np.shape(ad.value(d_i)), dtype=ones_t.dtype)
        return KernelBlocks(_with_diagonal(phi_ii, ones_i), phi_ti, ones_t)

    # arccos1: Phi = |a||b| J(theta) / pi, J = sin t + (pi - t) cos t
    def j(rho):
        lim = 1.0 - ad.ARCCOS_EPS
        c = ad.clip(rho, -lim, lim)
        theta = ad.arccos(c)
        sin_t = ad.sqrt(ad.sub(1.0, ad.square(c)))
        return ad.mul(ad.add(sin_t, ad.mul(ad.sub(np.pi, theta), c)), 1.0 / np.pi)

    phi_ii = ad.mul(norm_ii, j(rho_ii))
    phi_ti = ad.mul(norm_ti, j(rho_ti))
    return KernelBlocks(_with_diagonal(phi_ii, d_i), phi_ti, d_t)


def batch_kernel_normalise(g):
    """Rescale all blocks so the inducing diagonal has mean one."""
    s = ad.mean(ad.diag_part(g.ii))
    if not float(np.asarray(ad.value(s))) > 0:
        raise NonPositiveDiagonal("mean inducing diagonal must be positive")
    inv = ad.reciprocal(s)
    return KernelBlocks(ad.mul(g.ii, inv), ad.mul(g.ti, inv), ad.mul(g.tt_diag, inv))


def skip_combine(before, after, alpha):
    """Blockwise ``alpha * after + (1 - alpha) * before``."""
    for name in ("ii", "ti", "tt_diag"):
        a, b = np.shape(ad.value(getattr(before, name))), np.shape(ad.value(getattr(after, name)))
        if a != b:
            raise ShapeMismatch(f"skip connection {name} blocks differ: {a} vs {b}")
    beta = ad.sub(1.0, alpha)

    def mix(b, a):
        return ad.add(ad.mul(a, alpha), ad.mul(b, beta))

    return KernelBlocks(mix(before.ii, after.ii), mix(before.ti, after.ti),
                        mix(before.tt_diag, after.tt_diag))
