"""Convolutional deep kernel machine layers and the model that chains them.

Train/test rows are ordered image-major then row-major over spatial
locations, so ``ti`` blocks have ``images * height * width`` rows.  Only the
diagonal of every test-by-test block is ever stored.
"""

import re
from dataclasses import dataclass, field
from typing import Any, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from . import linalg
from .errors import DecompositionFailure, ShapeMismatch
from .kernels import KernelBlocks, KernelKind, apply_kernel, batch_kernel_normalise, skip_combine
from .skr import RegConfig, skr_sample


@dataclass(frozen=True)
class SpatialShape:
    images: int
    height: int = 1
    width: int = 1

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ShapeMismatch("spatial dimensions must be >= 1")

    @property
    def size(self):
        return self.height * self.width

    @property
    def rows(self):
        return self.images * self.size

    def strided(self, stride):
        return SpatialShape(self.images, -(-self.height // stride), -(-self.width // stride))


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    inducing: int
    kernel_size: Tuple[int, int] = (1, 1)
    stride: int = 1

    def __post_init__(self):
        if self.kind not in ("fc", "conv"):
            raise ValueError(f"layer kind must be 'fc' or 'conv', got {self.kind!r}")
        if self.inducing < 1 or self.stride < 1:
            raise ValueError("inducing count and stride must be positive")
        if self.kind == "fc" and (tuple(self.kernel_size) != (1, 1) or self.stride != 1):
            raise ValueError("fc layers have no spatial extent")

    @property
    def patch_size(self):
        return self.kernel_size[0] * self.kernel_size[1]

    @classmethod
    def parse(cls, token, inducing):
        """Parse ``fc``, ``conv3``, ``conv3s2`` or ``conv1x3``-style tokens."""
        token = token.strip()
        if token == "fc":
            return cls("fc", inducing)
        m = re.fullmatch(r"conv(\d+)(?:x(\d+))?(?:s(\d+))?", token)
        if not m:
            raise ValueError(f"cannot parse layer {token!r}")
        kh = int(m.group(1))
        kw = int(m.group(2) or kh)
        return cls("conv", inducing, (kh, kw), int(m.group(3) or 1))

    def token(self):
        if self.kind == "fc":
            return "fc"
        kh, kw = self.kernel_size
        t = f"conv{kh}" if kh == kw else f"conv{kh}x{kw}"
        return t + (f"s{self.stride}" if self.stride != 1 else "")


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int
    classes: int
    inducing_inputs: int
    layers: Tuple[LayerSpec, ...] = ()
    kernel: KernelKind = KernelKind("normalised_gaussian")
    final_kernel: Optional[KernelKind] = None
    kernel_jitter: float = 1e-6
    batch_norm: bool = True
    skips: Tuple[Tuple[int, int], ...] = ()
    mixup_fc: bool = False
    precision: str = "double"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "skips", tuple(tuple(s) for s in self.skips))
        if self.final_kernel is None:
            object.__setattr__(self, "final_kernel", self.kernel)
        for start, end in self.skips:
            if not 1 <= start <= end <= len(self.layers):
                raise ValueError(f"skip ({start}, {end}) outside layers 1..{len(self.layers)}")

    @property
    def dtype(self):
        return linalg.dtype_for(self.precision)

    def inducing_before(self, layer):
        """Inducing count entering 1-based ``layer``."""
        return self.inducing_inputs if layer == 1 else self.layers[layer - 2].inducing

    @property
    def output_inducing(self):
        return self.layers[-1].inducing if self.layers else self.inducing_inputs


@dataclass
class OutputHead:
    mu: Any
    sigma_chol: Any

    @classmethod
    def from_covariance(cls, mu, sigma):
        return cls(np.asarray(mu), linalg.cholesky_lower(sigma))

    @property
    def sigma(self):
        s = np.asarray(ad.value(self.sigma_chol))
        return s @ s.T


# ---------------------------------------------------------------------------
# layer operations


def gram_factor(raw):
    """Lower factor with an exp-mapped diagonal from an unconstrained matrix."""
    return ad.add(ad.tril(raw, -1), ad.diag_embed(ad.exp(ad.diag_part(raw))))


def raw_from_factor(low):
    low = np.asarray(low)
    raw = np.tril(low, -1)
    raw[np.diag_indices_from(raw)] = np.log(np.diagonal(low))
    return raw


def conv_mix(phi, mixup, shape, kernel_size=(1, 1), stride=1):
    """Kernel convolution with inducing mix-up.

    ``mixup`` has ``D * P_out`` rows stacked patch-offset-major (block ``d``
    is the ``P_out x P_in`` map for patch offset ``d``).  ``None`` means the
    identity map, which only makes sense for ``1 x 1`` patches.
    """
    phi.check()
    kh, kw = kernel_size
    d = kh * kw
    if phi.num_test != shape.rows:
        raise ShapeMismatch(f"ti block has {phi.num_test} rows, shape implies {shape.rows}")
    if mixup is None:
        if d != 1:
            raise ShapeMismatch("identity mix-up requires a 1x1 patch")
        if stride == 1:
            return phi, shape
        p_out = phi.num_inducing
        ii = phi.ii
    else:
        m_rows, p_in = np.shape(ad.value(mixup))
        if p_in != phi.num_inducing or m_rows % d:
            raise ShapeMismatch(f"mix-up {m_rows}x{p_in} does not fit D={d}, P_in={phi.num_inducing}")
        p_out = m_rows // d
        c3 = ad.reshape(mixup, (d, p_out, p_in))
        cphi = ad.matmul(c3, phi.ii)
        ii = ad.mul(ad.sum_(ad.matmul(cphi, ad.transpose(c3, (0, 2, 1))), axis=0), 1.0 / d)

    p_in = phi.num_inducing
    out_shape = shape.strided(stride)
    grid = ad.reshape(phi.ti, (shape.images, shape.height, shape.width, p_in))
    patches = ad.extract_patches(grid, kh, kw, stride)
    if mixup is None:
        ti = ad.reshape(patches, (out_shape.rows, p_in))
    else:
        flat = ad.reshape(patches, (out_shape.rows, d * p_in))
        filters = ad.reshape(ad.transpose(c3, (0, 2, 1)), (d * p_in, p_out))
        ti = ad.mul(ad.matmul(flat, filters), 1.0 / d)

    tt_grid = ad.reshape(phi.tt_diag, (shape.images, shape.height, shape.width, 1))
    tt_patches = ad.extract_patches(tt_grid, kh, kw, stride)
    tt = ad.reshape(ad.mul(ad.sum_(tt_patches, axis=3), 1.0 / d), (out_shape.rows,))
    return KernelBlocks(ii, ti, tt), out_shape


def propagate_gram(k, g_tilde, jitter=0.0):
    """Train/test Gram blocks conditioned on the inducing block ``g_tilde``.

    Returns ``(G_ti, G_tt_diag)`` with ``G_ti = K_ti K_ii^-1 g`` and
    ``G_tt = K_ti K_ii^-1 g K_ii^-1 K_it + K_tt - K_ti K_ii^-1 K_it``, of
    which only the diagonal is formed.
    """
    k.check()
    low = ad.cholesky(k.ii, jitter)
    a_t = ad.transpose(ad.chol_solve(low, ad.transpose(k.ti)))
    g_ti = ad.matmul(a_t, g_tilde)
    explained = ad.sum_(ad.mul(g_ti, a_t), axis=1)
    prior_expl = ad.sum_(ad.mul(k.ti, a_t), axis=1)
    g_tt = ad.add(explained, ad.sub(k.tt_diag, prior_expl))
    return g_ti, g_tt


def spatial_pool(g, shape, jitter=0.0, tt_full=None):
    """Average blocks over spatial locations, one flat row per image.

    The pooled test-by-test entry ``(1/S^2) sum_rs G_(r),(s)`` is exact when
    per-image blocks ``tt_full`` of shape ``(images, S, S)`` are supplied.
    From diagonals alone the covariance is split into the part explained by
    the inducing block, whose pooled value is exact, plus a residual that is
    treated as uncorrelated across locations.
    """
    g.check()
    s = shape.size
    if g.num_test != shape.rows:
        raise ShapeMismatch(f"ti block has {g.num_test} rows, shape implies {shape.rows}")
    if s == 1 and tt_full is None:
        return g
    p = g.num_inducing
    ti_flat = ad.mean(ad.reshape(g.ti, (shape.images, s, p)), axis=1)
    if tt_full is not None:
        if np.shape(ad.value(tt_full)) != (shape.images, s, s):
            raise ShapeMismatch("tt_full must be (images, S, S)")
        return KernelBlocks(g.ii, ti_flat, ad.mean(tt_full, axis=(1, 2)))
    low = ad.cholesky(g.ii, jitter)
    w = ad.solve_triangular(low, ad.transpose(g.ti))
    resid = ad.sub(g.tt_diag, ad.sum_(ad.square(w), axis=0))
    w_flat = ad.solve_triangular(low, ad.transpose(ti_flat))
    expl_flat = ad.sum_(ad.square(w_flat), axis=0)
    resid_flat = ad.mul(ad.sum_(ad.reshape(resid, (shape.images, s)), axis=1), 1.0 / (s * s))
    return KernelBlocks(g.ii, ti_flat, ad.add(expl_flat, resid_flat))


@dataclass
class Prediction:
    probs: np.ndarray
    logits: Any
    mean: Any
    var: Any


def output_gp_predict(k_flat, head, n_mc, rng=None, jitter=0.0, noise=None):
    """Monte-Carlo class probabilities from the top-layer GP.

    Each test point gets an independent Gaussian logit per class with mean
    ``K_ti K_ii^-1 mu`` and a variance shared across classes.  ``noise``
    overrides the standard-normal draws, shape ``(n_mc, P_t, classes)``.
    """
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    k_flat.check()
    dtype = np.asarray(ad.value(k_flat.ti)).dtype
    low = ad.cholesky(k_flat.ii, jitter)
    a_t = ad.transpose(ad.chol_solve(low, ad.transpose(k_flat.ti)))
    mean = ad.matmul(a_t, head.mu)
    proj = ad.matmul(a_t, head.sigma_chol)
    var = ad.add(ad.sub(k_flat.tt_diag, ad.sum_(ad.mul(k_flat.ti, a_t), axis=1)),
                 ad.sum_(ad.square(proj), axis=1))
    floor = 1e-12 if dtype == np.float64 else 1e-8
    std = ad.sqrt(ad.clamp_min(var, floor))
    p_t, classes = np.shape(ad.value(mean))
    if noise is None:
        if rng is None:
            raise ValueError("output sampling needs an rng or explicit noise")
        noise = rng.standard_normal((n_mc, p_t, classes)).astype(dtype)
    logits = ad.gaussian_reparam_sample(ad.reshape(mean, (1, p_t, classes)),
                                        ad.reshape(std, (1, p_t, 1)), noise)
    probs = np.mean(_softmax(np.asarray(ad.value(logits))), axis=0)
    return Prediction(probs, logits, mean, var)


def _softmax(x):
    z = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# model


@dataclass
class LayerTrace:
    gram_chol: Any      # factor of the learned G_ii
    k_ii: Any           # incoming kernel block the KL term compares against
    g_tilde: Any        # regularised G_ii used for prediction
    shape: SpatialShape = None

    def gram(self):
        low = np.asarray(ad.value(self.gram_chol))
        return low @ low.T


@dataclass
class ForwardResult:
    layers: List[LayerTrace]
    k_flat: KernelBlocks
    head: OutputHead
    prediction: Prediction
    diagnostics: dict = field(default_factory=dict)

    @property
    def probs(self):
        return self.prediction.probs

    @property
    def logits(self):
        return self.prediction.logits

    def conditions(self):
        """Condition numbers of the regularised inducing Grams, per layer."""
        return [linalg.condition_number(np.asarray(ad.value(t.g_tilde))) for t in self.layers]


def _param(name, layer):
    return f"layer{layer}.{name}"


class Model:
    """Parameters plus the forward pass of a deep kernel machine.

    ``params`` maps names to arrays:

    - ``inducing_inputs``: ``(P_0, channels)``
    - ``layer{l}.gram``: unconstrained lower factor of ``G_ii`` (exp diagonal)
    - ``layer{l}.mixup``: ``(D * P_l, P_{l-1})``, absent for plain fc layers
    - ``layer{l}.skip``: logit of the skip weight for layers closing a skip
    - ``head.mu``: ``(P_L, classes)``; ``head.sigma``: raw factor of Sigma
    """

    def __init__(self, config, params):
        self.config = config
        dt = config.dtype
        self.params = {k: np.asarray(v, dtype=dt) for k, v in params.items()}

    @property
    def dtype(self):
        return self.config.dtype

    def copy(self):
        return Model(self.config, {k: v.copy() for k, v in self.params.items()})

    @classmethod
    def initialise(cls, config, train_inputs, rng, reg=None):
        """Draw inducing inputs and mix-ups, then start every G_ii at its prior.

        Inducing inputs are a random subset of training pixels (whole points
        for vector data).  The Gram factors and output covariance are set so
        that the model reproduces the fixed-kernel GP.
        """
        dt = config.dtype
        pixels = np.asarray(train_inputs, dtype=dt).reshape(-1, config.in_channels)
        n0 = config.inducing_inputs
        idx = rng.choice(len(pixels), size=n0, replace=n0 > len(pixels))
        x_i = pixels[idx].copy()
        if len(np.unique(x_i, axis=0)) < n0:
            x_i += 1e-3 * rng.standard_normal(x_i.shape).astype(dt)
        params = {"inducing_inputs": x_i}
        prev = n0
        skip_ends = {end for _, end in config.skips}
        for l, spec in enumerate(config.layers, start=1):
            needs_mix = spec.kind == "conv" or spec.inducing != prev or config.mixup_fc
            if needs_mix:
                c = rng.standard_normal((spec.patch_size * spec.inducing, prev)) / np.sqrt(prev)
                params[_param("mixup", l)] = c.astype(dt)
            if l in skip_ends:
                params[_param("skip", l)] = np.zeros((), dtype=dt)
            prev = spec.inducing
        params["head.mu"] = np.zeros((prev, config.classes), dtype=dt)
        model = cls(config, params)
        model._init_grams(reg if reg is not None else RegConfig(enabled=False))
        return model

    def _init_grams(self, reg):
        empty = np.zeros((0, 1, 1, self.config.in_channels), dtype=self.dtype)
        self.forward(empty, mode="eval", reg=reg, n_mc=1, _init=True,
                     noise=np.zeros((1, 0, self.config.classes), dtype=self.dtype))

    def learned_grams(self):
        return [gram_factor_value(self.params[_param("gram", l)]) for l in
                range(1, len(self.config.layers) + 1)]

    def gram_conditions(self):
        return [linalg.factor_condition_number(low) for low in self.learned_grams()]

    def forward(self, x, mode="eval", rng=None, reg=None, n_mc=1, tape=None, noise=None,
                params=None, _init=False):
        """Run the layer stack on a batch ``x`` of shape ``(P_t, H, W, C)``.

        ``x`` may also be ``(P_t, C)`` for vector data.  With a ``tape`` every
        parameter is registered on it so the result can be differentiated;
        ``params`` substitutes a full parameter dict (arrays or tape nodes).
        """
        cfg = self.config
        reg = reg if reg is not None else RegConfig(enabled=False)
        dt = self.dtype
        x = np.asarray(x, dtype=dt)
        if x.ndim == 2:
            x = x[:, None, None, :]
        if x.ndim != 4 or x.shape[-1] != cfg.in_channels:
            raise ShapeMismatch(f"inputs must be (P, H, W, {cfg.in_channels}), got {x.shape}")
        shape = SpatialShape(x.shape[0], x.shape[1], x.shape[2])
        if params is not None:
            p = params
        elif tape is not None:
            p = {k: tape.param(k, v) for k, v in self.params.items()}
        else:
            p = self.params
        jitter = cfg.kernel_jitter

        x_i = p["inducing_inputs"]
        x_t = x.reshape(shape.rows, cfg.in_channels)
        inv_c = 1.0 / cfg.in_channels
        g = KernelBlocks(
            ad.mul(ad.matmul(x_i, ad.transpose(x_i)), inv_c),
            ad.mul(ad.matmul(x_t, ad.transpose(x_i)), inv_c),
            np.sum(x_t * x_t, axis=1) * inv_c,
        )

        inputs = {}
        starts = {start for start, _ in cfg.skips}
        traces = []
        for l, spec in enumerate(cfg.layers, start=1):
            try:
                if l in starts:
                    inputs[l] = g
                h = batch_kernel_normalise(g) if cfg.batch_norm else g
                phi = apply_kernel(cfg.kernel, h)
                k, out_shape = conv_mix(phi, p.get(_param("mixup", l)), shape,
                                        spec.kernel_size, spec.stride)
                if _init:
                    kv = np.asarray(ad.value(k.ii))
                    self.params[_param("gram", l)] = raw_from_factor(
                        linalg.cholesky_lower(kv, jitter)).astype(dt)
                    p = self.params
                low = gram_factor(p[_param("gram", l)])
                g_ii = ad.matmul(low, ad.transpose(low))
                g_tilde = skr_sample(g_ii, reg, rng, mode, chol=low)
                g_ti, g_tt = propagate_gram(k, g_tilde, jitter)
                out = KernelBlocks(g_tilde, g_ti, g_tt)
                for start, end in cfg.skips:
                    if end == l:
                        alpha = ad.sigmoid(p[_param("skip", l)])
                        out = skip_combine(inputs[start], out, alpha)
                traces.append(LayerTrace(low, k.ii, g_tilde, out_shape))
                g, shape = out, out_shape
            except DecompositionFailure as exc:
                if exc.layer is None:
                    exc.layer = l
                raise

        flat = spatial_pool(g, shape, jitter)
        k_flat = apply_kernel(cfg.final_kernel, flat)
        if _init:
            kv = np.asarray(ad.value(k_flat.ii))
            self.params["head.sigma"] = raw_from_factor(linalg.cholesky_lower(kv, jitter)).astype(dt)
            p = self.params
        head = OutputHead(p["head.mu"], gram_factor(p["head.sigma"]))
        try:
            pred = output_gp_predict(k_flat, head, n_mc, rng, jitter, noise)
        except DecompositionFailure as exc:
            if exc.layer is None:
                exc.layer = len(cfg.layers) + 1
            raise
        return ForwardResult(traces, k_flat, head, pred)


def gram_factor_value(raw):
    raw = np.asarray(raw)
    low = np.tril(raw, -1)
    low[np.diag_indices_from(low)] = np.exp(np.diagonal(raw))
    return low
