"""Training objectives: reconstruction, perceptual, style, and inpainting.

The perceptual terms compare feature activations of a small frozen
convolution pyramid (a stand-in for pretrained VGG taps; real weights can
be loaded from a checkpoint). Features are taken after each stage's
pooling. All l1 terms are mean-reduced so the weights are independent of
resolution.

Functions in this module accept either plain arrays or graph Tensors for
the prediction argument and return scalar Tensors; call ``.item()`` for
the float value.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, DomainError
from .pipeline import DEFAULT_MU
from .tensor import Tensor


@dataclass(frozen=True)
class LossWeights:
    reconstruction: float = 6.0
    perceptual: float = 1.0
    vgg: float = 1.0
    style: float = 120.0
    mu: float = DEFAULT_MU

    def __post_init__(self):
        for name in ("reconstruction", "perceptual", "vgg", "style", "mu"):
            if getattr(self, name) < 0:
                raise DomainError(f"loss weight {name} must be non-negative")


@dataclass(frozen=True)
class InpaintingLossWeights:
    """Term weights for the inpainting pre-training objective."""

    valid: float = 1.0
    hole: float = 6.0
    vgg: float = 0.05
    style: float = 120.0
    tv: float = 0.1


@dataclass
class LossReport:
    """Scalar summary of one objective evaluation.

    ``components`` holds the raw per-term values, ``weighted`` the
    weight-scaled contributions; their sum reproduces ``total``.
    ``node`` is the differentiable total for the backward pass.
    """

    total: float
    components: dict
    weighted: dict
    node: Tensor | None = field(default=None, repr=False)

    @property
    def reconstruction(self):
        return self.components.get("reconstruction")

    @property
    def vgg(self):
        return self.components.get("vgg")

    @property
    def style(self):
        return self.components.get("style")


class FeatureExtractor:
    """Frozen convolution pyramid: per stage conv 3x3 -> relu -> avg_pool(2).

    Weights are fixed at construction (seeded random by default, or loaded
    arrays) and never updated; gradients flow through to the input only.
    """

    def __init__(self, channels=(16, 32, 64), kernel_size=3, in_channels=3,
                 seed=0, arrays=None):
        self.stages = []
        if arrays is not None:
            n_stages = sum(1 for k in arrays if k.endswith(".weight"))
            if n_stages == 0:
                raise DimensionError("no extractor stages in arrays")
            for i in range(n_stages):
                w = np.array(arrays[f"extractor.stage{i}.weight"], dtype=np.float64)
                b = np.array(arrays[f"extractor.stage{i}.bias"], dtype=np.float64)
                self._add_stage(w, b)
            self.channels = tuple(w.shape[0] for w, _ in self.stages)
            self.kernel_size = self.stages[0][0].shape[2]
            self.in_channels = self.stages[0][0].shape[1]
        else:
            self.channels = tuple(channels)
            self.kernel_size = kernel_size
            self.in_channels = in_channels
            rng = np.random.default_rng(seed)
            fan_prev = in_channels
            for out in self.channels:
                scale = np.sqrt(2.0 / (fan_prev * kernel_size * kernel_size))
                w = rng.normal(0.0, scale, size=(out, fan_prev, kernel_size, kernel_size))
                b = np.zeros(out)
                self._add_stage(w, b)
                fan_prev = out

    def _add_stage(self, w, b):
        for arr in (w, b):
            arr.setflags(write=False)
        self.stages.append((w, b))

    def to_arrays(self):
        out = {}
        for i, (w, b) in enumerate(self.stages):
            out[f"extractor.stage{i}.weight"] = w.astype(np.float32)
            out[f"extractor.stage{i}.bias"] = b.astype(np.float32)
        return out

    def features(self, x):
        """Tap activations after each stage's pooling, outermost first."""
        t = x if isinstance(x, Tensor) else T.constant(x)
        if t.data.ndim == 3:
            t = T.reshape(t, (1,) + t.data.shape)
        if t.data.shape[1] != self.in_channels:
            raise DimensionError(
                f"extractor expects {self.in_channels} channels, got {t.data.shape}")
        pad = (self.kernel_size - 1) // 2
        taps = []
        for w, b in self.stages:
            wt = T.constant(w.astype(t.data.dtype, copy=False))
            bt = T.constant(b.astype(t.data.dtype, copy=False))
            t = T.relu(T.conv2d(t, wt, bt, stride=1, padding=pad, pad_value=0.0))
            t = T.avg_pool(t, 2)
            taps.append(t)
        return taps


def _lift4(x, dtype=None):
    """Promote an array/Tensor image to a 4-D (N,C,H,W) Tensor."""
    if hasattr(x, "pixels"):
        x = x.pixels
    t = x if isinstance(x, Tensor) else T.constant(np.asarray(x), dtype=dtype)
    if t.data.ndim == 3:
        t = T.reshape(t, (1,) + t.data.shape)
    if t.data.ndim != 4:
        raise DimensionError(f"expected an image or batch, got shape {t.data.shape}")
    return t


def _const4(x, dtype):
    if hasattr(x, "pixels"):
        x = x.pixels
    a = np.asarray(x, dtype=dtype)
    if a.ndim == 3:
        a = a[None]
    if a.ndim != 4:
        raise DimensionError(f"expected an image or batch, got shape {a.shape}")
    return a


def reconstruction_loss(y_hat, hdr, mask):
    """Mean l1 distance to log radiance, restricted to saturated content."""
    y = _lift4(y_hat)
    h = _const4(hdr, y.data.dtype)
    m = _const4(mask, y.data.dtype)
    if h.shape != y.data.shape or m.shape != y.data.shape:
        raise DimensionError(
            f"shape mismatch: prediction {y.data.shape}, truth {h.shape}, mask {m.shape}")
    target = np.log1p(h)
    return T.tmean(T.absolute((y - target) * (1.0 - m)))


def blend_with_ground_truth(hdr, y_hat, mask, literal_log=False):
    """Ground truth where valid, prediction where saturated.

    The prediction is mapped back to linear radiance with exp(y) - 1 before
    blending; ``literal_log`` blends the raw log-domain values instead.
    Returns a Tensor when given a Tensor prediction, else an array. May be
    slightly negative where the prediction is; callers clamp as needed.
    """
    if isinstance(y_hat, Tensor):
        y = _lift4(y_hat)
        h = _const4(hdr, y.data.dtype)
        m = _const4(mask, y.data.dtype)
        pred = y if literal_log else y.exp() - 1.0
        return m * h + (1.0 - m) * pred
    h = np.asarray(hdr.pixels if hasattr(hdr, "pixels") else hdr)
    y = np.asarray(y_hat)
    m = np.asarray(mask)
    if h.shape != y.shape or m.shape != y.shape:
        raise DimensionError("shape mismatch in blend")
    pred = y if literal_log else np.expm1(y)
    return m * h + (1.0 - m) * pred


def gram_matrix(features):
    """Channel covariance phi^T phi / (C*H*W) of a (H*W, C) feature matrix."""
    if isinstance(features, Tensor):
        if features.data.ndim != 2:
            raise DimensionError(f"gram_matrix wants (HW, C), got {features.data.shape}")
        k = features.data.size
        return T.matmul(T.transpose(features, (1, 0)), features) / k
    phi = np.asarray(features)
    if phi.ndim != 2:
        raise DimensionError(f"gram_matrix wants (HW, C), got {phi.shape}")
    return phi.T @ phi / phi.size


def _batched_gram(t):
    """(N,C,H,W) -> (N,C,C), each sample normalized by C*H*W."""
    n, c, h, w = t.data.shape
    flat = T.reshape(t, (n, c, h * w))
    return T.matmul(flat, T.transpose(flat, (0, 2, 1))) / (c * h * w)


def _mu_law_node(x, mu):
    # x must be non-negative; callers clamp predictions first.
    return (x * mu + 1.0).log() * (1.0 / np.log1p(mu))


def perceptual_loss(h_tilde, hdr, extractor, weights=None, norm_scale=None):
    """Feature and style distances between a blend and its ground truth.

    Both images are divided by the ground truth's maximum (or an explicit
    ``norm_scale``) and mu-law compressed before feature extraction. The
    blend is clamped at zero first so the compressor stays in domain.
    Returns (vgg, style) as scalar Tensors.
    """
    weights = weights or LossWeights()
    a = _lift4(h_tilde)
    h = _const4(hdr, a.data.dtype)
    if h.shape != a.data.shape:
        raise DimensionError(f"shape mismatch {a.data.shape} vs {h.shape}")
    scale = float(h.max()) if norm_scale is None else float(norm_scale)
    if scale <= 0:
        scale = 1.0
    mu = weights.mu
    ca = _mu_law_node(T.relu(a) / scale, mu)
    # Same operation sequence as the graph path so that identical images
    # produce bit-identical compressed inputs (and an exactly zero loss).
    cb = _mu_law_node(T.constant(np.clip(h, 0.0, None)) / scale, mu).data
    taps_a = extractor.features(ca)
    taps_b = extractor.features(T.constant(cb))
    vgg = None
    style = None
    for fa, fb in zip(taps_a, taps_b):
        dv = T.tmean(T.absolute(fa - fb.data))
        ds = T.tmean(T.absolute(_batched_gram(fa) - _batched_gram(fb).data))
        vgg = dv if vgg is None else vgg + dv
        style = ds if style is None else style + ds
    return vgg, style


def total_loss(y_hat, hdr, mask, extractor, weights=None):
    """The fine-tuning objective: weighted reconstruction plus perceptual.

    Perceptual terms are skipped (reported as zero) when their combined
    weight is zero, which is the pure-l1 ablation.
    """
    weights = weights or LossWeights()
    y = _lift4(y_hat)
    rec = reconstruction_loss(y, hdr, mask)
    if weights.perceptual > 0:
        blend = blend_with_ground_truth(hdr, y, mask)
        vgg, style = perceptual_loss(blend, hdr, extractor, weights)
        node = rec * weights.reconstruction + (vgg * weights.vgg + style * weights.style) * weights.perceptual
        components = {"reconstruction": rec.item(), "vgg": vgg.item(), "style": style.item()}
    else:
        node = rec * weights.reconstruction
        components = {"reconstruction": rec.item(), "vgg": 0.0, "style": 0.0}
    weighted = {
        "reconstruction": weights.reconstruction * components["reconstruction"],
        "vgg": weights.perceptual * weights.vgg * components["vgg"],
        "style": weights.perceptual * weights.style * components["style"],
    }
    return LossReport(total=node.item(), components=components, weighted=weighted, node=node)


def _dilate_binary(mask2d):
    """3x3 binary dilation of a (N,H,W) {0,1} array."""
    p = np.pad(mask2d, ((0, 0), (1, 1), (1, 1)))
    out = np.zeros_like(mask2d)
    for dy in (0, 1, 2):
        for dx in (0, 1, 2):
            np.maximum(out, p[:, dy:dy + mask2d.shape[1], dx:dx + mask2d.shape[2]], out=out)
    return out


def inpainting_loss(predicted, truth, hole_mask, extractor, weights=None):
    """Pre-training objective: masked l1, perceptual, style, and smoothness.

    ``hole_mask`` is binary: 0 marks holes, 1 valid pixels. The perceptual
    and style terms are evaluated for both the raw prediction and the
    composite (truth outside holes, prediction inside); total variation is
    charged on the composite over a one-pixel dilation of the hole region.
    """
    weights = weights or InpaintingLossWeights()
    p = _lift4(predicted)
    g = _const4(truth, p.data.dtype)
    m = _const4(hole_mask, p.data.dtype)
    if g.shape != p.data.shape or m.shape != p.data.shape:
        raise DimensionError("shape mismatch in inpainting loss")
    if not np.all((m == 0) | (m == 1)):
        raise DomainError("inpainting hole mask must be binary")

    residual = p - g
    valid = T.tmean(T.absolute(residual * m))
    hole = T.tmean(T.absolute(residual * (1.0 - m)))
    comp = m * g + (1.0 - m) * p

    taps_g = [t.data for t in extractor.features(T.constant(g))]
    vgg = None
    style = None
    for img in (p, comp):
        for fa, fb in zip(extractor.features(img), taps_g):
            dv = T.tmean(T.absolute(fa - fb))
            ds = T.tmean(T.absolute(_batched_gram(fa) - _gram_const(fb)))
            vgg = dv if vgg is None else vgg + dv
            style = ds if style is None else style + ds

    # Smoothness is charged on the composite's deviation from truth so the
    # term vanishes exactly when the prediction matches the ground truth.
    hole2d = (m.min(axis=1) < 1).astype(p.data.dtype)
    region = _dilate_binary(hole2d)[:, None, :, :]
    dev = comp - g
    dx = dev[:, :, :, 1:] - dev[:, :, :, :-1]
    dy = dev[:, :, 1:, :] - dev[:, :, :-1, :]
    total_count = float(np.prod(g.shape))
    tv = (T.tsum(T.absolute(dx * region[:, :, :, :-1])) +
          T.tsum(T.absolute(dy * region[:, :, :-1, :]))) / total_count

    node = (valid * weights.valid + hole * weights.hole + vgg * weights.vgg +
            style * weights.style + tv * weights.tv)
    components = {"valid": valid.item(), "hole": hole.item(), "vgg": vgg.item(),
                  "style": style.item(), "tv": tv.item()}
    weighted = {k: getattr(weights, k) * v for k, v in components.items()}
    return LossReport(total=node.item(), components=components, weighted=weighted, node=node)


def _gram_const(feat):
    n, c, h, w = feat.shape
    flat = feat.reshape(n, c, h * w)
    return flat @ flat.transpose(0, 2, 1) / (c * h * w)
