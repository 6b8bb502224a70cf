"""Domain conversions between linear radiance and display-referred images.

LDR simulation from HDR ground truth, composition of the final HDR image
from the well-exposed input content and the network's log-domain
prediction, logarithmic range compression, and the scalar image metrics
used for evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, DomainError, NumericError

LUMA_WEIGHTS = np.array([0.2126, 0.7152, 0.0722])  # BT.709

DEFAULT_GAMMA = 2.0
DEFAULT_MU = 500.0
DEFAULT_SATURATION_PERCENTILE = 93.0
MSE_NORM_PERCENTILE = 99.9
MSE_DISPLAY_EXPONENT = 1.0 / 2.2


def rgb_to_gray(image):
    """BT.709 luma of a 3-channel image, shape (H,W) or (N,H,W)."""
    px = image.pixels if hasattr(image, "pixels") else np.asarray(image)
    if px.ndim not in (3, 4) or px.shape[-3] != 3:
        raise DimensionError(f"expected 3 channels, got shape {px.shape}")
    w = LUMA_WEIGHTS.astype(px.dtype)
    if px.ndim == 3:
        return np.einsum("c,chw->hw", w, px)
    return np.einsum("c,nchw->nhw", w, px)


@dataclass
class HdrImage:
    """Linear-radiance RGB image, channels first."""

    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.ndim != 3 or self.pixels.shape[0] != 3:
            raise DimensionError(f"HdrImage wants (3,H,W), got {self.pixels.shape}")
        if not np.all(np.isfinite(self.pixels)):
            raise NumericError("HdrImage contains non-finite values")
        if np.any(self.pixels < 0):
            raise DomainError("HdrImage radiance must be non-negative")

    @property
    def shape(self):
        return self.pixels.shape


@dataclass
class LdrImage:
    """Display-referred RGB image in [0,1], channels first."""

    pixels: np.ndarray
    bit_depth: int = 8

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.ndim != 3 or self.pixels.shape[0] != 3:
            raise DimensionError(f"LdrImage wants (3,H,W), got {self.pixels.shape}")
        if np.any(self.pixels < 0) or np.any(self.pixels > 1):
            raise DomainError("LdrImage values must lie in [0,1]")

    @property
    def shape(self):
        return self.pixels.shape


@dataclass(frozen=True)
class CameraCurve:
    """Mapping between linear values in [0,1] and display values in [0,1].

    "gamma" uses t = x**(1/gamma); "sigmoid" uses the s-shaped
    t = (1+sigma) * x**n / (x**n + sigma), which is invertible on [0,1].
    """

    kind: str = "gamma"
    gamma: float = DEFAULT_GAMMA
    n: float = 0.9
    sigma: float = 0.6
    exposure: float = 1.0

    def __post_init__(self):
        if self.kind not in ("gamma", "sigmoid"):
            raise DomainError(f"unknown camera curve {self.kind!r}")
        if self.exposure <= 0:
            raise DomainError("exposure scale must be positive")

    def apply(self, linear):
        x = np.clip(linear, 0.0, 1.0)
        if self.kind == "gamma":
            return np.power(x, 1.0 / self.gamma)
        xn = np.power(x, self.n)
        return (1.0 + self.sigma) * xn / (xn + self.sigma)

    def linearize(self, display):
        t = np.clip(display, 0.0, 1.0)
        if self.kind == "gamma":
            return np.power(t, self.gamma)
        # Invert t = (1+s) x^n / (x^n + s)  =>  x = (s t / (1+s-t))^(1/n)
        return np.power(self.sigma * t / (1.0 + self.sigma - t), 1.0 / self.n)


def apply_exposure(hdr, scale, curve=None, quantize_bits=8):
    """Expose radiance at a known multiplier: clip, encode, quantize."""
    curve = curve or CameraCurve()
    h = hdr.pixels if isinstance(hdr, HdrImage) else np.asarray(hdr)
    if scale <= 0:
        raise DomainError("exposure multiplier must be positive")
    clipped = np.clip(h * h.dtype.type(scale), 0.0, 1.0)
    t = curve.apply(clipped).astype(h.dtype, copy=False)
    if quantize_bits:
        levels = (1 << quantize_bits) - 1
        t = (np.rint(t * levels) / levels).astype(h.dtype, copy=False)
    return LdrImage(t, bit_depth=quantize_bits or 0)


def simulate_ldr(hdr, saturation_percentile=DEFAULT_SATURATION_PERCENTILE,
                 curve=None, quantize_bits=8):
    """Virtual camera: expose, clip, apply the camera curve, quantize.

    The image is scaled so the given luminance percentile lands at 1.0;
    everything brighter saturates. ``quantize_bits`` of 0 (or None)
    disables quantization.
    """
    curve = curve or CameraCurve()
    h = hdr.pixels if isinstance(hdr, HdrImage) else HdrImage(np.asarray(hdr)).pixels
    if not 0 < saturation_percentile < 100:
        raise DomainError("saturation percentile must lie in (0,100)")
    if h.max() <= 0:
        raise DomainError("cannot simulate an LDR exposure of an all-zero image")
    return apply_exposure(h, exposure_scale(h, saturation_percentile, curve),
                          curve, quantize_bits)


def exposure_scale(hdr, saturation_percentile=DEFAULT_SATURATION_PERCENTILE, curve=None):
    """The multiplier simulate_ldr applies before clipping (for pairing targets)."""
    curve = curve or CameraCurve()
    h = hdr.pixels if isinstance(hdr, HdrImage) else np.asarray(hdr)
    lum = rgb_to_gray(h)
    pivot = np.percentile(lum, saturation_percentile)
    if pivot <= 0:
        pivot = lum.max()
    if pivot <= 0:
        raise DomainError("cannot expose an all-zero image")
    return curve.exposure / pivot


def compose_hdr(ldr, mask, y_hat, gamma=DEFAULT_GAMMA):
    """Blend linearized input with the prediction into the final HDR image.

    Well-exposed pixels (mask 1) take the linearized input; saturated ones
    (mask 0) take exp(prediction) - 1. Clamped at zero from below.
    """
    t = ldr.pixels if isinstance(ldr, LdrImage) else np.asarray(ldr)
    y = np.asarray(y_hat)
    m = np.asarray(mask)
    if t.shape != m.shape or t.shape != y.shape:
        raise DimensionError(f"shape mismatch: ldr {t.shape}, mask {m.shape}, prediction {y.shape}")
    if np.any(t < 0) or np.any(t > 1):
        raise DomainError("compose_hdr input image must lie in [0,1]")
    with np.errstate(over="ignore"):
        e = np.exp(y)
    if not np.all(np.isfinite(e)):
        bad = np.argwhere(~np.isfinite(e))[0]
        raise NumericError(f"exp overflow in prediction at index {tuple(int(i) for i in bad)}")
    hdr = m * np.power(t, gamma) + (1.0 - m) * (e - 1.0)
    return HdrImage(np.maximum(hdr, 0.0))


def mu_law_compress(values, mu=DEFAULT_MU):
    """Logarithmic range compressor log(1+mu*x)/log(1+mu) on [0,1]."""
    x = values.pixels if isinstance(values, HdrImage) else np.asarray(values)
    if np.any(x < 0):
        raise DomainError("mu-law input must be non-negative")
    return np.log1p(mu * x) / np.log1p(mu)


def mse_gamma(predicted, truth):
    """Mean squared error between display-encoded images.

    Both images are normalized by the truth's 99.9th-percentile luminance,
    clipped to [0,1], and encoded with exponent 1/2.2 before the mean
    square is taken over all pixels and channels.
    """
    p = predicted.pixels if isinstance(predicted, HdrImage) else np.asarray(predicted)
    g = truth.pixels if isinstance(truth, HdrImage) else np.asarray(truth)
    if p.shape != g.shape:
        raise DimensionError(f"shape mismatch {p.shape} vs {g.shape}")
    a, b = _display_encode_pair(p, g)
    return float(np.mean(np.square(a - b)))


def masked_region_mse_gamma(predicted, truth, mask):
    """mse_gamma restricted to saturated content, weighted by (1 - mask).

    Returns NaN when the mask is all ones (no saturated support).
    """
    p = predicted.pixels if isinstance(predicted, HdrImage) else np.asarray(predicted)
    g = truth.pixels if isinstance(truth, HdrImage) else np.asarray(truth)
    w = 1.0 - np.asarray(mask)
    if p.shape != g.shape or p.shape != w.shape:
        raise DimensionError("shape mismatch in masked mse")
    total = w.sum()
    if total <= 0:
        return float("nan")
    a, b = _display_encode_pair(p, g)
    return float((w * np.square(a - b)).sum() / total)


def _display_encode_pair(p, g):
    norm = np.percentile(rgb_to_gray(g), MSE_NORM_PERCENTILE)
    if norm <= 0:
        raise DomainError("degenerate truth image: normalization luminance is zero")
    a = np.power(np.clip(p / norm, 0.0, 1.0), MSE_DISPLAY_EXPONENT)
    b = np.power(np.clip(g / norm, 0.0, 1.0), MSE_DISPLAY_EXPONENT)
    return a, b


def saturation_percentage(ldr, alpha=0.96):
    """Percentage of pixels whose brightest channel exceeds ``alpha``."""
    t = ldr.pixels if isinstance(ldr, LdrImage) else np.asarray(ldr)
    if np.any(t < 0) or np.any(t > 1):
        raise DomainError("saturation_percentage input must lie in [0,1]")
    saturated = t.max(axis=0) > alpha
    return 100.0 * float(saturated.mean())
