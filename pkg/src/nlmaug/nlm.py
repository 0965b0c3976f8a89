"""Non-local means denoising for grayscale and RGB images.

Every output pixel is a weighted average of the pixels in a square search
window around it. The weight of a candidate pixel ``q`` for target ``p`` is::

    W(p, q) = exp(-max(d2(p, q) - 2 * sigma**2, 0) / h**2)

where ``d2`` is the mean squared difference between the two square patches
centred on ``p`` and ``q``, averaged over patch pixels and channels. Weights
are computed once from all channels and shared by every channel's average.
Reads outside the image use mirror reflection without edge repetition.

Three implementations live here:

* :func:`denoise_pixel` -- scalar loops over single pixels, the literal form;
* :func:`denoise_image_reference` -- per-pixel, vectorised over the window;
* :func:`denoise_image` / :func:`denoise_batch` -- the production kernel, which
  loops over window displacements and processes all pixels (and all images of
  a batch) at once.

All three accumulate the weighted sum over the search window in the same
row-major displacement order. The average is formed as
``I(p) + sum_q W (I(q) - I(p)) / sum_q W``, which equals the plain weighted
mean but reproduces constant regions exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_images
from .tensor_image import ImageTensor, PixelCoord, get_pixel_padded, pad_mirror

# Grey levels per unit of pixel value; h is conventionally quoted on the 8-bit scale.
INTENSITY_LEVELS = 255.0


@dataclass(frozen=True)
class NlmParams:
    """Filter settings. ``h`` and ``sigma`` are in pixel-value units ([0, 1] scale).

    The defaults give a 7x7 patch and a 21x21 search window.
    Use :meth:`from_intensity` to give ``h`` and ``sigma`` in 8-bit grey levels.
    """

    h: float
    sigma: float = 0.0
    patch_radius: int = 3
    search_radius: int = 10

    def __post_init__(self):
        if not (self.h > 0 and math.isfinite(self.h)):
            raise ValueError(f"h must be positive and finite, got {self.h}")
        if not (self.sigma >= 0 and math.isfinite(self.sigma)):
            raise ValueError(f"sigma must be non-negative, got {self.sigma}")
        if self.patch_radius < 0 or self.search_radius < 0:
            raise ValueError("radii must be non-negative")

    @classmethod
    def from_intensity(cls, h, sigma=0.0, **kw) -> "NlmParams":
        """Build params from ``h``/``sigma`` given in 0..255 grey levels."""
        return cls(h=h / INTENSITY_LEVELS, sigma=sigma / INTENSITY_LEVELS, **kw)

    @property
    def patch_size(self) -> int:
        return 2 * self.patch_radius + 1

    @property
    def search_size(self) -> int:
        return 2 * self.search_radius + 1


def patch_distance(img: ImageTensor, p: PixelCoord, q: PixelCoord, patch_radius: int = 3) -> float:
    """Mean squared difference between the patches centred on ``p`` and ``q``."""
    total = 0.0
    for c in range(img.channels):
        for dr in range(-patch_radius, patch_radius + 1):
            for dc in range(-patch_radius, patch_radius + 1):
                a = get_pixel_padded(img, c, PixelCoord(p[0] + dr, p[1] + dc))
                b = get_pixel_padded(img, c, PixelCoord(q[0] + dr, q[1] + dc))
                total += (a - b) ** 2
    return total / (img.channels * (2 * patch_radius + 1) ** 2)


def nlm_weight(d2, params: NlmParams):
    """Similarity weight in (0, 1]; exactly 1 while ``d2 <= 2 sigma^2``.

    Works on scalars and arrays alike.
    """
    excess = np.maximum(np.asarray(d2, dtype=np.float64) - 2.0 * params.sigma**2, 0.0)
    w = np.exp(-excess / params.h**2)
    return float(w) if w.ndim == 0 else w


def denoise_pixel(
    img: ImageTensor, p: PixelCoord, channel: int, params: NlmParams, *, prefactor: float = 1.0
) -> float:
    """Denoised value of one pixel, by direct loops over the search window.

    ``prefactor`` multiplies every weight; it cancels in the normalisation and
    exists so that the cancellation can be tested.
    """
    if not (0 <= p[0] < img.height and 0 <= p[1] < img.width):
        raise IndexError(f"pixel {tuple(p)} outside {img.height}x{img.width} image")
    if not 0 <= channel < img.channels:
        raise IndexError(f"channel {channel} out of range")
    sr = params.search_radius
    centre = float(img.data[channel, p[0], p[1]])
    num = 0.0
    norm = 0.0
    for dr in range(-sr, sr + 1):
        for dc in range(-sr, sr + 1):
            q = PixelCoord(p[0] + dr, p[1] + dc)
            w = prefactor * nlm_weight(patch_distance(img, p, q, params.patch_radius), params)
            num += w * (get_pixel_padded(img, channel, q) - centre)
            norm += w
    return min(max(centre + num / norm, 0.0), 1.0)


def denoise_image_reference(img: ImageTensor, params: NlmParams) -> ImageTensor:
    """Per-pixel NLM, vectorised only over each pixel's search window.

    Kept deliberately close to the formulas; it is the oracle for
    :func:`denoise_image`.
    """
    c, h, w = img.shape
    pr, sr = params.patch_radius, params.search_radius
    padded = pad_mirror(img.data, sr + pr)
    # patches[:, i, j] is the patch centred on padded pixel (i + pr, j + pr)
    patches = sliding_window_view(padded, (params.patch_size, params.patch_size), axis=(1, 2))
    values = padded[:, pr:-pr or None, pr:-pr or None] if pr else padded
    ps = params.patch_size
    n = c * ps**2
    out = np.empty_like(img.data)
    for i in range(h):
        for j in range(w):
            ref = patches[:, i + sr, j + sr]
            cand = patches[:, i : i + 2 * sr + 1, j : j + 2 * sr + 1]
            diff = ref[:, None, None] - cand
            d2 = _ordered_patch_sum(diff * diff) / n
            weights = nlm_weight(d2, params).ravel()
            window = values[:, i : i + 2 * sr + 1, j : j + 2 * sr + 1].reshape(c, -1)
            centre = img.data[:, i, j]
            # sequential accumulation in row-major window order
            num = np.cumsum(weights * (window - centre[:, None]), axis=1)[:, -1]
            out[:, i, j] = centre + num / np.cumsum(weights)[-1]
    return ImageTensor(np.clip(out, 0.0, 1.0))


def _ordered_patch_sum(sq: np.ndarray) -> np.ndarray:
    """Sum ``(C, ..., ps, ps)`` squared differences over channels, then patch rows, then columns.

    This is the order the production kernel uses, so both give identical bits.
    """
    acc = sq[0].copy()
    for ch in range(1, len(sq)):
        acc += sq[ch]
    rows = acc[..., 0, :].copy()
    for k in range(1, acc.shape[-2]):
        rows += acc[..., k, :]
    total = rows[..., 0].copy()
    for k in range(1, rows.shape[-1]):
        total += rows[..., k]
    return total


def _box_sum(x: np.ndarray, size: int) -> np.ndarray:
    """Sum over ``size`` x ``size`` windows of the last two axes ('valid' region).

    Rows are accumulated first, then columns, each in increasing offset order.
    """
    h = x.shape[-2] - size + 1
    w = x.shape[-1] - size + 1
    rows = x[..., 0:h, :].copy()
    for k in range(1, size):
        rows += x[..., k : k + h, :]
    out = rows[..., :, 0:w].copy()
    for k in range(1, size):
        out += rows[..., :, k : k + w]
    return out


def denoise_batch(
    images: np.ndarray, params: NlmParams, *, prefactor: float = 1.0, chunk: int = 256
) -> np.ndarray:
    """Denoise a ``(N, C, H, W)`` stack; returns a new float64 array.

    For each of the search-window displacements, patch distances for all
    pixels come from one squared-difference image and a separable box sum.
    Every image is computed from its own original pixels only.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4:
        raise ValueError(f"expected (N, C, H, W), got shape {images.shape}")
    out = np.empty_like(images)
    for start in range(0, len(images), chunk):
        out[start : start + chunk] = _denoise_chunk(images[start : start + chunk], params, prefactor)
    return out


def _denoise_chunk(x: np.ndarray, params: NlmParams, prefactor: float) -> np.ndarray:
    n, c, h, w = x.shape
    pr, sr = params.patch_radius, params.search_radius
    ps = params.patch_size
    padded = pad_mirror(x, sr + pr)
    # region covering every patch centred inside the image
    centre = padded[..., sr : sr + h + 2 * pr, sr : sr + w + 2 * pr]
    n_terms = c * ps * ps
    two_sigma2 = 2.0 * params.sigma**2
    h2 = params.h**2
    num = np.zeros((n, c, h, w))
    norm = np.zeros((n, 1, h, w))
    for dr in range(-sr, sr + 1):
        for dc in range(-sr, sr + 1):
            shifted = padded[
                ..., sr + dr : sr + dr + h + 2 * pr, sr + dc : sr + dc + w + 2 * pr
            ]
            diff = centre - shifted
            sq = diff[:, :1] * diff[:, :1]
            for ch in range(1, c):
                sq += diff[:, ch : ch + 1] * diff[:, ch : ch + 1]
            d2 = _box_sum(sq, ps) / n_terms
            wgt = np.exp(-np.maximum(d2 - two_sigma2, 0.0) / h2)
            if prefactor != 1.0:
                wgt = prefactor * wgt
            num += wgt * (shifted[..., pr : pr + h, pr : pr + w] - x)
            norm += wgt
    return np.clip(x + num / norm, 0.0, 1.0)


def denoise_image(img: ImageTensor, params: NlmParams, *, prefactor: float = 1.0) -> ImageTensor:
    return ImageTensor(denoise_batch(img.data[None], params, prefactor=prefactor)[0])


class NlmDenoiser(TransformerMixin, BaseEstimator):
    """Scikit-learn transformer wrapping :func:`denoise_batch`.

    ``h`` and ``sigma`` are given in pixel-value units unless
    ``intensity_units=True``, in which case they are 8-bit grey levels (so
    ``h=15`` means 15/255). Input may be ``(N, C, H, W)``, ``(N, H, W)``, or
    flat ``(N, H*W)`` rows with ``image_shape`` set.
    """

    def __init__(
        self,
        h=15.0,
        sigma=0.0,
        patch_radius=3,
        search_radius=10,
        intensity_units=True,
        image_shape=None,
    ):
        self.h = h
        self.sigma = sigma
        self.patch_radius = patch_radius
        self.search_radius = search_radius
        self.intensity_units = intensity_units
        self.image_shape = image_shape

    def _params(self) -> NlmParams:
        kw = dict(patch_radius=self.patch_radius, search_radius=self.search_radius)
        if self.intensity_units:
            return NlmParams.from_intensity(self.h, self.sigma, **kw)
        return NlmParams(self.h, self.sigma, **kw)

    def fit(self, X, y=None):
        X4 = check_images(X, self.image_shape)
        self.params_ = self._params()
        self.n_features_in_ = int(np.prod(X4.shape[1:]))
        return self

    def transform(self, X):
        params = getattr(self, "params_", None) or self._params()
        X = np.asarray(X)
        X4 = check_images(X, self.image_shape)
        return denoise_batch(X4, params).reshape(X.shape)
