"""Image containers shared by the denoiser, the network and the attack code.

Images are ``(channels, height, width)`` float64 arrays with values in [0, 1].
A :class:`LabeledDataset` keeps its images stacked in one ``(N, C, H, W)``
array so the heavy kernels can work on whole batches.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np


class PixelCoord(NamedTuple):
    row: int
    col: int


def _check_pixels(data: np.ndarray) -> None:
    if not np.all(np.isfinite(data)):
        raise ValueError("pixel values must be finite")
    if data.size and (data.min() < 0.0 or data.max() > 1.0):
        raise ValueError("pixel values must lie in [0, 1]")


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ImageTensor:
    """A single C x H x W image with pixels in [0, 1].

    The underlying array is copied on construction and made read-only.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"expected a (C, H, W) array, got shape {arr.shape}")
        _check_pixels(arr)
        object.__setattr__(self, "data", _frozen(arr))

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def __eq__(self, other):
        if not isinstance(other, ImageTensor):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.data, other.data)

    def __hash__(self):
        return hash((self.shape, self.data.tobytes()))


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Images plus integer class labels and provenance.

    ``images`` is an ``(N, C, H, W)`` array; ``transform_h`` records the NLM
    bandwidth used to produce a derived set and is ``None`` for originals.
    """

    images: np.ndarray
    labels: np.ndarray
    num_classes: int = 10
    source_tag: str = ""
    transform_h: Optional[float] = None
    _validate: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        labels = np.asarray(self.labels)
        if images.ndim != 4:
            if images.size == 0:
                images = images.reshape(0, 1, 1, 1)
            else:
                raise ValueError(f"expected (N, C, H, W) images, got shape {images.shape}")
        if labels.ndim != 1 or len(labels) != len(images):
            raise ValueError(
                f"{len(images)} images but labels have shape {labels.shape}"
            )
        if labels.size and not np.issubdtype(labels.dtype, np.integer):
            if not np.all(labels == np.round(labels)):
                raise ValueError("labels must be integers")
        labels = labels.astype(np.int64)
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if self._validate:
            _check_pixels(images)
        object.__setattr__(self, "images", _frozen(images))
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        if self.transform_h is not None:
            object.__setattr__(self, "transform_h", float(self.transform_h))

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> tuple[ImageTensor, int]:
        return ImageTensor(self.images[i]), int(self.labels[i])

    @property
    def image_shape(self) -> tuple[int, ...]:
        return tuple(self.images.shape[1:])

    def subset(self, n: Optional[int]) -> "LabeledDataset":
        """Deterministic prefix of at most ``n`` items (all of them for ``None``)."""
        if n is None or n >= len(self):
            return self
        return self.replace(images=self.images[:n], labels=self.labels[:n])

    def replace(self, **changes) -> "LabeledDataset":
        kw = dict(
            images=self.images,
            labels=self.labels,
            num_classes=self.num_classes,
            source_tag=self.source_tag,
            transform_h=self.transform_h,
            _validate=False,
        )
        kw.update(changes)
        return LabeledDataset(**kw)

    def __eq__(self, other):
        if not isinstance(other, LabeledDataset):
            return NotImplemented
        return (
            self.images.shape == other.images.shape
            and np.array_equal(self.images, other.images)
            and np.array_equal(self.labels, other.labels)
            and self.num_classes == other.num_classes
            and self.source_tag == other.source_tag
            and self.transform_h == other.transform_h
        )

    __hash__ = None


def concat_datasets(*datasets: LabeledDataset, source_tag: str = "") -> LabeledDataset:
    """Stack datasets in order; provenance of the parts is collapsed into ``source_tag``."""
    if not datasets:
        raise ValueError("need at least one dataset")
    shapes = {d.image_shape for d in datasets if len(d)}
    if len(shapes) > 1:
        raise ValueError(f"image shapes differ: {sorted(shapes)}")
    nonempty = [d for d in datasets if len(d)] or [datasets[0]]
    return LabeledDataset(
        images=np.concatenate([d.images for d in nonempty]),
        labels=np.concatenate([d.labels for d in nonempty]),
        num_classes=max(d.num_classes for d in datasets),
        source_tag=source_tag or "+".join(d.source_tag for d in datasets),
        _validate=False,
    )


def mirror_index(i, n: int):
    """Map integer index(es) into ``[0, n)`` by reflection about the edge pixels.

    The edge pixel itself is not repeated: for ``n = 5`` the index sequence
    ``-2, -1, 0, ..., 4, 5, 6`` maps to ``2, 1, 0, ..., 4, 3, 2``. Indices far
    outside the image keep bouncing between the two edges.
    """
    if n < 1:
        raise ValueError("axis length must be positive")
    if n == 1:
        return np.zeros_like(i) if isinstance(i, np.ndarray) else 0
    period = 2 * (n - 1)
    m = np.mod(i, period)
    return np.where(m >= n, period - m, m) if isinstance(m, np.ndarray) else (
        period - m if m >= n else m
    )


def get_pixel_padded(img: ImageTensor, channel: int, coord: PixelCoord) -> float:
    if not 0 <= channel < img.channels:
        raise IndexError(f"channel {channel} out of range for {img.channels}-channel image")
    r = mirror_index(int(coord[0]), img.height)
    c = mirror_index(int(coord[1]), img.width)
    return float(img.data[channel, r, c])


def pad_mirror(arr: np.ndarray, pad: int) -> np.ndarray:
    """Mirror-pad the last two axes of ``arr`` by ``pad`` pixels on every side."""
    h, w = arr.shape[-2:]
    rows = mirror_index(np.arange(-pad, h + pad), h)
    cols = mirror_index(np.arange(-pad, w + pad), w)
    return arr[..., rows[:, None], cols[None, :]]


def flip_horizontal(img: ImageTensor) -> ImageTensor:
    return ImageTensor(img.data[:, :, ::-1])
