"""Readers and writers for MNIST IDX, CIFAR-10 binary batches, netpbm images
and the package's own dataset container."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .tensor_image import ImageTensor, LabeledDataset

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32


class DatasetFormatError(ValueError):
    """Base class for malformed input files."""


class BadMagic(DatasetFormatError):
    pass


class TruncatedFile(DatasetFormatError):
    pass


class CountMismatch(DatasetFormatError):
    pass


class BadRecordLength(DatasetFormatError):
    pass


class LabelOutOfRange(DatasetFormatError):
    pass


class ChannelMismatch(ValueError):
    pass


class VersionMismatch(DatasetFormatError):
    pass


@dataclass(frozen=True)
class IdxHeader:
    magic: int
    dims: tuple[int, ...]

    @property
    def count(self) -> int:
        return self.dims[0]


def parse_idx_header(buf: bytes) -> IdxHeader:
    if len(buf) < 4:
        raise TruncatedFile("IDX file shorter than its magic number")
    (magic,) = struct.unpack_from(">I", buf, 0)
    ndim = {IDX_IMAGE_MAGIC: 3, IDX_LABEL_MAGIC: 1}.get(magic)
    if ndim is None:
        raise BadMagic(f"unexpected IDX magic number 0x{magic:08x}")
    if len(buf) < 4 + 4 * ndim:
        raise TruncatedFile("IDX header is truncated")
    return IdxHeader(magic, struct.unpack_from(f">{ndim}I", buf, 4))


def _idx_payload(buf: bytes, expected_magic: int) -> tuple[IdxHeader, np.ndarray]:
    if len(buf) >= 4 and struct.unpack_from(">I", buf, 0)[0] != expected_magic:
        magic = struct.unpack_from(">I", buf, 0)[0]
        raise BadMagic(f"expected magic 0x{expected_magic:08x}, got 0x{magic:08x}")
    header = parse_idx_header(buf)
    offset = 4 + 4 * len(header.dims)
    size = int(np.prod(header.dims))
    if len(buf) - offset < size:
        raise TruncatedFile(f"header declares {size} bytes of data, file has {len(buf) - offset}")
    data = np.frombuffer(buf, dtype=np.uint8, count=size, offset=offset)
    return header, data.reshape(header.dims)


def load_mnist(image_bytes: bytes, label_bytes: bytes, source_tag: str = "mnist") -> LabeledDataset:
    """Parse a pair of MNIST IDX files; pixels become ``byte / 255``."""
    _, pixels = _idx_payload(image_bytes, IDX_IMAGE_MAGIC)
    _, labels = _idx_payload(label_bytes, IDX_LABEL_MAGIC)
    if len(pixels) != len(labels):
        raise CountMismatch(f"{len(pixels)} images but {len(labels)} labels")
    if labels.size and labels.max() > 9:
        raise LabelOutOfRange(f"label {labels.max()} is not a digit")
    images = pixels[:, None].astype(np.float64) / 255.0
    return LabeledDataset(images, labels.astype(np.int64), 10, source_tag, _validate=False)


def load_mnist_files(images_path, labels_path, source_tag: Optional[str] = None) -> LabeledDataset:
    tag = source_tag or ("mnist-test" if "t10k" in Path(images_path).name else "mnist-train")
    return load_mnist(read_maybe_gz(images_path), read_maybe_gz(labels_path), tag)


def load_cifar10(batch_bytes: bytes, source_tag: str = "cifar10") -> LabeledDataset:
    """Parse a CIFAR-10 binary batch (3073-byte records: label, R, G, B planes)."""
    if len(batch_bytes) % CIFAR_RECORD:
        raise BadRecordLength(
            f"length {len(batch_bytes)} is not a multiple of the {CIFAR_RECORD}-byte record"
        )
    records = np.frombuffer(batch_bytes, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        raise LabelOutOfRange(f"label {labels.max()} outside 0..9")
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return LabeledDataset(images, labels, 10, source_tag, _validate=False)


def load_cifar10_files(paths, source_tag: str = "cifar10") -> LabeledDataset:
    parts = [load_cifar10(Path(p).read_bytes()) for p in paths]
    return LabeledDataset(
        np.concatenate([d.images for d in parts]) if parts else np.zeros((0, 3, 32, 32)),
        np.concatenate([d.labels for d in parts]) if parts else np.zeros(0, dtype=np.int64),
        10,
        source_tag,
        _validate=False,
    )


def read_maybe_gz(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        import gzip

        return gzip.decompress(raw)
    return raw


# --------------------------------------------------------------------------
# dataset container

_DS_MAGIC = b"NLMDSET\x00"
_DS_VERSION = 1


def dataset_to_bytes(ds: LabeledDataset) -> bytes:
    meta = json.dumps(
        {"source_tag": ds.source_tag, "transform_h": ds.transform_h, "num_classes": ds.num_classes},
        sort_keys=True,
    ).encode()
    n = len(ds)
    shape = ds.images.shape[1:]
    return b"".join(
        [
            _DS_MAGIC,
            struct.pack("<I", _DS_VERSION),
            struct.pack("<I", len(meta)),
            meta,
            struct.pack("<Q3I", n, *shape),
            np.ascontiguousarray(ds.labels, dtype="<i8").tobytes(),
            np.ascontiguousarray(ds.images, dtype="<f8").tobytes(),
        ]
    )


def dataset_from_bytes(buf: bytes) -> LabeledDataset:
    if buf[:8] != _DS_MAGIC:
        raise BadMagic("not a dataset container")
    (version,) = struct.unpack_from("<I", buf, 8)
    if version != _DS_VERSION:
        raise VersionMismatch(f"container version {version}, reader supports {_DS_VERSION}")
    (mlen,) = struct.unpack_from("<I", buf, 12)
    meta = json.loads(buf[16 : 16 + mlen].decode())
    pos = 16 + mlen
    n, c, h, w = struct.unpack_from("<Q3I", buf, pos)
    pos += struct.calcsize("<Q3I")
    need = 8 * n + 8 * n * c * h * w
    if len(buf) - pos != need:
        raise TruncatedFile(f"expected {need} payload bytes, found {len(buf) - pos}")
    labels = np.frombuffer(buf, dtype="<i8", count=n, offset=pos).astype(np.int64)
    pos += 8 * n
    images = np.frombuffer(buf, dtype="<f8", count=n * c * h * w, offset=pos).reshape(n, c, h, w)
    return LabeledDataset(
        images, labels, meta["num_classes"], meta["source_tag"], meta["transform_h"]
    )


def save_dataset(ds: LabeledDataset, path) -> str:
    """Write ``ds`` to ``path`` and return the SHA-256 of the written bytes."""
    data = dataset_to_bytes(ds)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_dataset(path) -> LabeledDataset:
    return dataset_from_bytes(Path(path).read_bytes())


@dataclass
class DatasetManifest:
    """Index of generated dataset files, stored as JSON next to them."""

    entries: list[dict] = field(default_factory=list)
    format_version: int = 1

    def add(self, source_tag: str, path, transform_h, count: int, checksum: str) -> None:
        if any(e["source_tag"] == source_tag for e in self.entries):
            raise ValueError(f"duplicate source tag {source_tag!r}")
        self.entries.append(
            {
                "source_tag": source_tag,
                "path": str(path),
                "transform_h": transform_h,
                "count": count,
                "checksum": checksum,
            }
        )

    def save(self, path) -> None:
        Path(path).write_text(
            json.dumps({"format_version": self.format_version, "entries": self.entries}, indent=2)
            + "\n"
        )

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        raw = json.loads(Path(path).read_text())
        return cls(entries=raw["entries"], format_version=raw["format_version"])

    def load_entry(self, source_tag: str, base_dir=None) -> LabeledDataset:
        for e in self.entries:
            if e["source_tag"] == source_tag:
                path = Path(e["path"])
                if base_dir is not None and not path.is_absolute():
                    path = Path(base_dir) / path
                ds = load_dataset(path)
                if len(ds) != e["count"]:
                    raise CountMismatch(f"{path}: manifest says {e['count']} items, file has {len(ds)}")
                return ds
        raise KeyError(source_tag)


# --------------------------------------------------------------------------
# netpbm


def to_bytes_255(values: np.ndarray) -> np.ndarray:
    """Quantise [0, 1] values to bytes, rounding halves away from zero."""
    return np.floor(np.asarray(values) * 255.0 + 0.5).astype(np.uint8)


def encode_pnm(img: ImageTensor) -> bytes:
    if img.channels == 1:
        tag, payload = b"P5", to_bytes_255(img.data[0])
    elif img.channels == 3:
        tag, payload = b"P6", to_bytes_255(img.data.transpose(1, 2, 0))
    else:
        raise ChannelMismatch(f"cannot write a {img.channels}-channel image as PGM/PPM")
    return tag + b"\n%d %d\n255\n" % (img.width, img.height) + payload.tobytes()


def export_pgm(img: ImageTensor, path) -> None:
    if img.channels != 1:
        raise ChannelMismatch(f"PGM needs 1 channel, image has {img.channels}")
    Path(path).write_bytes(encode_pnm(img))


def export_ppm(img: ImageTensor, path) -> None:
    if img.channels != 3:
        raise ChannelMismatch(f"PPM needs 3 channels, image has {img.channels}")
    Path(path).write_bytes(encode_pnm(img))


def decode_pnm(buf: bytes) -> ImageTensor:
    """Parse a binary P5/P6 image (8- or 16-bit samples) into [0, 1] values."""
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise TruncatedFile("incomplete PNM header")
        tokens.append(buf[start:pos])
    pos += 1  # single whitespace byte before the raster
    magic, width, height, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    channels = {b"P5": 1, b"P6": 3}.get(magic)
    if channels is None:
        raise BadMagic(f"unsupported netpbm type {magic!r}")
    dtype = np.dtype(">u2" if maxval > 255 else "u1")
    count = width * height * channels
    if len(buf) - pos < count * dtype.itemsize:
        raise TruncatedFile("PNM raster is truncated")
    raster = np.frombuffer(buf, dtype=dtype, count=count, offset=pos).astype(np.float64) / maxval
    return ImageTensor(raster.reshape(height, width, channels).transpose(2, 0, 1))


def read_pnm(path) -> ImageTensor:
    return decode_pnm(Path(path).read_bytes())


def export_image(img: ImageTensor, path) -> None:
    """PGM for single-channel images, PPM for RGB."""
    Path(path).write_bytes(encode_pnm(img))
