"""A small residual CNN with hand-written forward and backward passes.

Layout: fixed per-channel input standardisation, 3x3 stem conv, a stack of
two-conv residual blocks (identity skip, or a strided 1x1 projection when the
shape changes), ``head_pool`` x ``head_pool`` average pooling (global average
pooling when ``head_pool == 0``), flatten, and an affine layer to the class
logits. No batch normalisation.

Activations are kept channels-last (NHWC) internally; the public functions take
and return NCHW image batches. Conv weights are stored as ``(kh, kw, c_in,
c_out)`` and a conv is computed as the sum of ``kh * kw`` shifted matrix
products, always accumulated in the same order.
"""

from __future__ import annotations

import json
import math
import struct
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .tensor_image import LabeledDataset


class ShapeMismatch(ValueError):
    pass


class CheckpointError(ValueError):
    """Unreadable or inconsistent checkpoint file."""


# per-channel mean/std of the training sets, keyed by channel count
_DEFAULT_STATS = {
    1: ((0.1307,), (0.3081,)),
    3: ((0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616)),
}


@dataclass(frozen=True)
class Architecture:
    in_channels: int = 1
    image_size: tuple[int, int] = (28, 28)
    stem_channels: int = 16
    # (out_channels, stride) per residual block
    blocks: tuple[tuple[int, int], ...] = ((16, 1), (16, 1), (32, 2), (32, 1))
    num_classes: int = 10
    # 0 means global average pooling
    head_pool: int = 2
    # fixed standardisation applied to [0, 1] inputs; defaults to MNIST statistics
    input_mean: Optional[tuple[float, ...]] = None
    input_std: Optional[tuple[float, ...]] = None
    zero_init_residual: bool = True
    zero_init_head: bool = True

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(int(s) for s in self.image_size))
        object.__setattr__(self, "blocks", tuple((int(c), int(s)) for c, s in self.blocks))
        mean, std = _DEFAULT_STATS.get(self.in_channels, ((0.5,), (0.25,)))
        if self.input_mean is None:
            object.__setattr__(self, "input_mean", mean * (self.in_channels // len(mean)))
        if self.input_std is None:
            object.__setattr__(self, "input_std", std * (self.in_channels // len(std)))
        object.__setattr__(self, "input_mean", tuple(float(v) for v in self.input_mean))
        object.__setattr__(self, "input_std", tuple(float(v) for v in self.input_std))
        if len(self.input_mean) != self.in_channels or len(self.input_std) != self.in_channels:
            raise ValueError("input_mean/input_std need one value per input channel")
        if min(self.input_std) <= 0:
            raise ValueError("input_std must be positive")
        if self.head_pool < 0:
            raise ValueError("head_pool must be non-negative")

    def feature_size(self) -> tuple[int, int]:
        """Spatial size of the last residual block's output."""
        h, w = self.image_size
        for _, stride in self.blocks:
            h, w = (h - 1) // stride + 1, (w - 1) // stride + 1
        return h, w

    def head_inputs(self) -> int:
        c = self.blocks[-1][0] if self.blocks else self.stem_channels
        if self.head_pool == 0:
            return c
        h, w = self.feature_size()
        if h < self.head_pool or w < self.head_pool:
            raise ValueError(f"head_pool {self.head_pool} larger than the {h}x{w} feature map")
        return (h // self.head_pool) * (w // self.head_pool) * c

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Architecture":
        return cls(**json.loads(text))

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        """Parameter names and shapes, in the canonical (checkpoint) order."""
        shapes = {
            "stem.w": (3, 3, self.in_channels, self.stem_channels),
            "stem.b": (self.stem_channels,),
        }
        c_in = self.stem_channels
        for i, (c_out, stride) in enumerate(self.blocks):
            shapes[f"block{i}.conv1.w"] = (3, 3, c_in, c_out)
            shapes[f"block{i}.conv1.b"] = (c_out,)
            shapes[f"block{i}.conv2.w"] = (3, 3, c_out, c_out)
            shapes[f"block{i}.conv2.b"] = (c_out,)
            if stride != 1 or c_in != c_out:
                shapes[f"block{i}.proj.w"] = (1, 1, c_in, c_out)
                shapes[f"block{i}.proj.b"] = (c_out,)
            c_in = c_out
        shapes["fc.w"] = (self.head_inputs(), self.num_classes)
        shapes["fc.b"] = (self.num_classes,)
        return shapes

    def has_projection(self, i: int) -> bool:
        c_in = self.stem_channels if i == 0 else self.blocks[i - 1][0]
        c_out, stride = self.blocks[i]
        return stride != 1 or c_in != c_out


@dataclass
class MicroResNet:
    arch: Architecture
    params: dict[str, np.ndarray]
    seed: int = 0
    epoch: int = 0

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "MicroResNet":
        return replace(self, params={k: v.copy() for k, v in self.params.items()})

    def astype(self, dtype) -> "MicroResNet":
        return replace(self, params={k: v.astype(dtype) for k, v in self.params.items()})


@dataclass
class GradientSet:
    params: dict[str, np.ndarray]
    input: np.ndarray
    loss: float = float("nan")
    logits: Optional[np.ndarray] = None


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 30
    batch_size: int = 256
    eta_min: float = 0.0
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.learning_rate <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("learning_rate, epochs and batch_size must be positive")
        if self.momentum < 0 or self.weight_decay < 0 or self.eta_min < 0:
            raise ValueError("momentum, weight_decay and eta_min must be non-negative")


# --------------------------------------------------------------------------
# initialisation


def init_params(arch: Architecture = Architecture(), seed: int = 0, dtype=np.float64) -> MicroResNet:
    """He-scaled Gaussian weights (std = sqrt(2 / fan_in)), zero biases.

    With ``arch.zero_init_residual`` the second conv of every residual block
    starts at zero, so each block is initially its skip path; with
    ``arch.zero_init_head`` the final affine layer starts at zero, so every
    class starts equally likely. Zeroed weights are still drawn from the
    generator, which keeps the other layers' draws the same either way.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in arch.param_shapes().items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[:-1]))
            params[name] = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
            if arch.zero_init_residual and name.endswith("conv2.w"):
                params[name][...] = 0.0
            if arch.zero_init_head and name == "fc.w":
                params[name][...] = 0.0
    return MicroResNet(arch, {k: v.astype(dtype) for k, v in params.items()}, seed=seed)


# --------------------------------------------------------------------------
# layers


def _out_size(n: int, k: int, stride: int) -> int:
    return (n + 2 * (k // 2) - k) // stride + 1


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    n, h, w, c = x.shape
    xp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=x.dtype)
    xp[:, p : p + h, p : p + w] = x
    return xp


def conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1) -> np.ndarray:
    """'Same'-padded convolution (cross-correlation) of an NHWC batch."""
    k = w.shape[0]
    n, h, wd, _ = x.shape
    ho, wo = _out_size(h, k, stride), _out_size(wd, k, stride)
    xp = _pad(x, k // 2)
    out = np.zeros((n, ho, wo, w.shape[3]), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            out += xp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] @ w[i, j]
    out += b
    return out


def conv_backward(x: np.ndarray, w: np.ndarray, stride: int, dy: np.ndarray):
    """Gradients ``(dx, dw, db)`` of :func:`conv_forward` given upstream ``dy``."""
    k = w.shape[0]
    p = k // 2
    n, h, wd, c = x.shape
    _, ho, wo, f = dy.shape
    xp = _pad(x, p)
    dxp = np.zeros_like(xp)
    dw = np.empty_like(w)
    dy2 = dy.reshape(-1, f)
    for i in range(k):
        for j in range(k):
            sl = (slice(None), slice(i, i + stride * ho, stride), slice(j, j + stride * wo, stride))
            dw[i, j] = xp[sl].reshape(-1, c).T @ dy2
            dxp[sl] += dy @ w[i, j].T
    db = dy2.sum(axis=0)
    return dxp[:, p : p + h, p : p + wd], dw, db


def _to_nhwc(x: np.ndarray, arch: Architecture, dtype) -> np.ndarray:
    x = np.asarray(x)
    expected = (arch.in_channels,) + arch.image_size
    if x.ndim != 4 or x.shape[1:] != expected:
        raise ShapeMismatch(f"expected batch of shape (N, {expected}), got {x.shape}")
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1), dtype=dtype)


def _forward(net: MicroResNet, x: np.ndarray):
    p = net.params
    arch = net.arch
    cache = {"x": x}
    mean = np.asarray(arch.input_mean, dtype=x.dtype)
    std = np.asarray(arch.input_std, dtype=x.dtype)
    x = (x - mean) / std
    cache["x_std"] = x
    a = conv_forward(x, p["stem.w"], p["stem.b"])
    h = np.maximum(a, 0)
    cache["stem"] = h
    for i, (_, stride) in enumerate(arch.blocks):
        pre = f"block{i}."
        z1 = conv_forward(h, p[pre + "conv1.w"], p[pre + "conv1.b"], stride)
        h1 = np.maximum(z1, 0)
        z2 = conv_forward(h1, p[pre + "conv2.w"], p[pre + "conv2.b"])
        if arch.has_projection(i):
            z2 += conv_forward(h, p[pre + "proj.w"], p[pre + "proj.b"], stride)
        else:
            z2 += h
        cache[i] = (h, h1)
        h = np.maximum(z2, 0)
    cache["features"] = h
    pooled = _pool_forward(h, arch.head_pool)
    cache["pooled"] = pooled
    logits = pooled @ p["fc.w"] + p["fc.b"]
    return logits, cache


def _pool_forward(h: np.ndarray, k: int) -> np.ndarray:
    """Average-pool ``k`` x ``k`` cells (dropping any remainder) and flatten (H, W, C)."""
    n, fh, fw, c = h.shape
    if k == 0:
        return h.mean(axis=(1, 2))
    ph, pw = fh // k, fw // k
    cells = h[:, : ph * k, : pw * k].reshape(n, ph, k, pw, k, c)
    return cells.mean(axis=(2, 4)).reshape(n, -1)


def _pool_backward(dpooled: np.ndarray, shape: tuple, k: int) -> np.ndarray:
    n, fh, fw, c = shape
    if k == 0:
        return np.broadcast_to(dpooled[:, None, None, :] / (fh * fw), shape)
    ph, pw = fh // k, fw // k
    d = dpooled.reshape(n, ph, 1, pw, 1, c) / (k * k)
    d = np.broadcast_to(d, (n, ph, k, pw, k, c)).reshape(n, ph * k, pw * k, c)
    if (ph * k, pw * k) == (fh, fw):
        return d
    out = np.zeros(shape, dtype=dpooled.dtype)
    out[:, : ph * k, : pw * k] = d
    return out


def forward(net: MicroResNet, batch: np.ndarray) -> np.ndarray:
    """Logits ``(N, num_classes)`` for an NCHW batch."""
    logits, _ = _forward(net, _to_nhwc(batch, net.arch, net.dtype))
    return logits


def cross_entropy_loss(logits: np.ndarray, labels: np.ndarray):
    """Mean softmax cross-entropy and its gradient with respect to the logits."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    loss = -log_probs[np.arange(n), labels].mean()
    dlogits = np.exp(log_probs)
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return float(loss), dlogits


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def backward(net: MicroResNet, batch: np.ndarray, labels, dlogits: Optional[np.ndarray] = None) -> GradientSet:
    """Exact gradients of the mean cross-entropy for every parameter and the input.

    ``dlogits`` overrides the loss gradient (useful for testing).
    """
    arch = net.arch
    p = net.params
    x = _to_nhwc(batch, arch, net.dtype)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (len(x),):
        raise ShapeMismatch(f"{len(x)} images but labels have shape {labels.shape}")
    logits, cache = _forward(net, x)
    loss, dl = cross_entropy_loss(logits, labels)
    if dlogits is not None:
        dl = np.asarray(dlogits)
    dl = dl.astype(net.dtype, copy=False)
    grads = {}
    grads["fc.w"] = cache["pooled"].T @ dl
    grads["fc.b"] = dl.sum(axis=0)
    feats = cache["features"]
    dh = _pool_backward(dl @ p["fc.w"].T, feats.shape, arch.head_pool)
    h_out = feats
    for i in reversed(range(len(arch.blocks))):
        pre = f"block{i}."
        stride = arch.blocks[i][1]
        h_in, h1 = cache[i]
        dz2 = dh * (h_out > 0)
        dh1, grads[pre + "conv2.w"], grads[pre + "conv2.b"] = conv_backward(h1, p[pre + "conv2.w"], 1, dz2)
        dz1 = dh1 * (h1 > 0)
        dh_in, grads[pre + "conv1.w"], grads[pre + "conv1.b"] = conv_backward(
            h_in, p[pre + "conv1.w"], stride, dz1
        )
        if arch.has_projection(i):
            dskip, grads[pre + "proj.w"], grads[pre + "proj.b"] = conv_backward(
                h_in, p[pre + "proj.w"], stride, dz2
            )
            dh_in += dskip
        else:
            dh_in += dz2
        dh = dh_in
        h_out = h_in
    da = dh * (cache["stem"] > 0)
    dx, grads["stem.w"], grads["stem.b"] = conv_backward(cache["x_std"], p["stem.w"], 1, da)
    dx = dx / np.asarray(arch.input_std, dtype=dx.dtype)
    ordered = {k: grads[k] for k in p}
    return GradientSet(ordered, dx.transpose(0, 3, 1, 2), loss=loss, logits=logits)


def input_gradient(net: MicroResNet, batch: np.ndarray, labels) -> np.ndarray:
    """Gradient of the mean loss with respect to the (NCHW) input batch."""
    return backward(net, batch, labels).input


# --------------------------------------------------------------------------
# optimisation


def cosine_lr(t: int, cfg: TrainConfig, t_max: Optional[int] = None) -> float:
    """Cosine-annealed learning rate at epoch ``t`` (``t_max`` defaults to ``cfg.epochs``)."""
    t_max = cfg.epochs if t_max is None else t_max
    if not 0 <= t <= t_max:
        raise ValueError(f"epoch {t} outside [0, {t_max}]")
    return cfg.eta_min + (cfg.learning_rate - cfg.eta_min) * (1 + math.cos(math.pi * t / t_max)) / 2


def sgd_step(params: dict, grads: dict, velocity: dict, lr: float, cfg: TrainConfig, *, inplace: bool = False):
    """SGD with momentum; weight decay is added to the gradient before the momentum update.

    Returns ``(params, velocity)``. Inputs are left untouched unless ``inplace``.
    """
    if params.keys() != grads.keys() or params.keys() != velocity.keys():
        raise ShapeMismatch("params, grads and velocity must have the same keys")
    new_p = params if inplace else {}
    new_v = velocity if inplace else {}
    for k, w in params.items():
        g, v = grads[k], velocity[k]
        if g.shape != w.shape or v.shape != w.shape:
            raise ShapeMismatch(f"shape mismatch for {k}: {w.shape}, {g.shape}, {v.shape}")
        g = g + cfg.weight_decay * w
        if inplace:
            v *= cfg.momentum
            v += g
            w -= lr * v
        else:
            v = cfg.momentum * v + g
            new_v[k] = v
            new_p[k] = w - lr * v
    return new_p, new_v


def _batch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng(seed + epoch).permutation(n)


def train_model(net: MicroResNet, train: LabeledDataset, cfg: TrainConfig, *, log=None):
    """Mini-batch SGD over ``cfg.epochs`` epochs; returns ``(trained_net, history)``.

    The input net is not modified. ``history`` holds one dict per epoch with the
    learning rate, mean training loss, training accuracy (measured on the fly)
    and wall-clock seconds spent in that epoch.
    """
    if len(train) == 0:
        raise ValueError("training set is empty")
    net = net.astype(np.dtype(cfg.dtype)).copy()
    velocity = {k: np.zeros_like(v) for k, v in net.params.items()}
    images, labels = train.images, train.labels
    n = len(train)
    history = []
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = cosine_lr(epoch, cfg)
        order = _batch_order(n, cfg.seed, epoch)
        loss_sum = 0.0
        correct = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            g = backward(net, images[idx], labels[idx])
            sgd_step(net.params, g.params, velocity, lr, cfg, inplace=True)
            loss_sum += g.loss * len(idx)
            correct += int((np.argmax(g.logits, axis=1) == labels[idx]).sum())
        net.epoch = epoch + 1
        record = {
            "epoch": epoch + 1,
            "lr": lr,
            "loss": loss_sum / n,
            "train_accuracy": correct / n,
            "seconds": time.perf_counter() - t0,
        }
        history.append(record)
        if log is not None:
            log(record)
    return net, history


def predict_logits(net: MicroResNet, images: np.ndarray, batch_size: int = 500) -> np.ndarray:
    out = [forward(net, images[i : i + batch_size]) for i in range(0, len(images), batch_size)]
    if not out:
        return np.zeros((0, net.arch.num_classes), dtype=net.dtype)
    return np.concatenate(out)


def evaluate_accuracy(net: MicroResNet, ds: LabeledDataset, batch_size: int = 500) -> float:
    """Fraction of correct argmax predictions; ties go to the lowest class index."""
    if len(ds) == 0:
        return 0.0
    pred = np.argmax(predict_logits(net, ds.images, batch_size), axis=1)
    return float(np.mean(pred == ds.labels))


# --------------------------------------------------------------------------
# checkpoints

_CKPT_MAGIC = b"NLMRNET1"
_CKPT_VERSION = 1


def save_checkpoint(net: MicroResNet, path) -> None:
    """Write ``net`` to ``path``; see the README for the byte layout."""
    arch = net.arch.to_json().encode()
    dtype = np.dtype(net.dtype).name.encode()
    parts = [
        _CKPT_MAGIC,
        struct.pack("<I", _CKPT_VERSION),
        struct.pack("<I", len(arch)),
        arch,
        struct.pack("<qI", net.seed, net.epoch),
        struct.pack("<I", len(dtype)),
        dtype,
        struct.pack("<I", len(net.params)),
    ]
    for name, arr in net.params.items():
        key = name.encode()
        parts += [struct.pack("<I", len(key)), key, struct.pack("<I", arr.ndim)]
        parts += [struct.pack(f"<{arr.ndim}I", *arr.shape)]
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> MicroResNet:
    buf = Path(path).read_bytes()
    try:
        return _parse_checkpoint(buf)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, TypeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise CheckpointError(f"{path}: {exc}") from None
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc


def _parse_checkpoint(buf: bytes) -> MicroResNet:
    if buf[:8] != _CKPT_MAGIC:
        raise CheckpointError("not a model checkpoint")
    pos = 8

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, buf, pos)
        pos += struct.calcsize(fmt)
        return vals

    (version,) = take("<I")
    if version != _CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n,) = take("<I")
    arch = Architecture.from_json(buf[pos : pos + n].decode())
    pos += n
    seed, epoch = take("<qI")
    (n,) = take("<I")
    dtype = np.dtype(buf[pos : pos + n].decode())
    pos += n
    (count,) = take("<I")
    params = {}
    for _ in range(count):
        (n,) = take("<I")
        name = buf[pos : pos + n].decode()
        pos += n
        (ndim,) = take("<I")
        shape = take(f"<{ndim}I")
        size = int(np.prod(shape))
        if len(buf) - pos < 8 * size:
            raise CheckpointError(f"truncated data for parameter {name!r}")
        arr = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape)
        pos += 8 * size
        params[name] = arr.astype(dtype)
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes")
    expected = arch.param_shapes()
    if list(params) != list(expected) or {k: v.shape for k, v in params.items()} != expected:
        raise CheckpointError("parameters do not match the stored architecture")
    return MicroResNet(arch, params, seed=seed, epoch=epoch)
