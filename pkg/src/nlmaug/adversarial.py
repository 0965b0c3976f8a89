"""White-box FGSM attacks and accuracy sweeps over a perturbation grid."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .dataset_io import export_image
from .net import MicroResNet, ShapeMismatch, backward, predict_logits
from .tensor_image import ImageTensor, LabeledDataset

DEFAULT_EPS = (0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3)


@dataclass(frozen=True)
class FgsmParams:
    eps_list: tuple[float, ...] = DEFAULT_EPS
    clip_min: float = 0.0
    clip_max: float = 1.0

    def __post_init__(self):
        eps = tuple(float(e) for e in self.eps_list)
        if any(e < 0 for e in eps):
            raise ValueError("eps values must be non-negative")
        if any(b <= a for a, b in zip(eps, eps[1:])):
            raise ValueError("eps values must be strictly increasing")
        if not self.clip_min < self.clip_max:
            raise ValueError("clip_min must be below clip_max")
        object.__setattr__(self, "eps_list", eps)


@dataclass(frozen=True)
class RobustnessRow:
    model_id: str
    train_source: str
    transform_h: Optional[float]
    seed: int
    eps: float
    accuracy: float
    n: int


def fgsm_batch(
    net: MicroResNet,
    images: np.ndarray,
    labels,
    eps: float,
    clip: tuple[float, float] = (0.0, 1.0),
    grad_fn=None,
) -> np.ndarray:
    """``clip(x + eps * sign(grad_x loss(x, y)), *clip)`` for an NCHW batch.

    The gradient is that of the cross-entropy at the true labels, through
    ``net`` itself. Pixels with zero gradient are left unchanged.
    ``grad_fn(images, labels)`` replaces the gradient computation when given.
    """
    if eps < 0:
        raise ValueError("eps must be non-negative")
    images = np.asarray(images, dtype=np.float64)
    if eps == 0:
        return images.copy()
    if grad_fn is None:
        grad = backward(net, images, labels).input
    else:
        grad = grad_fn(images, labels)
    if grad.shape != images.shape:
        raise ShapeMismatch(f"gradient shape {grad.shape} != input shape {images.shape}")
    adv = np.clip(images + eps * np.sign(grad).astype(np.float64), clip[0], clip[1])
    return _within_budget(adv, images, eps)


def _within_budget(adv: np.ndarray, x: np.ndarray, eps: float) -> np.ndarray:
    """Pull pixels where rounding made ``|adv - x|`` exceed ``eps`` one ulp toward ``x``."""
    over = np.abs(adv - x) > eps
    while over.any():
        adv[over] = np.nextafter(adv[over], x[over])
        over = np.abs(adv - x) > eps
    return adv


def fgsm_perturb(net: MicroResNet, x: ImageTensor, y: int, eps: float) -> ImageTensor:
    return ImageTensor(fgsm_batch(net, x.data[None], [y], eps)[0])


def attacked_predictions(
    net: MicroResNet, ds: LabeledDataset, eps: float, params: FgsmParams = FgsmParams(), batch_size: int = 500
):
    """Attack every image of ``ds`` at ``eps``; return ``(adversarial images, predictions)``."""
    adv = np.empty_like(ds.images)
    pred = np.empty(len(ds), dtype=np.int64)
    for start in range(0, len(ds), batch_size):
        sl = slice(start, start + batch_size)
        if eps == 0:
            adv[sl] = ds.images[sl]
        else:
            adv[sl] = fgsm_batch(net, ds.images[sl], ds.labels[sl], eps, (params.clip_min, params.clip_max))
        pred[sl] = np.argmax(predict_logits(net, adv[sl], batch_size), axis=1)
    return adv, pred


def robustness_sweep(
    net: MicroResNet,
    test: LabeledDataset,
    params: FgsmParams = FgsmParams(),
    *,
    model_id: str = "model",
    train_source: str = "",
    transform_h: Optional[float] = None,
    seed: int = 0,
    batch_size: int = 500,
    on_batch=None,
) -> list[RobustnessRow]:
    """Accuracy of ``net`` on ``test`` attacked at every eps of ``params``.

    ``on_batch(eps, clean, adversarial)`` is called for every attacked chunk;
    the acceptance tests use it to audit the perturbation bounds.
    """
    rows = []
    for eps in params.eps_list:
        adv, pred = attacked_predictions(net, test, eps, params, batch_size)
        if on_batch is not None:
            on_batch(eps, test.images, adv)
        acc = float(np.mean(pred == test.labels)) if len(test) else 0.0
        rows.append(RobustnessRow(model_id, train_source, transform_h, seed, eps, acc, len(test)))
    return rows


def misclassification_grid(net: MicroResNet, test: LabeledDataset, eps: float, k: int):
    """First ``k`` test images whose prediction changes under the attack.

    Returns a list of ``(adversarial image, true label, predicted label)``.
    """
    if k <= 0 or eps == 0:
        return []
    clean = np.argmax(predict_logits(net, test.images), axis=1)
    adv, pred = attacked_predictions(net, test, eps)
    flipped = np.flatnonzero(pred != clean)[:k]
    return [(ImageTensor(adv[i]), int(test.labels[i]), int(pred[i])) for i in flipped]


def export_grid(grid, out_dir, prefix: str = "adv") -> list[str]:
    """Write grid images as PGM/PPM plus a caption file; returns the captions."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    captions = []
    for i, (img, true, pred) in enumerate(grid):
        ext = "pgm" if img.channels == 1 else "ppm"
        export_image(img, out / f"{prefix}_{i:03d}_{true}_to_{pred}.{ext}")
        captions.append(f"{true} -> {pred}")
    (out / f"{prefix}_captions.txt").write_text("".join(c + "\n" for c in captions))
    return captions


class FgsmAttack(TransformerMixin, BaseEstimator):
    """Scikit-learn style FGSM: ``transform(X, y)`` returns adversarial images.

    ``model`` is either a :class:`~nlmaug.net.MicroResNet` or a fitted
    :class:`~nlmaug.estimators.MicroResNetClassifier`.
    """

    def __init__(self, model=None, eps=0.1, clip_min=0.0, clip_max=1.0):
        self.model = model
        self.eps = eps
        self.clip_min = clip_min
        self.clip_max = clip_max

    def _net(self) -> MicroResNet:
        model = self.model
        return getattr(model, "net_", model)

    def fit(self, X=None, y=None):
        if self._net() is None:
            raise ValueError("FgsmAttack needs a model")
        return self

    def transform(self, X, y=None):
        if y is None:
            raise ValueError("FGSM needs the true labels: call transform(X, y)")
        net = self._net()
        X = np.asarray(X, dtype=np.float64)
        shape = (net.arch.in_channels,) + net.arch.image_size
        X4 = X.reshape((len(X),) + shape)
        labels = np.asarray(y)
        if hasattr(self.model, "classes_"):
            labels = np.searchsorted(self.model.classes_, labels)
        adv = fgsm_batch(net, X4, labels, self.eps, (self.clip_min, self.clip_max))
        return adv.reshape(X.shape)

    def fit_transform(self, X, y=None, **fit_params):
        return self.fit(X, y).transform(X, y)


def sweep_accuracies(rows: Sequence[RobustnessRow]) -> dict[float, float]:
    return {r.eps: r.accuracy for r in rows}
