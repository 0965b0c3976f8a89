"""Input checks shared by the estimator wrappers."""

import numpy as np


def check_images(X, image_shape=None, *, allow_empty=True) -> np.ndarray:
    """Coerce ``X`` into a float64 ``(N, C, H, W)`` array with pixels in [0, 1].

    Accepts ``(N, C, H, W)``, ``(N, H, W)`` (single channel) or flat
    ``(N, features)`` rows when ``image_shape`` is given.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        if image_shape is None:
            raise ValueError("flat input needs image_shape=(C, H, W)")
        X = X.reshape((len(X),) + tuple(image_shape))
    elif X.ndim == 3:
        X = X[:, None]
    elif X.ndim != 4:
        raise ValueError(f"cannot interpret array of shape {X.shape} as images")
    if image_shape is not None and X.shape[1:] != tuple(image_shape):
        raise ValueError(f"expected images of shape {tuple(image_shape)}, got {X.shape[1:]}")
    if not allow_empty and len(X) == 0:
        raise ValueError("empty input")
    if not np.all(np.isfinite(X)):
        raise ValueError("input contains NaN or infinity")
    if X.size and (X.min() < 0.0 or X.max() > 1.0):
        raise ValueError("pixel values must lie in [0, 1]")
    return X


def check_labels(y, n: int, num_classes: int) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {y.shape}")
    if y.size and not np.all(y == np.round(y)):
        raise ValueError("labels must be integers")
    y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    return y
