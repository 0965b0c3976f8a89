"""Scikit-learn compatible wrappers.

``NlmDenoiser`` and ``FgsmAttack`` are transformers; ``MicroResNetClassifier``
is a classifier. They accept image batches as ``(N, C, H, W)``, ``(N, H, W)``
or flat rows plus ``image_shape``, so they can sit inside a ``Pipeline``.
"""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_images, check_labels
from .adversarial import FgsmAttack
from .net import Architecture, TrainConfig, init_params, predict_logits, softmax, train_model
from .nlm import NlmDenoiser
from .tensor_image import LabeledDataset

__all__ = ["MicroResNetClassifier", "NlmDenoiser", "FgsmAttack"]


class MicroResNetClassifier(ClassifierMixin, BaseEstimator):
    """Residual CNN trained with momentum SGD and a per-epoch cosine schedule.

    Defaults: lr 0.01, momentum 0.9, weight decay 5e-4, batch 256, 3 epochs.
    """

    def __init__(
        self,
        learning_rate=0.01,
        momentum=0.9,
        weight_decay=5e-4,
        epochs=3,
        batch_size=256,
        stem_channels=16,
        blocks=((16, 1), (16, 1), (32, 2), (32, 1)),
        head_pool=2,
        image_shape=None,
        dtype="float32",
        random_state=0,
    ):
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.stem_channels = stem_channels
        self.blocks = blocks
        self.head_pool = head_pool
        self.image_shape = image_shape
        self.dtype = dtype
        self.random_state = random_state

    def fit(self, X, y):
        X4 = check_images(X, self.image_shape, allow_empty=False)
        self.classes_, y_idx = np.unique(np.asarray(y), return_inverse=True)
        y_idx = check_labels(y_idx, len(X4), len(self.classes_))
        c, h, w = X4.shape[1:]
        arch = Architecture(
            in_channels=c,
            image_size=(h, w),
            stem_channels=self.stem_channels,
            blocks=tuple(tuple(b) for b in self.blocks),
            num_classes=len(self.classes_),
            head_pool=self.head_pool,
        )
        seed = int(self.random_state or 0)
        cfg = TrainConfig(
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=seed,
            dtype=self.dtype,
        )
        ds = LabeledDataset(X4, y_idx, len(self.classes_), _validate=False)
        self.net_, self.history_ = train_model(init_params(arch, seed), ds, cfg)
        self.n_features_in_ = int(np.prod(X4.shape[1:]))
        return self

    def decision_function(self, X):
        check_is_fitted(self, "net_")
        return predict_logits(self.net_, check_images(X, self.image_shape))

    def predict_proba(self, X):
        return softmax(self.decision_function(X).astype(np.float64))

    def predict(self, X):
        check_is_fitted(self, "net_")
        # argmax keeps the first maximum, i.e. ties go to the lowest class index
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]
