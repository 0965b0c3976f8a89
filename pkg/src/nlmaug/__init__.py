"""Non-local-means training-set augmentation against FGSM attacks.

Submodules:

* :mod:`nlmaug.tensor_image` image and dataset containers, mirror padding
* :mod:`nlmaug.nlm` non-local means denoiser (reference and batched kernels)
* :mod:`nlmaug.dataset_io` MNIST/CIFAR-10 parsers, dataset container, PGM/PPM
* :mod:`nlmaug.net` residual CNN with hand-written backprop, SGD, checkpoints
* :mod:`nlmaug.adversarial` FGSM and robustness sweeps
* :mod:`nlmaug.experiment` configs, experiment runner, CSV reports
* :mod:`nlmaug.estimators` scikit-learn wrappers
"""

from .adversarial import FgsmAttack, FgsmParams, RobustnessRow, fgsm_perturb, robustness_sweep
from .dataset_io import load_dataset, load_mnist, load_cifar10, save_dataset
from .estimators import MicroResNetClassifier
from .experiment import ExperimentConfig, augment_dataset, run_experiment
from .net import Architecture, MicroResNet, TrainConfig, init_params, train_model
from .nlm import NlmDenoiser, NlmParams, denoise_image, denoise_image_reference
from .tensor_image import ImageTensor, LabeledDataset, PixelCoord

__version__ = "0.1.0"

__all__ = [
    "Architecture",
    "ExperimentConfig",
    "FgsmAttack",
    "FgsmParams",
    "ImageTensor",
    "LabeledDataset",
    "MicroResNet",
    "MicroResNetClassifier",
    "NlmDenoiser",
    "NlmParams",
    "PixelCoord",
    "RobustnessRow",
    "TrainConfig",
    "augment_dataset",
    "denoise_image",
    "denoise_image_reference",
    "fgsm_perturb",
    "init_params",
    "load_cifar10",
    "load_dataset",
    "load_mnist",
    "robustness_sweep",
    "run_experiment",
    "save_dataset",
    "train_model",
]
