"""End-to-end protocol: denoise the training set at several bandwidths, train a
baseline and one augmented model per bandwidth, attack all of them with FGSM
and write the accuracy table.

Config files are flat ``key = value`` text; see :data:`CONFIG_KEYS`.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import dataset_io
from .adversarial import (
    DEFAULT_EPS,
    FgsmParams,
    RobustnessRow,
    export_grid,
    misclassification_grid,
    robustness_sweep,
)
from .net import Architecture, TrainConfig, init_params, load_checkpoint, save_checkpoint, train_model
from .nlm import NlmParams, denoise_batch
from .tensor_image import LabeledDataset, concat_datasets

log = logging.getLogger(__name__)

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}
CIFAR_TRAIN = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST = ["test_batch.bin"]

CSV_HEADER = ["model_id", "train_source", "transform_h", "seed", "eps", "accuracy", "n"]


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    dataset: str = "mnist"
    data_dir: Optional[str] = None
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    h_values: list[float] = field(default_factory=lambda: [3.0, 5.0, 15.0])
    # "intensity": h and sigma in 0..255 grey levels; "pixel": in [0, 1] units
    h_units: str = "intensity"
    sigma: float = 0.0
    patch_radius: int = 3
    search_radius: int = 10
    combine_h: bool = False
    train_subset: Optional[int] = 10000
    test_subset: Optional[int] = 2000
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 3
    batch_size: int = 256
    dtype: str = "float32"
    eps_list: list[float] = field(default_factory=lambda: list(DEFAULT_EPS))
    seeds: list[int] = field(default_factory=lambda: [1, 2, 3])
    output_dir: str = "runs/experiment"
    grid_eps: float = 0.3
    grid_k: int = 5

    def __post_init__(self):
        if self.dataset not in ("mnist", "cifar10"):
            raise ConfigError(f"dataset: expected mnist or cifar10, got {self.dataset!r}")
        if self.h_units not in ("intensity", "pixel"):
            raise ConfigError(f"h_units: expected intensity or pixel, got {self.h_units!r}")
        if any(h <= 0 for h in self.h_values):
            raise ConfigError("h_values: every h must be positive")
        if not self.seeds:
            raise ConfigError("seeds: at least one seed is required")
        try:
            FgsmParams(tuple(self.eps_list))
            self.train_config(0)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def nlm_params(self, h: float) -> NlmParams:
        kw = dict(patch_radius=self.patch_radius, search_radius=self.search_radius)
        if self.h_units == "intensity":
            return NlmParams.from_intensity(h, self.sigma, **kw)
        return NlmParams(h, self.sigma, **kw)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=seed,
            dtype=self.dtype,
        )

    def fgsm_params(self) -> FgsmParams:
        return FgsmParams(tuple(self.eps_list))

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if value is None:
                text = ""
            elif isinstance(value, list):
                text = ", ".join(_fmt_scalar(v) for v in value)
            else:
                text = _fmt_scalar(value)
            lines.append(f"{f.name} = {text}")
        return "\n".join(lines) + "\n"


def _fmt_scalar(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _field_types() -> dict[str, str]:
    hints = {
        "dataset": "str", "data_dir": "path", "train_images": "path", "train_labels": "path",
        "test_images": "path", "test_labels": "path", "h_values": "floats", "h_units": "str",
        "sigma": "float", "patch_radius": "int", "search_radius": "int", "combine_h": "bool",
        "train_subset": "optint", "test_subset": "optint", "learning_rate": "float",
        "momentum": "float", "weight_decay": "float", "epochs": "int", "batch_size": "int",
        "dtype": "str", "eps_list": "floats", "seeds": "ints", "output_dir": "str",
        "grid_eps": "float", "grid_k": "int",
    }
    assert set(hints) == {f.name for f in fields(ExperimentConfig)}
    return hints


CONFIG_KEYS = _field_types()


def _convert(key: str, raw: str):
    kind = CONFIG_KEYS[key]
    raw = raw.strip()
    try:
        if kind in ("str",):
            return raw
        if kind == "path":
            return raw or None
        if kind == "float":
            value = float(raw)
            if not math.isfinite(value):
                raise ValueError
            return value
        if kind == "int":
            return int(raw)
        if kind == "optint":
            return None if raw.lower() in ("", "none", "all") else int(raw)
        if kind == "bool":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError
        parts = [p for p in raw.replace(",", " ").split()]
        if kind == "floats":
            return [float(p) for p in parts]
        if kind == "ints":
            return [int(p) for p in parts]
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None
    raise AssertionError(kind)


def parse_config_text(text: str, overrides: Optional[dict] = None) -> ExperimentConfig:
    """Parse ``key = value`` lines (``#`` starts a comment) into a config.

    ``overrides`` maps keys to raw string values and wins over the file.
    """
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{key}: unknown config key (line {lineno})")
        values[key] = _convert(key, raw)
    for key, raw in (overrides or {}).items():
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{key}: unknown config key")
        values[key] = _convert(key, raw) if isinstance(raw, str) else raw
    return ExperimentConfig(**values)


def load_config(path, overrides: Optional[dict] = None) -> ExperimentConfig:
    return parse_config_text(Path(path).read_text(), overrides)


# --------------------------------------------------------------------------
# data


def _resolve(cfg: ExperimentConfig, key: str, default_name: str) -> Path:
    explicit = getattr(cfg, key, None)
    if explicit:
        path = Path(explicit)
        return path if path.is_absolute() or cfg.data_dir is None else Path(cfg.data_dir) / path
    if cfg.data_dir is None:
        raise ConfigError(f"{key}: no path given and no data_dir set")
    return Path(cfg.data_dir) / default_name


def load_raw_data(cfg: ExperimentConfig) -> tuple[LabeledDataset, LabeledDataset]:
    """Training and test sets, cut to the configured deterministic prefixes."""
    if cfg.dataset == "mnist":
        train = dataset_io.load_mnist_files(
            _resolve(cfg, "train_images", MNIST_FILES["train_images"]),
            _resolve(cfg, "train_labels", MNIST_FILES["train_labels"]),
            "mnist-train",
        )
        test = dataset_io.load_mnist_files(
            _resolve(cfg, "test_images", MNIST_FILES["test_images"]),
            _resolve(cfg, "test_labels", MNIST_FILES["test_labels"]),
            "mnist-test",
        )
    else:
        if cfg.data_dir is None:
            raise ConfigError("data_dir: CIFAR-10 needs the directory holding the .bin batches")
        base = Path(cfg.data_dir)
        train = dataset_io.load_cifar10_files([base / f for f in CIFAR_TRAIN], "cifar10-train")
        test = dataset_io.load_cifar10_files([base / f for f in CIFAR_TEST], "cifar10-test")
    return train.subset(cfg.train_subset), test.subset(cfg.test_subset)


def nlm_tag(source_tag: str, h: float) -> str:
    return f"{source_tag}-nlm-h{h:g}"


def augment_dataset(
    train: LabeledDataset,
    h_values: Sequence[float],
    sigma: float = 0.0,
    *,
    h_units: str = "intensity",
    patch_radius: int = 3,
    search_radius: int = 10,
) -> list[LabeledDataset]:
    """One NLM-denoised copy of ``train`` per bandwidth in ``h_values``.

    Labels are copied unchanged and each copy records its ``transform_h``.
    """
    out = []
    for h in h_values:
        kw = dict(patch_radius=patch_radius, search_radius=search_radius)
        params = NlmParams.from_intensity(h, sigma, **kw) if h_units == "intensity" else NlmParams(h, sigma, **kw)
        images = denoise_batch(train.images, params)
        out.append(
            train.replace(images=images, source_tag=nlm_tag(train.source_tag, h), transform_h=float(h))
        )
    return out


def _cached_augment(cfg: ExperimentConfig, train: LabeledDataset, out_dir: Path) -> dict[float, LabeledDataset]:
    """Denoised training sets, reusing matching files from earlier runs in ``out_dir``."""
    ds_dir = out_dir / "datasets"
    ds_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = ds_dir / "manifest.json"
    stamp = {
        "source": train.source_tag,
        "n": len(train),
        "images_sha256": hashlib.sha256(np.ascontiguousarray(train.images).tobytes()).hexdigest(),
        "sigma": cfg.sigma,
        "h_units": cfg.h_units,
        "patch_radius": cfg.patch_radius,
        "search_radius": cfg.search_radius,
    }
    manifest = dataset_io.DatasetManifest()
    result = {}
    for h in cfg.h_values:
        tag = nlm_tag(train.source_tag, h)
        path = ds_dir / f"{tag}.nlmd"
        meta_path = ds_dir / f"{tag}.json"
        ds = None
        if path.exists() and meta_path.exists() and json.loads(meta_path.read_text()) == {**stamp, "h": h}:
            ds = dataset_io.load_dataset(path)
            log.info("reusing %s", path)
        if ds is None:
            t0 = time.time()
            (ds,) = augment_dataset(
                train, [h], cfg.sigma, h_units=cfg.h_units,
                patch_radius=cfg.patch_radius, search_radius=cfg.search_radius,
            )
            dataset_io.save_dataset(ds, path)
            meta_path.write_text(json.dumps({**stamp, "h": h}, sort_keys=True) + "\n")
            log.info("denoised %d images at h=%g in %.1fs", len(ds), h, time.time() - t0)
        checksum = dataset_io.hashlib.sha256(path.read_bytes()).hexdigest()
        manifest.add(tag, path.name, h, len(ds), checksum)
        result[h] = ds
    manifest.save(manifest_path)
    return result


# --------------------------------------------------------------------------
# report


def format_row(row: RobustnessRow) -> list[str]:
    return [
        row.model_id,
        row.train_source,
        "" if row.transform_h is None else f"{row.transform_h:.6f}",
        "mean" if row.seed is None else str(row.seed),
        f"{row.eps:.6f}",
        f"{row.accuracy:.6f}",
        str(row.n),
    ]


def _sort_key(row: RobustnessRow):
    return (row.model_id, math.inf if row.seed is None else row.seed, row.eps)


def report_to_csv(rows: Sequence[RobustnessRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for row in sorted(rows, key=_sort_key):
        writer.writerow(format_row(row))
    return buf.getvalue()


def emit_report(rows: Sequence[RobustnessRow], path) -> None:
    Path(path).write_text(report_to_csv(rows))


def parse_report(text: str) -> list[RobustnessRow]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header != CSV_HEADER:
        raise ValueError(f"unexpected CSV header {header}")
    rows = []
    for rec in reader:
        model_id, source, th, seed, eps, acc, n = rec
        rows.append(
            RobustnessRow(
                model_id,
                source,
                float(th) if th else None,
                None if seed == "mean" else int(seed),
                float(eps),
                float(acc),
                int(n),
            )
        )
    return rows


def read_report(path) -> list[RobustnessRow]:
    return parse_report(Path(path).read_text())


def mean_rows(rows: Sequence[RobustnessRow]) -> list[RobustnessRow]:
    """Average accuracy over seeds for every (model, eps)."""
    groups: dict[tuple, list[RobustnessRow]] = {}
    for r in rows:
        if r.seed is not None:
            groups.setdefault((r.model_id, r.eps), []).append(r)
    out = []
    for (model_id, eps), rs in groups.items():
        out.append(
            RobustnessRow(
                model_id,
                rs[0].train_source,
                rs[0].transform_h,
                None,
                eps,
                float(np.mean([r.accuracy for r in rs])),
                rs[0].n,
            )
        )
    return sorted(out, key=_sort_key)


# --------------------------------------------------------------------------
# run


@dataclass
class TrainingSet:
    model_id: str
    data: LabeledDataset
    transform_h: Optional[float]


def training_sets(train: LabeledDataset, denoised: dict[float, LabeledDataset], combine_h: bool) -> list[TrainingSet]:
    """Baseline plus original-with-denoised sets (one per h, or one joint set)."""
    sets = [TrainingSet("baseline", train, None)]
    if combine_h and denoised:
        hs = sorted(denoised)
        joint = concat_datasets(train, *(denoised[h] for h in hs))
        sets.append(TrainingSet("nlm-h" + "+".join(f"{h:g}" for h in hs), joint, None))
    else:
        for h, ds in denoised.items():
            sets.append(TrainingSet(f"nlm-h{h:g}", concat_datasets(train, ds), h))
    return sets


def run_experiment(
    cfg: ExperimentConfig,
    *,
    data: Optional[tuple[LabeledDataset, LabeledDataset]] = None,
    on_model: Optional[Callable] = None,
    audit: Optional[Callable] = None,
) -> list[RobustnessRow]:
    """Run the whole protocol and write all artifacts under ``cfg.output_dir``.

    ``data`` overrides loading from disk. ``on_model(model_id, seed, net,
    history, rows)`` is called after each model is trained and swept;
    ``audit`` is forwarded to :func:`robustness_sweep`.
    """
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "checkpoints").mkdir(exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    handler = logging.FileHandler(out / "run.log", mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(message)s"))
    pkg_log = logging.getLogger("nlmaug")
    pkg_log.addHandler(handler)
    prev_level = pkg_log.level
    if pkg_log.getEffectiveLevel() > logging.INFO:
        pkg_log.setLevel(logging.INFO)
    try:
        train, test = data if data is not None else load_raw_data(cfg)
        log.info("train %s: %d images, test %s: %d images", train.source_tag, len(train), test.source_tag, len(test))
        denoised = _cached_augment(cfg, train, out)
        sets = training_sets(train, denoised, cfg.combine_h)
        fgsm = cfg.fgsm_params()
        rows: list[RobustnessRow] = []
        for seed in cfg.seeds:
            for ts in sets:
                t0 = time.time()
                net, history = train_model(
                    init_params(_architecture(train), seed), ts.data, cfg.train_config(seed),
                    log=lambda r, m=ts.model_id, s=seed: log.info("%s seed %d: %s", m, s, r),
                )
                save_checkpoint(net, out / "checkpoints" / f"{ts.model_id}_seed{seed}.ckpt")
                model_rows = robustness_sweep(
                    net, test, fgsm, model_id=ts.model_id, train_source=ts.data.source_tag,
                    transform_h=ts.transform_h, seed=seed, on_batch=audit,
                )
                rows.extend(model_rows)
                log.info(
                    "%s seed %d: trained on %d images in %.0fs, accuracy by eps %s",
                    ts.model_id, seed, len(ts.data), time.time() - t0,
                    {r.eps: r.accuracy for r in model_rows},
                )
                # flush partial results after every model
                emit_report(rows, out / "report.csv")
                if on_model is not None:
                    on_model(ts.model_id, seed, net, history, model_rows)
        emit_report(mean_rows(rows), out / "report_mean.csv")
        if cfg.grid_k > 0:
            _export_grid(cfg, test, out, [ts.model_id for ts in sets])
        return rows
    finally:
        pkg_log.removeHandler(handler)
        pkg_log.setLevel(prev_level)
        handler.close()


def _export_grid(cfg: ExperimentConfig, test: LabeledDataset, out: Path, model_ids) -> None:
    """Misclassified adversarial examples of each model trained with the first seed."""
    for model_id in model_ids:
        net = load_checkpoint(out / "checkpoints" / f"{model_id}_seed{cfg.seeds[0]}.ckpt")
        grid = misclassification_grid(net, test, cfg.grid_eps, cfg.grid_k)
        export_grid(grid, out / "grid", prefix=f"{model_id}_eps{cfg.grid_eps:g}")


def _architecture(train: LabeledDataset) -> Architecture:
    c, h, w = train.image_shape
    return Architecture(in_channels=c, image_size=(h, w), num_classes=train.num_classes)
