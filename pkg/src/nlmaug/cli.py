"""Command-line entry point: ``nlmaug <command> ...`` (or ``python -m nlmaug``)."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import dataset_io
from .adversarial import FgsmParams, export_grid, misclassification_grid, robustness_sweep
from .experiment import (
    ConfigError,
    ExperimentConfig,
    augment_dataset,
    emit_report,
    load_config,
    load_raw_data,
    mean_rows,
    parse_config_text,
    read_report,
    report_to_csv,
    run_experiment,
)
from .net import (
    Architecture,
    CheckpointError,
    TrainConfig,
    init_params,
    load_checkpoint,
    save_checkpoint,
    train_model,
)
from .nlm import NlmParams, denoise_image
from .tensor_image import LabeledDataset, concat_datasets


def _nlm_params(args) -> NlmParams:
    kw = dict(patch_radius=args.patch_radius, search_radius=args.search_radius)
    if args.units == "intensity":
        return NlmParams.from_intensity(args.h, args.sigma, **kw)
    return NlmParams(args.h, args.sigma, **kw)


def _add_nlm_flags(p, multi_h=False):
    if multi_h:
        p.add_argument("--h", type=float, nargs="+", default=[3.0, 5.0, 15.0], help="filter bandwidths")
    else:
        p.add_argument("--h", type=float, required=True, help="filter bandwidth")
    p.add_argument("--sigma", type=float, default=0.0, help="noise standard deviation")
    p.add_argument(
        "--units", choices=("intensity", "pixel"), default="intensity",
        help="units of --h/--sigma: 0..255 grey levels (default) or [0, 1] pixel values",
    )
    p.add_argument("--patch-radius", type=int, default=3)
    p.add_argument("--search-radius", type=int, default=10)


def _add_data_flags(p):
    p.add_argument("--dataset", choices=("mnist", "cifar10"), default="mnist")
    p.add_argument("--data-dir", help="directory with the raw MNIST/CIFAR-10 files")
    p.add_argument("--subset", type=int, default=None, help="use only the first N images")


def _add_train_flags(p):
    d = TrainConfig()
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--lr", type=float, default=d.learning_rate)
    p.add_argument("--momentum", type=float, default=d.momentum)
    p.add_argument("--weight-decay", type=float, default=d.weight_decay)
    p.add_argument("--dtype", choices=("float32", "float64"), default=d.dtype)


def _raw_split(args, split: str) -> LabeledDataset:
    if args.data_dir is None:
        raise SystemExit("error: --data-dir is required to read raw data")
    cfg = ExperimentConfig(dataset=args.dataset, data_dir=args.data_dir, train_subset=None, test_subset=None)
    train, test = load_raw_data(cfg)
    ds = train if split == "train" else test
    return ds.subset(args.subset)


def _load_sets(paths) -> LabeledDataset:
    sets = [dataset_io.load_dataset(p) for p in paths]
    return sets[0] if len(sets) == 1 else concat_datasets(*sets)


def cmd_denoise(args) -> int:
    img = dataset_io.read_pnm(args.input)
    out = denoise_image(img, _nlm_params(args))
    dataset_io.export_image(out, args.output)
    return 0


def cmd_augment(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.input:
        train = _load_sets(args.input).subset(args.subset)
    else:
        train = _raw_split(args, "train")
    manifest = dataset_io.DatasetManifest()
    if args.include_original:
        path = out / f"{train.source_tag}.nlmd"
        manifest.add(train.source_tag, path.name, None, len(train), dataset_io.save_dataset(train, path))
    for ds in augment_dataset(
        train, args.h, args.sigma, h_units=args.units,
        patch_radius=args.patch_radius, search_radius=args.search_radius,
    ):
        path = out / f"{ds.source_tag}.nlmd"
        manifest.add(ds.source_tag, path.name, ds.transform_h, len(ds), dataset_io.save_dataset(ds, path))
        print(f"wrote {path} ({len(ds)} images, h={ds.transform_h:g})")
    manifest.save(out / "manifest.json")
    (out / "config.txt").write_text(_snapshot(args))
    return 0


def cmd_train(args) -> int:
    if args.train_set:
        train = _load_sets(args.train_set)
    else:
        train = _raw_split(args, "train")
    if args.augment_with:
        train = concat_datasets(train, *(dataset_io.load_dataset(p) for p in args.augment_with))
    c, h, w = train.image_shape
    arch = Architecture(in_channels=c, image_size=(h, w), num_classes=train.num_classes)
    cfg = TrainConfig(
        learning_rate=args.lr, momentum=args.momentum, weight_decay=args.weight_decay,
        epochs=args.epochs, batch_size=args.batch_size, seed=args.seed, dtype=args.dtype,
    )
    net, _ = train_model(init_params(arch, args.seed), train, cfg, log=lambda r: print(r, flush=True))
    save_checkpoint(net, args.out)
    Path(str(args.out) + ".config.txt").write_text(_snapshot(args))
    print(f"saved {args.out} ({net.n_params} parameters, trained on {len(train)} images)")
    return 0


def _test_set(args) -> LabeledDataset:
    if args.test_set:
        return _load_sets(args.test_set)
    return _raw_split(args, "test")


def cmd_attack(args) -> int:
    net = load_checkpoint(args.model)
    test = _test_set(args)
    grid = misclassification_grid(net, test, args.eps, args.k)
    captions = export_grid(grid, args.out, prefix=f"eps{args.eps:g}")
    for c in captions:
        print(c)
    print(f"{len(captions)} misclassified images written to {args.out}")
    return 0


def cmd_sweep(args) -> int:
    net = load_checkpoint(args.model)
    test = _test_set(args)
    rows = robustness_sweep(
        net, test, FgsmParams(tuple(args.eps)), model_id=args.model_id or Path(args.model).stem,
        train_source=args.train_source, transform_h=args.transform_h, seed=net.seed,
    )
    if args.out:
        emit_report(rows, args.out)
    sys.stdout.write(report_to_csv(rows))
    return 0


def cmd_report(args) -> int:
    rows = [r for path in args.csv for r in read_report(path)]
    table = mean_rows(rows) if args.mean else rows
    text = report_to_csv(table)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_run(args) -> int:
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value
    overrides["seeds"] = " ".join(str(s) for s in args.seed)
    if args.combine_h:
        overrides["combine_h"] = "yes"
    if args.out:
        overrides["output_dir"] = args.out
    if args.data_dir:
        overrides["data_dir"] = args.data_dir
    if args.config:
        cfg = load_config(args.config, overrides)
    else:
        cfg = parse_config_text("", overrides)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    rows = run_experiment(cfg)
    sys.stdout.write(report_to_csv(mean_rows(rows)))
    return 0


def _snapshot(args) -> str:
    skip = {"func"}
    return "".join(f"{k} = {v}\n" for k, v in sorted(vars(args).items()) if k not in skip)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nlmaug", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("denoise", help="NLM-denoise one PGM/PPM image")
    _add_nlm_flags(p)
    p.add_argument("input")
    p.add_argument("output")
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("augment", help="write NLM-denoised copies of a training set")
    _add_data_flags(p)
    _add_nlm_flags(p, multi_h=True)
    p.add_argument("--input", nargs="+", help="dataset container file(s) instead of raw data")
    p.add_argument("--include-original", action="store_true", help="also store the untransformed set")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    _add_data_flags(p)
    _add_train_flags(p)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--train-set", nargs="+", help="dataset container file(s) instead of raw data")
    p.add_argument("--augment-with", nargs="+", help="extra dataset container file(s) to append")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="export test images misclassified under FGSM")
    _add_data_flags(p)
    p.add_argument("--model", required=True)
    p.add_argument("--test-set", nargs="+")
    p.add_argument("--eps", type=float, default=0.3)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--out", required=True, help="output directory for PGM/PPM files")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("sweep", help="accuracy under FGSM across an eps grid")
    _add_data_flags(p)
    p.add_argument("--model", required=True)
    p.add_argument("--test-set", nargs="+")
    p.add_argument("--eps", type=float, nargs="+", default=list(FgsmParams().eps_list))
    p.add_argument("--model-id")
    p.add_argument("--train-source", default="")
    p.add_argument("--transform-h", type=float)
    p.add_argument("--out", help="CSV path")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="merge sweep CSVs, optionally averaging over seeds")
    p.add_argument("csv", nargs="+")
    p.add_argument("--mean", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("run", help="full experiment from a config file")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int, nargs="+", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--data-dir")
    p.add_argument("--combine-h", action="store_true", help="one augmented model on all h-sets jointly")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_run)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, dataset_io.DatasetFormatError, FileNotFoundError) as exc:
        print(f"nlmaug {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
