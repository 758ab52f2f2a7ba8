"""Command-line interface for training, evaluation and openness sweeps.

Options come from an INI config file (one section per option group) and can
be overridden by command-line flags. Every run writes into a directory named
from a hash of the resolved options plus the seed, so reruns with the same
settings land in the same place and produce identical files.

Exit codes: 0 success, 2 config/usage, 3 data, 4 model, 5 internal.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import os
import sys

import numpy as np

from .data import (
    DataFormatError,
    Dataset,
    SyntheticConfig,
    generate_synthetic,
    load_cache,
    load_idx,
    load_image_dir,
    preprocess,
    sample_split,
    write_pgm,
)
from .evaluation import (
    METHODS,
    UNKNOWN,
    EvaluationReport,
    ModelSetup,
    auroc,
    decide_dataset,
    f_measure,
    openness,
    run_openness_sweep,
    write_sweep_csv,
)
from .evt import (
    evt_probability,
    fit_gpd_tail,
    load_tail_model,
    save_tail_model,
    tail_threshold,
    with_tau,
)
from .figures import plot_error_histogram, plot_loss_curves, plot_sweep
from .models import (
    ArchitectureError,
    build_triplet,
    load_checkpoint,
    save_checkpoint,
    triplet_from_networks,
)
from .tensor import ContractError
from .trainer import MODES, TrainConfig, TrainResult, train, write_history_csv

DEFAULT_ENCODER = "Conv(32)-ReLU-Conv(64)-ReLU-Conv(128)-FC(512)"
DEFAULT_DECODER = "FC(8192)-ConvTran(64)-ReLU-ConvTran(32)-ReLU-ConvTran(1)-Tanh"


class ConfigError(ValueError):
    """Raised for bad config files or inconsistent options."""


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _parse_int_list(text: str) -> list[int]:
    return [int(part) for part in text.split(",") if part.strip()]


def _parse_str_list(text: str) -> list[str]:
    return [part.strip() for part in text.split(",") if part.strip()]


# (section, key): (type converter, default, help). A None default means the
# option is only required when the chosen command actually needs it.
OPTION_SPEC = {
    ("data", "source"): (str, "synthetic", "synthetic, idx, dir or cache"),
    ("data", "images"): (str, None, "IDX image file (source=idx)"),
    ("data", "labels"): (str, None, "IDX label file (source=idx)"),
    ("data", "root"): (str, None, "class-per-subdirectory image tree (source=dir)"),
    ("data", "cache"): (str, None, "binary dataset cache file (source=cache)"),
    ("data", "classes"): (int, 10, "synthetic class count"),
    ("data", "samples"): (int, 50, "synthetic samples per class"),
    ("data", "noise"): (float, 0.15, "synthetic pixel noise"),
    ("data", "data_seed"): (int, 0, "synthetic sample-noise seed"),
    ("data", "image_size"): (int, 16, "square side after preprocessing"),
    ("data", "grayscale"): (_parse_bool, True, "collapse color to luminance"),
    ("split", "n_known"): (int, 6, "number of known classes"),
    ("split", "split_seed"): (int, 0, "known-class sampling seed"),
    ("split", "train_fraction"): (float, 0.8, "per-class training fraction"),
    ("model", "encoder"): (str, DEFAULT_ENCODER, "encoder architecture string"),
    ("model", "decoder"): (str, DEFAULT_DECODER, "decoder architecture string"),
    ("model", "classifier"): (str, None, "classifier architecture (default FC(n_known))"),
    ("train", "mode"): (str, "mlosr", f"one of {MODES}"),
    ("train", "eta"): (float, 0.0003, "Adam learning rate"),
    ("train", "batch_size"): (int, 64, "minibatch size"),
    ("train", "lambda_c"): (float, 0.5, "classification loss weight"),
    ("train", "lambda_r"): (float, 0.5, "reconstruction loss weight"),
    ("train", "max_epochs"): (int, 50, "epoch cap"),
    ("train", "lr_stop"): (float, 0.01, "per-pixel reconstruction loss stop threshold"),
    ("train", "seed"): (int, 0, "model init and shuffle seed"),
    ("evt", "tail_size"): (int, 20, "number of largest errors in the tail fit"),
    ("evt", "tau"): (float, 0.5, "tail probability rejection threshold"),
    ("sweep", "unknown_counts"): (_parse_int_list, [0, 4], "unknown class counts"),
    ("sweep", "trials"): (int, 3, "trials per sweep point"),
    ("sweep", "methods"): (_parse_str_list, ["mlosr", "dcn_softmax"], "methods to compare"),
    ("output", "outdir"): (str, "runs", "parent directory for run outputs"),
    ("reconstruct", "count"): (int, 8, "images to reconstruct"),
}


def _flag_of(section: str, key: str) -> str:
    # data/image_size -> --image-size; sections exist only for the INI layout
    return "--" + key.replace("_", "-")


def load_config_file(path) -> dict[tuple[str, str], object]:
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"config file not found: {path}")
    values: dict[tuple[str, str], object] = {}
    for section in parser.sections():
        for key in parser[section]:
            if (section, key) not in OPTION_SPEC:
                raise ConfigError(f"unknown config key [{section}] {key}")
            conv = OPTION_SPEC[(section, key)][0]
            try:
                values[(section, key)] = conv(parser[section][key])
            except ConfigError:
                raise
            except ValueError as exc:
                raise ConfigError(f"bad value for [{section}] {key}: {exc}") from exc
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="openset",
        description="Multi-task open-set recognition: train, evaluate, sweep.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "train": "train a model and fit the rejection tail",
        "eval": "evaluate a trained run on a known/unknown split",
        "sweep": "compare methods across openness levels",
        "fit-evt": "refit the tail model of an existing run",
        "reconstruct": "dump input/reconstruction image pairs",
    }
    for name, help_text in commands.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="INI config file")
        if name in ("eval", "fit-evt", "reconstruct"):
            p.add_argument("--run", required=True, help="run directory from a train command")
        for (section, key), (conv, default, help_text2) in OPTION_SPEC.items():
            p.add_argument(
                _flag_of(section, key),
                dest=f"{section}__{key}",
                type=conv,
                default=None,
                metavar=key.upper(),
                help=f"{help_text2} [{section}]",
            )
    return parser


def resolve_options(args: argparse.Namespace) -> dict[tuple[str, str], object]:
    values = {k: default for k, (_, default, _) in OPTION_SPEC.items()}
    if args.config:
        values.update(load_config_file(args.config))
    for (section, key) in OPTION_SPEC:
        cli_value = getattr(args, f"{section}__{key}")
        if cli_value is not None:
            values[(section, key)] = cli_value
    return values


def _opt(values, section, key):
    return values[(section, key)]


def load_dataset(values) -> Dataset:
    """Load and preprocess the dataset selected by the [data] options."""
    source = _opt(values, "data", "source")
    size = _opt(values, "data", "image_size")
    gray = _opt(values, "data", "grayscale")
    if source == "synthetic":
        return generate_synthetic(
            SyntheticConfig(
                num_classes=_opt(values, "data", "classes"),
                samples_per_class=_opt(values, "data", "samples"),
                image_size=size,
                noise=_opt(values, "data", "noise"),
                seed=_opt(values, "data", "data_seed"),
            )
        )
    if source == "idx":
        images, labels = _opt(values, "data", "images"), _opt(values, "data", "labels")
        if not images or not labels:
            raise ConfigError("source=idx needs --images and --labels")
        return preprocess(load_idx(images, labels), size, grayscale=gray)
    if source == "dir":
        root = _opt(values, "data", "root")
        if not root:
            raise ConfigError("source=dir needs --root")
        return preprocess(load_image_dir(root), size, grayscale=gray)
    if source == "cache":
        path = _opt(values, "data", "cache")
        if not path:
            raise ConfigError("source=cache needs --cache")
        d = load_cache(path)
        if d.images.shape[2] != size or d.images.shape[3] != size:
            raise ConfigError(
                f"cached images are {d.images.shape[2]}x{d.images.shape[3]}, "
                f"config says image_size={size}"
            )
        return d
    raise ConfigError(f"unknown data source {source!r}")


def _config_hash(values) -> str:
    # the output location must not change the run identity
    canon = {f"{s}.{k}": v for (s, k), v in sorted(values.items()) if s != "output"}
    return hashlib.sha256(json.dumps(canon, sort_keys=True).encode()).hexdigest()[:10]


def _run_dir(values) -> str:
    seed = _opt(values, "train", "seed")
    path = os.path.join(_opt(values, "output", "outdir"), f"{_config_hash(values)}-s{seed}")
    os.makedirs(path, exist_ok=True)
    return path


def _classifier_text(values) -> str:
    return _opt(values, "model", "classifier") or f"FC({_opt(values, 'split', 'n_known')})"


def cmd_train(values) -> int:
    mode = _opt(values, "train", "mode")
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    dataset = load_dataset(values)
    split, train_k, test_k, test_u = sample_split(
        dataset,
        _opt(values, "split", "n_known"),
        seed=_opt(values, "split", "split_seed"),
        train_fraction=_opt(values, "split", "train_fraction"),
    )
    input_shape = tuple(int(v) for v in dataset.images.shape[1:])
    triplet = build_triplet(
        _opt(values, "model", "encoder"),
        _opt(values, "model", "decoder"),
        _classifier_text(values),
        input_shape,
        seed=_opt(values, "train", "seed"),
    )
    if triplet.num_classes != len(split.known_classes):
        raise ConfigError(
            f"classifier has {triplet.num_classes} outputs but the split keeps "
            f"{len(split.known_classes)} known classes"
        )
    cfg = TrainConfig(
        eta=_opt(values, "train", "eta"),
        batch_size=_opt(values, "train", "batch_size"),
        lambda_c=_opt(values, "train", "lambda_c"),
        lambda_r=_opt(values, "train", "lambda_r"),
        max_epochs=_opt(values, "train", "max_epochs"),
        lr_stop_per_pixel=_opt(values, "train", "lr_stop"),
        seed=_opt(values, "train", "seed"),
    )
    result = train(triplet, train_k.images, train_k.labels, cfg, mode=mode)

    run_dir = _run_dir(values)
    write_history_csv(result.history, os.path.join(run_dir, "loss.csv"))
    plot_loss_curves(result.history, os.path.join(run_dir, "loss.png"))

    meta = {
        "mode": mode,
        "input_shape": list(input_shape),
        "preprocess": {
            "image_size": _opt(values, "data", "image_size"),
            "grayscale": _opt(values, "data", "grayscale"),
        },
        "split": {
            "seed": _opt(values, "split", "split_seed"),
            "n_known": _opt(values, "split", "n_known"),
            "train_fraction": _opt(values, "split", "train_fraction"),
            "known_classes": list(split.known_classes),
        },
        "recon_cut": None,
    }
    networks = {"encoder": triplet.encoder, "classifier": triplet.classifier}
    if mode != "dcn_softmax":
        networks["decoder"] = triplet.decoder
        if mode == "dcn_ae":
            networks["recon_encoder"] = result.recon_encoder
        errors = result.reconstruction_errors(train_k.images)
        meta["recon_cut"] = tail_threshold(errors, tail_size=_opt(values, "evt", "tail_size"))
        if mode == "mlosr":
            tail = fit_gpd_tail(
                errors,
                tail_size=_opt(values, "evt", "tail_size"),
                tau=_opt(values, "evt", "tau"),
            )
            save_tail_model(os.path.join(run_dir, "tail.txt"), tail)
            plot_error_histogram(
                errors,
                threshold=tail.threshold,
                path=os.path.join(run_dir, "train_errors.png"),
            )
    save_checkpoint(os.path.join(run_dir, "checkpoint.bin"), networks, meta)
    final = result.history[-1]
    print(
        f"trained mode={mode} epochs={len(result.history)} "
        f"l_t={final.l_t:.6f} run_dir={run_dir}"
    )
    return 0


def _load_run(run_dir):
    """Rebuild the trained pipeline and tail model saved by cmd_train."""
    ckpt = os.path.join(run_dir, "checkpoint.bin")
    if not os.path.exists(ckpt):
        raise DataFormatError(f"no checkpoint in {run_dir}")
    networks, meta = load_checkpoint(ckpt)
    triplet = triplet_from_networks(networks, meta)
    mode = meta["mode"]
    if mode == "mlosr":
        recon_encoder = triplet.encoder
    elif mode == "dcn_ae":
        recon_encoder = networks["recon_encoder"]
    else:
        recon_encoder = None
    result = TrainResult(triplet=triplet, mode=mode, history=[], recon_encoder=recon_encoder)
    tail_path = os.path.join(run_dir, "tail.txt")
    tail = load_tail_model(tail_path) if os.path.exists(tail_path) else None
    return result, meta, tail


def _resplit(values, meta):
    """Recreate the training split recorded in the checkpoint meta."""
    dataset = load_dataset(values)
    split, train_k, test_k, test_u = sample_split(
        dataset,
        meta["split"]["n_known"],
        seed=meta["split"]["seed"],
        train_fraction=meta["split"]["train_fraction"],
    )
    if list(split.known_classes) != list(meta["split"]["known_classes"]):
        raise ConfigError(
            "dataset does not reproduce the known classes recorded at training "
            f"time: got {list(split.known_classes)}, expected "
            f"{meta['split']['known_classes']}; pass the same data options"
        )
    return split, train_k, test_k, test_u


def cmd_eval(values, run_dir) -> int:
    result, meta, tail = _load_run(run_dir)
    split, train_k, test_k, test_u = _resplit(values, meta)
    mode = meta["mode"]
    if mode == "mlosr":
        if tail is None:
            raise DataFormatError(f"no tail model in {run_dir}; run fit-evt first")
        tail = with_tau(tail, _opt(values, "evt", "tau"))
        scoring, cut = "evt", None
    elif mode == "dcn_ae":
        scoring, cut = "recon_threshold", meta["recon_cut"]
    else:
        scoring, cut = "softmax", None
    pred_k, score_k = decide_dataset(result, test_k.images, scoring, tail=tail, recon_cut=cut)
    n_known = len(split.known_classes)
    n_unknown = len(split.unknown_classes)
    if len(test_u):
        pred_u, score_u = decide_dataset(
            result, test_u.images, scoring, tail=tail, recon_cut=cut
        )
        auc, auc_err = auroc(score_k, score_u), None
    else:
        pred_u = np.empty(0, dtype=np.int64)
        auc, auc_err = None, "AUROC undefined: empty unknown test set"
    pred = np.concatenate([pred_k, pred_u])
    truth = np.concatenate([test_k.labels, np.full(len(test_u), UNKNOWN)])
    report = EvaluationReport(
        f1=f_measure(pred, truth),
        auroc=auc,
        openness=openness(n_known, n_known + n_unknown, n_known) if n_unknown else 0.0,
        known_classes=list(split.known_classes),
        unknown_classes=list(split.unknown_classes),
        decision_counts={
            "known": int((pred != UNKNOWN).sum()),
            "unknown": int((pred == UNKNOWN).sum()),
        },
        auroc_error=auc_err,
    )
    with open(os.path.join(run_dir, "report.json"), "w") as f:
        f.write(report.to_json() + "\n")
    if result.recon_encoder is not None:
        plot_error_histogram(
            result.reconstruction_errors(test_k.images),
            result.reconstruction_errors(test_u.images) if len(test_u) else None,
            threshold=tail.threshold if tail else None,
            path=os.path.join(run_dir, "test_errors.png"),
        )
    auc_text = "n/a" if auc is None else f"{auc:.4f}"
    print(f"f1={report.f1:.4f} auroc={auc_text} openness={report.openness:.4f} run_dir={run_dir}")
    return 0


def cmd_sweep(values) -> int:
    dataset = load_dataset(values)
    methods = _opt(values, "sweep", "methods")
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}; choose from {METHODS}")
    input_shape = tuple(int(v) for v in dataset.images.shape[1:])
    setup = ModelSetup(
        encoder=_opt(values, "model", "encoder"),
        decoder=_opt(values, "model", "decoder"),
        classifier=_classifier_text(values),
        input_shape=input_shape,
        tail_size=_opt(values, "evt", "tail_size"),
        tau=_opt(values, "evt", "tau"),
        train_fraction=_opt(values, "split", "train_fraction"),
    )
    cfg = TrainConfig(
        eta=_opt(values, "train", "eta"),
        batch_size=_opt(values, "train", "batch_size"),
        lambda_c=_opt(values, "train", "lambda_c"),
        lambda_r=_opt(values, "train", "lambda_r"),
        max_epochs=_opt(values, "train", "max_epochs"),
        lr_stop_per_pixel=_opt(values, "train", "lr_stop"),
        seed=0,
    )
    curves = run_openness_sweep(
        dataset=dataset,
        n_known=_opt(values, "split", "n_known"),
        unknown_counts=_opt(values, "sweep", "unknown_counts"),
        trials=_opt(values, "sweep", "trials"),
        methods=methods,
        setup=setup,
        train_cfg=cfg,
        master_seed=_opt(values, "train", "seed"),
    )
    run_dir = _run_dir(values)
    write_sweep_csv(curves, os.path.join(run_dir, "sweep.csv"))
    plot_sweep(curves, os.path.join(run_dir, "sweep.png"))
    for method in sorted(curves):
        points = " ".join(f"{p.openness * 100:.1f}%:{p.f1_mean:.3f}" for p in curves[method])
        print(f"{method}: {points}")
    print(f"run_dir={run_dir}")
    return 0


def cmd_fit_evt(values, run_dir) -> int:
    result, meta, _ = _load_run(run_dir)
    if result.recon_encoder is None:
        raise ConfigError(f"mode {meta['mode']} has no reconstruction pipeline to fit")
    _, train_k, _, _ = _resplit(values, meta)
    errors = result.reconstruction_errors(train_k.images)
    tail = fit_gpd_tail(
        errors,
        tail_size=_opt(values, "evt", "tail_size"),
        tau=_opt(values, "evt", "tau"),
    )
    save_tail_model(os.path.join(run_dir, "tail.txt"), tail)
    plot_error_histogram(
        errors, threshold=tail.threshold, path=os.path.join(run_dir, "train_errors.png")
    )
    print(
        f"zeta={tail.zeta:.6f} sigma={tail.sigma:.6f} threshold={tail.threshold:.6f} "
        f"tail_size={tail.tail_size} run_dir={run_dir}"
    )
    return 0


def cmd_reconstruct(values, run_dir) -> int:
    result, meta, tail = _load_run(run_dir)
    if result.recon_encoder is None:
        raise ConfigError(f"mode {meta['mode']} has no decoder to reconstruct with")
    _, _, test_k, _ = _resplit(values, meta)
    count = min(_opt(values, "reconstruct", "count"), len(test_k))
    out_dir = os.path.join(run_dir, "reconstructions")
    os.makedirs(out_dir, exist_ok=True)
    from .tensor import Tensor

    images = test_k.images[:count]
    z = result.recon_encoder.forward(Tensor(images))
    recon = result.triplet.decoder.forward(z).data.reshape(images.shape)
    rows = []
    for i in range(count):
        write_pgm(os.path.join(out_dir, f"input_{i:03d}.pgm"), (images[i] + 1.0) * 127.5)
        write_pgm(os.path.join(out_dir, f"recon_{i:03d}.pgm"), (recon[i] + 1.0) * 127.5)
        err = float(np.abs(images[i] - recon[i]).sum())
        p = evt_probability(err, tail) if tail is not None else float("nan")
        rows.append((i, err, p))
    with open(os.path.join(out_dir, "errors.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["index", "recon_error", "p_evt"])
        for idx, err, p in rows:
            writer.writerow([idx, repr(err), repr(p)])
    print(f"wrote {count} image pairs to {out_dir}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        values = resolve_options(args)
        if args.command == "train":
            return cmd_train(values)
        if args.command == "eval":
            return cmd_eval(values, args.run)
        if args.command == "sweep":
            return cmd_sweep(values)
        if args.command == "fit-evt":
            return cmd_fit_evt(values, args.run)
        if args.command == "reconstruct":
            return cmd_reconstruct(values, args.run)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"error:config: {exc}", file=sys.stderr)
        return 2
    except (DataFormatError, FileNotFoundError) as exc:
        print(f"error:data: {exc}", file=sys.stderr)
        return 3
    except ArchitectureError as exc:
        print(f"error:model: {exc}", file=sys.stderr)
        return 4
    except ValueError as exc:
        print(f"error:config: {exc}", file=sys.stderr)
        return 2
    except ContractError as exc:
        print(f"error:internal: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
