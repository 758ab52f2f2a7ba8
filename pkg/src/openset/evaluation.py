"""Open-set evaluation: openness, F-measure, AUROC and openness sweeps.

Openness uses the class-count reading that reproduces the published
percentages: n_train = n_target = number of known classes, n_test = total
distinct classes at test time. The F-measure is macro-averaged over the K
known classes plus one rejection class; AUROC is the Mann-Whitney rank
statistic so it agrees exactly with pairwise counting.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Dataset, sample_split
from .evt import Decision, TailModel, evt_probability, fit_gpd_tail, tail_threshold
from .models import build_triplet
from .trainer import TrainConfig, TrainResult, train

UNKNOWN = -1  # truth/prediction label for unknown-class samples

METHODS = ("dcn_softmax", "dcn_ae", "mlosr_no_evt", "mlosr")
_TRAIN_MODE = {
    "dcn_softmax": "dcn_softmax",
    "dcn_ae": "dcn_ae",
    "mlosr_no_evt": "mlosr",
    "mlosr": "mlosr",
}


def openness(n_train: int, n_test: int, n_target: int) -> float:
    """1 - sqrt(2 * n_train / (n_test + n_target)).

    n_train and n_target are the known-class count; n_test counts all
    distinct classes appearing at test time (known + unknown).
    """
    if min(n_train, n_test, n_target) <= 0:
        raise ValueError("class counts must be positive")
    if 2 * n_train > n_test + n_target:
        raise ValueError(
            f"2*n_train = {2 * n_train} exceeds n_test + n_target = {n_test + n_target}; "
            "check argument order (n_train, n_test, n_target)"
        )
    return 1.0 - math.sqrt(2.0 * n_train / (n_test + n_target))


def _labels_of(decisions) -> np.ndarray:
    out = np.empty(len(decisions), dtype=np.int64)
    for i, d in enumerate(decisions):
        if isinstance(d, Decision):
            out[i] = d.label if d.is_known else UNKNOWN
        else:
            out[i] = d
    return out


def f_measure(decisions, truth, average: str = "macro") -> float:
    """F1 over known classes plus the rejection class.

    decisions may be Decision objects or plain labels (UNKNOWN for
    rejections); truth uses UNKNOWN for unknown-class samples. Classes
    absent from both truth and prediction are skipped in the macro average.
    average: "macro" (default), "micro", or "macro_known" (ignores the
    rejection class in the average).
    """
    pred = _labels_of(decisions)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.size == 0:
        raise ValueError("empty decision list")
    if pred.shape != truth.shape:
        raise ValueError(f"decisions {pred.shape} vs truth {truth.shape}")
    classes = np.union1d(np.unique(pred), np.unique(truth))
    if average == "micro":
        return float((pred == truth).mean())
    f1s = []
    for c in classes:
        if average == "macro_known" and c == UNKNOWN:
            continue
        tp = np.sum((pred == c) & (truth == c))
        fp = np.sum((pred == c) & (truth != c))
        fn = np.sum((pred != c) & (truth == c))
        denom = 2 * tp + fp + fn
        f1s.append(2.0 * tp / denom if denom else 0.0)
    return float(np.mean(f1s))


def auroc(known_scores, unknown_scores) -> float:
    """P(known score > unknown score) with ties counted half.

    Computed as the Mann-Whitney U statistic over midranks, which equals
    exhaustive pairwise counting exactly. Higher scores mean more known.
    """
    known = np.asarray(known_scores, dtype=np.float64)
    unknown = np.asarray(unknown_scores, dtype=np.float64)
    if known.size == 0 or unknown.size == 0:
        raise ValueError("auroc needs non-empty known and unknown score lists")
    combined = np.concatenate([known, unknown])
    order = np.argsort(combined, kind="stable")
    ranks = np.empty(combined.size)
    sorted_vals = combined[order]
    i = 0
    while i < sorted_vals.size:
        j = i
        while j + 1 < sorted_vals.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # midrank, 1-based
        i = j + 1
    u = ranks[: known.size].sum() - known.size * (known.size + 1) / 2.0
    return float(u / (known.size * unknown.size))


@dataclass
class EvaluationReport:
    """Metrics for one split (or aggregated trials of one sweep point)."""

    f1: float
    auroc: float | None
    openness: float
    per_trial_f1: list[float] = field(default_factory=list)
    f1_std: float = 0.0
    known_classes: list[int] = field(default_factory=list)
    unknown_classes: list[int] = field(default_factory=list)
    decision_counts: dict[str, int] = field(default_factory=dict)
    auroc_error: str | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvaluationReport":
        return cls(**json.loads(text))


def decide_dataset(
    result: TrainResult,
    images: np.ndarray,
    scoring: str,
    tail: TailModel | None = None,
    recon_cut: float | None = None,
    softmax_threshold: float = 0.5,
) -> tuple[np.ndarray, np.ndarray]:
    """Predicted labels (UNKNOWN for rejections) and rejection scores.

    scoring: "evt" uses the tail probability against tail.tau;
    "recon_threshold" rejects when the reconstruction error exceeds
    recon_cut (a hard cut, no tail distribution); "softmax" rejects when
    the top probability is below softmax_threshold. The returned score is
    higher for more known-looking samples.
    """
    probs = result.classify_probs(images)
    labels = np.argmax(probs, axis=1).astype(np.int64)
    if scoring == "softmax":
        top = probs.max(axis=1)
        labels[top < softmax_threshold] = UNKNOWN
        return labels, top
    errors = result.reconstruction_errors(images)
    if scoring == "evt":
        if tail is None:
            raise ValueError("evt scoring requires a fitted tail model")
        p = np.array([evt_probability(r, tail) for r in errors])
        labels[~(p < tail.tau)] = UNKNOWN
        return labels, 1.0 - p
    if scoring == "recon_threshold":
        if recon_cut is None:
            raise ValueError("recon_threshold scoring requires recon_cut")
        labels[errors > recon_cut] = UNKNOWN
        return labels, -errors
    raise ValueError(f"unknown scoring {scoring!r}")


def evaluate_open_set(
    result: TrainResult,
    tail: TailModel,
    test_known: Dataset,
    test_unknown: Dataset,
    openness_value: float = 0.0,
    f1_average: str = "macro",
) -> EvaluationReport:
    """Run the rejection rule over both test sets and compute F1 and AUROC."""
    if len(test_known) == 0:
        raise ValueError("empty known test set")
    pred_k, score_k = decide_dataset(result, test_known.images, "evt", tail=tail)
    if len(test_unknown) > 0:
        pred_u, score_u = decide_dataset(result, test_unknown.images, "evt", tail=tail)
        auc: float | None = auroc(score_k, score_u)
        auc_err = None
    else:
        pred_u = np.empty(0, dtype=np.int64)
        auc, auc_err = None, "AUROC undefined: empty unknown test set"
    pred = np.concatenate([pred_k, pred_u])
    truth = np.concatenate([test_known.labels, np.full(len(test_unknown), UNKNOWN)])
    return EvaluationReport(
        f1=f_measure(pred, truth, average=f1_average),
        auroc=auc,
        openness=openness_value,
        decision_counts={
            "known": int((pred != UNKNOWN).sum()),
            "unknown": int((pred == UNKNOWN).sum()),
        },
        auroc_error=auc_err,
    )


@dataclass
class SweepPoint:
    openness: float
    n_unknown: int
    f1_mean: float
    f1_std: float
    per_trial_f1: list[float]


@dataclass
class ModelSetup:
    """Architecture strings and tail/threshold knobs shared by sweep trials."""

    encoder: str
    decoder: str
    classifier: str
    input_shape: tuple[int, int, int]
    tail_size: int = 20
    tau: float = 0.5
    train_fraction: float = 0.8


def _evaluate_method(
    method: str,
    result: TrainResult,
    setup: ModelSetup,
    train_images: np.ndarray,
    test_known: Dataset,
    test_unknown: Dataset,
    f1_average: str,
) -> float:
    if method == "dcn_softmax":
        scoring, tail, cut = "softmax", None, None
    elif method == "mlosr":
        errors = result.reconstruction_errors(train_images)
        tail = fit_gpd_tail(errors, tail_size=setup.tail_size, tau=setup.tau)
        scoring, cut = "evt", None
    else:  # dcn_ae, mlosr_no_evt: hard cut at the tail threshold, no GPD
        errors = result.reconstruction_errors(train_images)
        scoring, tail = "recon_threshold", None
        cut = tail_threshold(errors, tail_size=setup.tail_size)
    pred_k, _ = decide_dataset(result, test_known.images, scoring, tail=tail, recon_cut=cut)
    if len(test_unknown):
        pred_u, _ = decide_dataset(
            result, test_unknown.images, scoring, tail=tail, recon_cut=cut
        )
    else:
        pred_u = np.empty(0, dtype=np.int64)
    pred = np.concatenate([pred_k, pred_u])
    truth = np.concatenate([test_known.labels, np.full(len(test_unknown), UNKNOWN)])
    return f_measure(pred, truth, average=f1_average)


def run_openness_sweep(
    dataset: Dataset,
    n_known: int,
    unknown_counts,
    trials: int,
    methods,
    setup: ModelSetup,
    train_cfg: TrainConfig,
    master_seed: int = 0,
    f1_average: str = "macro",
    model_seed_offset: int = 0,
) -> dict[str, list[SweepPoint]]:
    """F1 against openness for each requested method.

    For every unknown-class count and trial, a fresh split is sampled, each
    required training mode runs once (mlosr and mlosr_no_evt share one
    trained model), and F1 is computed at that openness. Deterministic per
    master_seed.
    """
    methods = list(methods)
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}; choose from {METHODS}")
    total_classes = np.unique(dataset.labels).size
    if n_known + max(unknown_counts) > total_classes:
        raise ValueError(
            f"need {n_known} known + {max(unknown_counts)} unknown classes, "
            f"dataset has {total_classes}"
        )
    modes_needed = sorted({_TRAIN_MODE[m] for m in methods})
    curves: dict[str, list[SweepPoint]] = {m: [] for m in methods}
    for p_idx, n_unknown in enumerate(unknown_counts):
        openness_value = (
            openness(n_known, n_known + n_unknown, n_known) if n_unknown else 0.0
        )
        per_method: dict[str, list[float]] = {m: [] for m in methods}
        for trial in range(trials):
            seed = master_seed * 100_000 + p_idx * 1_000 + trial
            split, train_k, test_k, test_u = sample_split(
                dataset, n_known, seed=seed, train_fraction=setup.train_fraction
            )
            if n_unknown < len(split.unknown_classes):
                rng = np.random.default_rng(seed + 7)
                chosen = rng.choice(split.unknown_classes, size=n_unknown, replace=False)
                test_u = test_u.subset(np.isin(test_u.labels, chosen))
            results: dict[str, TrainResult] = {}
            for mode in modes_needed:
                triplet = build_triplet(
                    setup.encoder,
                    setup.decoder,
                    setup.classifier,
                    setup.input_shape,
                    seed=seed + model_seed_offset,
                )
                cfg = TrainConfig(
                    eta=train_cfg.eta,
                    batch_size=train_cfg.batch_size,
                    lambda_c=train_cfg.lambda_c,
                    lambda_r=train_cfg.lambda_r,
                    max_epochs=train_cfg.max_epochs,
                    lr_stop_per_pixel=train_cfg.lr_stop_per_pixel,
                    seed=seed,
                )
                results[mode] = train(triplet, train_k.images, train_k.labels, cfg, mode=mode)
            for method in methods:
                f1 = _evaluate_method(
                    method,
                    results[_TRAIN_MODE[method]],
                    setup,
                    train_k.images,
                    test_k,
                    test_u,
                    f1_average,
                )
                per_method[method].append(f1)
        for method in methods:
            vals = per_method[method]
            curves[method].append(
                SweepPoint(
                    openness=openness_value,
                    n_unknown=int(n_unknown),
                    f1_mean=float(np.mean(vals)),
                    f1_std=float(np.std(vals)),
                    per_trial_f1=[float(v) for v in vals],
                )
            )
    return curves


def write_sweep_csv(curves: dict[str, list[SweepPoint]], path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["method", "n_unknown", "openness", "f1_mean", "f1_std"])
        for method in sorted(curves):
            for pt in curves[method]:
                writer.writerow(
                    [method, pt.n_unknown, repr(pt.openness), repr(pt.f1_mean), repr(pt.f1_std)]
                )
