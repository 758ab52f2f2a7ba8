"""Joint classification + reconstruction training with Adam.

Three training modes cover the ablation baselines: the full shared-encoder
multi-task model, a classifier-only model, and a classifier plus a separately
trained autoencoder with its own (non-shared) encoder.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .models import ModelTriplet, Network
from .tensor import ContractError, Tensor, cross_entropy, l1_loss

MODES = ("mlosr", "dcn_softmax", "dcn_ae")


@dataclass
class TrainConfig:
    eta: float = 0.0003
    batch_size: int = 64
    lambda_c: float = 0.5
    lambda_r: float = 0.5
    max_epochs: int = 50
    # stop when epoch-mean reconstruction loss per pixel drops below this
    lr_stop_per_pixel: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError(f"eta must be positive, got {self.eta}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lambda_c < 0 or self.lambda_r < 0 or self.lambda_c + self.lambda_r == 0:
            raise ValueError("lambda_c and lambda_r must be nonnegative and not both zero")


@dataclass
class AdamState:
    """Per-parameter first/second moments with a shared step counter."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def step(self, params: list[Tensor], eta: float):
        """One bias-corrected Adam update over params using their .grad."""
        if any(p.grad is None for p in params):
            raise ContractError("adam_step before backward: a parameter has no gradient")
        if not self.m:
            self.m = [np.zeros_like(p.data) for p in params]
            self.v = [np.zeros_like(p.data) for p in params]
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for i, p in enumerate(params):
            g = p.grad
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            p.data = p.data - eta * (self.m[i] / bc1) / (np.sqrt(self.v[i] / bc2) + self.eps)


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"labels must lie in 0..{num_classes - 1}")
    return np.eye(num_classes)[labels]


def compute_losses(triplet: ModelTriplet, x: Tensor, y: np.ndarray) -> tuple[Tensor, Tensor]:
    """Batch-mean cross-entropy and per-sample L1 reconstruction loss."""
    z = triplet.forward_encoder(x)
    probs = triplet.forward_classifier(z)
    recon = triplet.forward_decoder(z)
    l_c = cross_entropy(Tensor(one_hot(y, triplet.num_classes)), probs)
    l_r = l1_loss(x, recon)
    return l_c, l_r


def total_loss(l_c: Tensor, l_r: Tensor, cfg: TrainConfig) -> Tensor:
    return cfg.lambda_c * l_c + cfg.lambda_r * l_r


@dataclass
class EpochStats:
    epoch: int
    l_c: float
    l_r: float
    l_t: float


@dataclass
class TrainResult:
    """Trained networks plus per-epoch loss history.

    recon_encoder is the encoder feeding the decoder: the shared encoder for
    mlosr, a separately trained twin for dcn_ae, None for dcn_softmax.
    """

    triplet: ModelTriplet
    mode: str
    history: list[EpochStats]
    recon_encoder: Network | None = None

    def classify_probs(self, images: np.ndarray) -> np.ndarray:
        z = self.triplet.forward_encoder(Tensor(images))
        return self.triplet.forward_classifier(z).data

    def reconstruction_errors(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Per-sample L1 reconstruction errors; requires a decoder."""
        if self.recon_encoder is None or self.triplet.decoder is None:
            raise ContractError(f"mode {self.mode} has no reconstruction pipeline")
        out = np.empty(images.shape[0])
        for lo in range(0, images.shape[0], batch_size):
            batch = Tensor(images[lo : lo + batch_size])
            z = self.recon_encoder.forward(batch)
            recon = self.triplet.decoder.forward(z)
            diff = np.abs(batch.data - recon.data.reshape(batch.data.shape))
            out[lo : lo + batch_size] = diff.reshape(diff.shape[0], -1).sum(axis=1)
        return out


def train(
    triplet: ModelTriplet,
    images: np.ndarray,
    labels: np.ndarray,
    cfg: TrainConfig,
    mode: str = "mlosr",
) -> TrainResult:
    """Run the multi-task training loop (or an ablation variant).

    images must be preprocessed to the model input shape and [-1, 1] range;
    labels must already be relabeled to 0..K-1. Batches are reshuffled every
    epoch from cfg.seed; the last partial batch is kept. Training stops at
    cfg.max_epochs or when the epoch-mean reconstruction loss falls below
    cfg.lr_stop_per_pixel * (pixels per image).
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    n = images.shape[0]
    if n == 0:
        raise ValueError("empty training set")
    if tuple(images.shape[1:]) != triplet.input_shape:
        raise ValueError(f"images {images.shape[1:]} != model input {triplet.input_shape}")
    one_hot(labels, triplet.num_classes)  # validate label range up front

    recon_encoder = None
    if mode == "mlosr":
        recon_encoder = triplet.encoder
    elif mode == "dcn_ae":
        recon_encoder = Network(triplet.encoder.spec, seed=cfg.seed + 1)

    clf_params = triplet.encoder.parameters() + triplet.classifier.parameters()
    clf_adam = AdamState()
    if mode == "mlosr":
        joint_params = clf_params + triplet.decoder.parameters()
        joint_adam = AdamState()
    elif mode == "dcn_ae":
        ae_params = recon_encoder.parameters() + triplet.decoder.parameters()
        ae_adam = AdamState()

    rng = np.random.default_rng(cfg.seed)
    n_pixels = int(np.prod(triplet.input_shape))
    lr_stop = cfg.lr_stop_per_pixel * n_pixels
    history: list[EpochStats] = []

    for epoch in range(cfg.max_epochs):
        order = rng.permutation(n)
        sum_c = sum_r = 0.0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            x = Tensor(images[idx])
            y = labels[idx]
            if mode == "mlosr":
                l_c, l_r = compute_losses(triplet, x, y)
                l_t = total_loss(l_c, l_r, cfg)
                for p in joint_params:
                    p.zero_grad()
                l_t.backward()
                joint_adam.step(joint_params, cfg.eta)
                sum_c += l_c.item() * idx.size
                sum_r += l_r.item() * idx.size
            else:
                z = triplet.forward_encoder(x)
                l_c = cross_entropy(
                    Tensor(one_hot(y, triplet.num_classes)), triplet.forward_classifier(z)
                )
                for p in clf_params:
                    p.zero_grad()
                l_c.backward()
                clf_adam.step(clf_params, cfg.eta)
                sum_c += l_c.item() * idx.size
                if mode == "dcn_ae":
                    z2 = recon_encoder.forward(x)
                    l_r = l1_loss(x, triplet.forward_decoder(z2))
                    for p in ae_params:
                        p.zero_grad()
                    l_r.backward()
                    ae_adam.step(ae_params, cfg.eta)
                    sum_r += l_r.item() * idx.size
        mean_c, mean_r = sum_c / n, sum_r / n
        if mode == "dcn_softmax":
            mean_r, mean_t = float("nan"), mean_c
        elif mode == "dcn_ae":
            mean_t = mean_c + mean_r
        else:
            mean_t = cfg.lambda_c * mean_c + cfg.lambda_r * mean_r
        history.append(EpochStats(epoch=epoch, l_c=mean_c, l_r=mean_r, l_t=mean_t))
        if mode != "dcn_softmax" and mean_r < lr_stop:
            break

    return TrainResult(triplet=triplet, mode=mode, history=history, recon_encoder=recon_encoder)


def write_history_csv(history: list[EpochStats], path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "l_c", "l_r", "l_t"])
        for row in history:
            writer.writerow([row.epoch, repr(row.l_c), repr(row.l_r), repr(row.l_t)])
