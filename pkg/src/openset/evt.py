"""Generalized Pareto tail model over reconstruction errors.

The largest training-set reconstruction errors are treated as excesses over
a threshold and fitted with a GPD by maximum likelihood (Grimshaw's
one-dimensional reduction). The fitted CDF turns a test-time reconstruction
error into a rejection probability: errors deep in or beyond the known-class
tail are flagged as unknown.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class TailModel:
    """Fitted GPD tail: shape zeta, scale sigma, tail threshold and knobs."""

    zeta: float
    sigma: float
    threshold: float
    tail_size: int
    tau: float = 0.5

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if self.tail_size < 2:
            raise ValueError(f"tail_size must be >= 2, got {self.tail_size}")


@dataclass(frozen=True)
class Decision:
    """Outcome of the known/unknown test for one sample."""

    is_known: bool
    label: int | None  # argmax class when known, None when unknown
    score: float  # tail probability of the reconstruction error
    recon_error: float


def reconstruction_error(x, x_recon) -> float:
    """Sum of absolute elementwise differences between input and output."""
    a = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    b = x_recon.data if isinstance(x_recon, Tensor) else np.asarray(x_recon, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"reconstruction_error: {a.shape} vs {b.shape}")
    return float(np.abs(a - b).sum())


def gpd_log_likelihood(excesses: np.ndarray, zeta: float, sigma: float) -> float:
    """Log-likelihood of positive excesses under GPD(zeta, sigma)."""
    y = np.asarray(excesses, dtype=np.float64)
    n = y.size
    if sigma <= 0:
        return -np.inf
    if zeta == 0.0:
        return -n * np.log(sigma) - y.sum() / sigma
    t = zeta * y / sigma
    if np.any(t <= -1.0):
        return -np.inf
    # log1p keeps the zeta -> 0 limit accurate (log(1 + t) cancels badly)
    return -n * np.log(sigma) - (1.0 + 1.0 / zeta) * np.log1p(t).sum()


def _profile_params(excesses: np.ndarray, theta: float) -> tuple[float, float]:
    """Grimshaw reparametrization: theta = zeta / sigma."""
    zeta = float(np.mean(np.log1p(theta * excesses)))
    return zeta, zeta / theta


def _profile_equation(excesses: np.ndarray, theta: float) -> float:
    t = theta * excesses
    u = 1.0 + np.mean(np.log1p(t))
    v = np.mean(1.0 / (1.0 + t))
    return u * v - 1.0


def _bracketed_roots(fn, lo: float, hi: float, n_grid: int = 600, n_bisect: int = 80):
    """Find sign-change roots of fn on (lo, hi) via dense grid + bisection.

    Positive intervals spanning several orders of magnitude get a geometric
    grid, so roots near zero are not skipped when hi is large.
    """
    if not (hi > lo):
        return []
    if lo > 0 and hi / lo > 1e3:
        xs = np.geomspace(lo, hi, n_grid)
    else:
        xs = np.linspace(lo, hi, n_grid)
    vals = np.array([fn(x) for x in xs])
    roots = []
    for i in range(n_grid - 1):
        a, b, fa, fb = xs[i], xs[i + 1], vals[i], vals[i + 1]
        if fa == 0.0:
            roots.append(a)
            continue
        if fa * fb < 0:
            for _ in range(n_bisect):
                m = 0.5 * (a + b)
                fm = fn(m)
                if fa * fm <= 0:
                    b = m
                else:
                    a, fa = m, fm
            roots.append(0.5 * (a + b))
    return roots


def tail_threshold(errors, tail_size: int = 20) -> float:
    """Cut point leaving the tail_size largest errors as strict excesses.

    Midpoint between the tail_size-th and (tail_size+1)-th largest error.
    Also usable on its own as a hard rejection cut when no tail
    distribution is fitted.
    """
    errs = np.sort(np.asarray(errors, dtype=np.float64))
    if errs.size < tail_size + 1:
        raise ValueError(f"need at least tail_size + 1 = {tail_size + 1} errors, got {errs.size}")
    if np.any(errs < 0):
        raise ValueError("reconstruction errors must be nonnegative")
    top = errs[-tail_size:]
    w = 0.5 * (errs[-tail_size - 1] + errs[-tail_size])
    if top.min() - w <= 0:
        # threshold collides with the smallest tail value; nudge it down
        w = np.nextafter(top.min(), -np.inf)
    return float(w)


def fit_gpd_tail(
    errors,
    tail_size: int = 20,
    tau: float = 0.5,
) -> TailModel:
    """Fit a GPD to the tail_size largest errors via Grimshaw's reduction.

    The tail threshold is the midpoint between the tail_size-th and
    (tail_size+1)-th largest error, so every excess is strictly positive.
    Candidate (zeta, sigma) pairs come from roots of the profile-likelihood
    equation on both sides of zero plus the exponential (zeta = 0) solution;
    the best log-likelihood wins. A degenerate tail (all excesses equal)
    falls back to the exponential fit.
    """
    w = tail_threshold(errors, tail_size)
    errs = np.sort(np.asarray(errors, dtype=np.float64))
    y = errs[-tail_size:] - w
    zeta, sigma = _fit_excesses(y)
    return TailModel(zeta=zeta, sigma=sigma, threshold=float(w), tail_size=tail_size, tau=tau)


def _fit_excesses(y: np.ndarray) -> tuple[float, float]:
    ymin, ymax, ymean = y.min(), y.max(), y.mean()
    best = (0.0, float(ymean))  # exponential solution, always valid
    if np.ptp(y) == 0.0 or ymean == 0.0:
        return best
    best_ll = gpd_log_likelihood(y, *best)
    eps = 1e-8 / max(ymean, 1e-12)
    lo = -1.0 / ymax + eps
    # moment-based guess bounds the positive-theta search (Grimshaw)
    hi = max(2.0 * (ymean - ymin) / (ymin * ymin), 2.0 * (ymean - ymin) / (ymean * ymin), eps)
    fn = lambda t: _profile_equation(y, t)
    for theta in _bracketed_roots(fn, lo, -eps) + _bracketed_roots(fn, eps, hi):
        zeta, sigma = _profile_params(y, theta)
        if sigma <= 0:
            continue
        ll = gpd_log_likelihood(y, zeta, sigma)
        if ll > best_ll:
            best, best_ll = (float(zeta), float(sigma)), ll
    return best


def gpd_cdf(v: float, model: TailModel) -> float:
    """GPD CDF at excess v >= 0; monotone, 0 at the origin."""
    if v < 0:
        raise ValueError(f"excess must be nonnegative, got {v}")
    z, s = model.zeta, model.sigma
    if z == 0.0:
        return float(1.0 - np.exp(-v / s))
    t = z * v / s
    if t <= -1.0:
        return 1.0  # beyond the finite support endpoint (zeta < 0)
    return float(1.0 - np.exp(-np.log1p(t) / z))


def evt_probability(r: float, model: TailModel) -> float:
    """Probability that a known-class extreme error falls below r."""
    if r < 0:
        raise ValueError(f"reconstruction error must be nonnegative, got {r}")
    if r <= model.threshold:
        return 0.0
    return gpd_cdf(r - model.threshold, model)


def decide(triplet, model: TailModel, x) -> Decision:
    """Known/unknown call for a single preprocessed image.

    Runs encoder, classifier and decoder, scores the reconstruction error
    with the tail model, and accepts as known only when the tail probability
    is strictly below tau.
    """
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if data.ndim == 3:
        data = data[None]
    xt = Tensor(data)
    z = triplet.forward_encoder(xt)
    probs = triplet.forward_classifier(z).data
    x_recon = triplet.forward_decoder(z)
    r = reconstruction_error(xt, x_recon)
    score = evt_probability(r, model)
    if score < model.tau:
        return Decision(is_known=True, label=int(np.argmax(probs[0])), score=score, recon_error=r)
    return Decision(is_known=False, label=None, score=score, recon_error=r)


def save_tail_model(path, model: TailModel):
    """Serialize as decimal text fields next to the model checkpoint."""
    with open(path, "w") as f:
        f.write(f"zeta = {model.zeta!r}\n")
        f.write(f"sigma = {model.sigma!r}\n")
        f.write(f"threshold = {model.threshold!r}\n")
        f.write(f"tail_size = {model.tail_size}\n")
        f.write(f"tau = {model.tau!r}\n")


def load_tail_model(path) -> TailModel:
    fields = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            fields[key.strip()] = value.strip()
    return TailModel(
        zeta=float(fields["zeta"]),
        sigma=float(fields["sigma"]),
        threshold=float(fields["threshold"]),
        tail_size=int(fields["tail_size"]),
        tau=float(fields["tau"]),
    )


def with_tau(model: TailModel, tau: float) -> TailModel:
    return replace(model, tau=tau)
