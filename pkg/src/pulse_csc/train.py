"""Supervised training of the unfolded encoder-decoder.

The objective per segment is 0.5 * ||y_clean - decode(encode(y_noisy))||^2
plus lam * l1 of the final code, averaged over the batch. Gradients are
computed by a hand-written reverse-mode pass over the recorded forward trace;
no autodiff framework is involved. Adam updates all parameters, an l2 decay
term applies to the encoder banks only, and decoder kernels are projected
back to unit norm after every step (otherwise the l1 term would be defeated
by shrinking codes and growing kernels).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .csc import (
    adjoint_bank,
    code_density,
    conv_bank_weight_grad,
    correlate_dictionary,
    dictionary_weight_grad,
    smooth_soft_threshold_grads,
    soft_threshold_grads,
)
from .errors import ConfigError, DivergedTrainingError, StaleTraceError
from .model import ForwardTrace, UnfoldedModel, forward

# Large batches are processed in fixed-size slices to bound peak memory; the
# slice size is a constant (not a config knob) so reduction order, and hence
# bitwise results, never depend on available memory.
_CHUNK = 64


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.05
    l2_w: float = 1e-3  # decay on encoder banks only
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 256
    patience: int = 10
    max_epochs: int = 100
    seed: int = 0
    smooth_beta: float | None = None  # None: exact threshold during training

    def __post_init__(self):
        if self.lam <= 0:
            raise ConfigError(f"lam must be positive, got {self.lam}")
        if self.l2_w < 0:
            raise ConfigError(f"l2_w must be >= 0, got {self.l2_w}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1/beta2 must lie in [0, 1)")
        if self.eps <= 0:
            raise ConfigError(f"eps must be positive, got {self.eps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.smooth_beta is not None and self.smooth_beta <= 0:
            raise ConfigError(f"smooth_beta must be positive, got {self.smooth_beta}")


@dataclass
class Gradients:
    """Gradient arrays mirroring UnfoldedModel's parameter structure."""

    decoder: np.ndarray
    w1: list
    w2: list
    theta_raw: np.ndarray

    @classmethod
    def zeros_like(cls, model: UnfoldedModel) -> "Gradients":
        return cls(
            decoder=np.zeros_like(model.decoder.kernels),
            w1=[np.zeros_like(w) for w in model.w1],
            w2=[np.zeros_like(w) for w in model.w2],
            theta_raw=np.zeros_like(model.theta_raw),
        )

    def iadd(self, other: "Gradients"):
        self.decoder += other.decoder
        for a, b in zip(self.w1, other.w1):
            a += b
        for a, b in zip(self.w2, other.w2):
            a += b
        self.theta_raw += other.theta_raw

    def arrays(self) -> list:
        return [self.decoder] + list(self.w1) + list(self.w2) + [self.theta_raw]

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


def loss(
    model: UnfoldedModel,
    y_noisy: np.ndarray,
    y_clean: np.ndarray,
    lam: float,
    smooth_beta: float | None = None,
    batch_norm: int | None = None,
) -> tuple[float, ForwardTrace]:
    """Data loss (squared error halved plus lam * l1 of the code), batch mean.

    batch_norm overrides the divisor, which lets callers accumulate an exact
    large-batch mean over smaller slices.
    """
    y_noisy = np.asarray(y_noisy, dtype=np.float64)
    y_clean = np.asarray(y_clean, dtype=np.float64)
    if y_noisy.shape != y_clean.shape:
        raise ValueError(
            f"noisy/clean shape mismatch: {y_noisy.shape} vs {y_clean.shape}"
        )
    if lam < 0:
        raise ValueError(f"lam must be >= 0, got {lam}")
    trace = forward(model, y_noisy, smooth_beta=smooth_beta)
    b = 1 if y_noisy.ndim == 1 else y_noisy.shape[0]
    norm = b if batch_norm is None else int(batch_norm)
    resid = trace.y_hat - (y_clean[np.newaxis, :] if y_noisy.ndim == 1 else y_clean)
    value = (0.5 * float(np.sum(resid**2)) + lam * float(np.sum(np.abs(trace.codes[-1])))) / norm
    if not np.isfinite(value):
        raise DivergedTrainingError(f"non-finite loss {value}")
    return value, trace


def backward(
    model: UnfoldedModel,
    trace: ForwardTrace,
    y_clean: np.ndarray,
    lam: float,
    batch_norm: int | None = None,
) -> Gradients:
    """Reverse-mode gradients of the loss for the traced forward pass.

    Refuses to run if the model has been updated since the trace was recorded.
    Threshold derivative convention follows the trace's threshold mode: the
    exact threshold uses subgradient 0 at its kinks, sign(0) = 0 in the l1
    term.
    """
    if trace.revision != model.revision:
        raise StaleTraceError(
            f"trace recorded at revision {trace.revision}, model is at {model.revision}"
        )
    y_clean = np.asarray(y_clean, dtype=np.float64)
    if y_clean.ndim == 1:
        y_clean = y_clean[np.newaxis, :]
    if y_clean.shape != trace.y_hat.shape:
        raise ValueError(
            f"clean target shape {y_clean.shape} does not match trace {trace.y_hat.shape}"
        )
    b = trace.y_hat.shape[0]
    norm = b if batch_norm is None else int(batch_norm)
    theta = model.thresholds()
    le = model.enc_len
    x_last = trace.codes[-1]

    r = (trace.y_hat - y_clean) / norm  # (B, N)
    g_decoder = dictionary_weight_grad(r, x_last, model.kernel_len)
    g_x = correlate_dictionary(model.decoder, r) + (lam / norm) * np.sign(x_last)

    g_w1 = [None] * model.n_folds
    g_w2 = [None] * (model.n_folds - 1)
    g_theta_eff = np.zeros_like(model.theta_raw)
    y_in = trace.y_in[..., np.newaxis]  # (B, N, 1)

    for k in range(model.n_folds - 1, -1, -1):
        u = trace.pre_acts[k]
        if trace.smooth_beta is None:
            du, dtheta = soft_threshold_grads(u, theta[k])
        else:
            du, dtheta = smooth_soft_threshold_grads(u, theta[k], trace.smooth_beta)
        g_theta_eff[k] = np.sum(g_x * dtheta, axis=tuple(range(g_x.ndim - 1)))
        g_u = g_x * du
        g_w1[k] = conv_bank_weight_grad(g_u, y_in, le)
        if k > 0:
            g_w2[k - 1] = conv_bank_weight_grad(g_u, trace.codes[k - 1], le)
            g_x = adjoint_bank(g_u, model.w2[k - 1])

    # chain through softplus: d theta_eff / d theta_raw = sigmoid(theta_raw)
    g_theta_raw = g_theta_eff * expit(model.theta_raw)
    return Gradients(decoder=g_decoder, w1=g_w1, w2=g_w2, theta_raw=g_theta_raw)


# -- optimizer ---------------------------------------------------------------


@dataclass
class AdamState:
    t: int
    m: Gradients
    v: Gradients

    @classmethod
    def init(cls, model: UnfoldedModel) -> "AdamState":
        return cls(t=0, m=Gradients.zeros_like(model), v=Gradients.zeros_like(model))


def adam_step(
    model: UnfoldedModel,
    grads: Gradients,
    cfg: TrainConfig,
    state: AdamState,
) -> None:
    """One Adam update in place, then project decoder kernels to unit norm.

    l2 decay is added to the encoder bank gradients only. Bumps the model
    revision, invalidating existing traces.
    """
    if not grads.all_finite():
        raise DivergedTrainingError("non-finite gradient encountered")
    params = [model.decoder.kernels] + list(model.w1) + list(model.w2) + [model.theta_raw]
    gs = grads.arrays()
    ms = state.m.arrays()
    vs = state.v.arrays()
    n_banks = model.n_folds + (model.n_folds - 1)
    decays = [0.0] + [cfg.l2_w] * n_banks + [0.0]

    state.t += 1
    t = state.t
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for p, g, m, v, decay in zip(params, gs, ms, vs, decays):
        if decay:
            g = g + decay * p
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g**2
        p -= cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)

    kernels = model.decoder.kernels
    norms = np.linalg.norm(kernels, axis=1, keepdims=True)
    if np.any(norms == 0.0) or not np.all(np.isfinite(norms)):
        raise DivergedTrainingError(f"decoder kernel norms degenerate: {norms.ravel()}")
    # skip rows already at norm 1 so a zero-gradient step is a true no-op
    off = np.abs(norms - 1.0) > 1e-12
    if np.any(off):
        kernels /= np.where(off, norms, 1.0)
    for p in params:
        if not np.all(np.isfinite(p)):
            raise DivergedTrainingError("non-finite parameter after update")
    model.touch()


# -- training loop -----------------------------------------------------------


@dataclass
class TrainResult:
    model: UnfoldedModel
    history: list  # dicts: epoch, train_loss, val_loss, sparsity, wall_ms
    best_epoch: int
    best_val_loss: float


def _bank_penalty(model: UnfoldedModel, l2_w: float) -> float:
    if l2_w == 0.0:
        return 0.0
    total = sum(float(np.sum(w**2)) for w in model.w1)
    total += sum(float(np.sum(w**2)) for w in model.w2)
    return 0.5 * l2_w * total


def _chunked_pass(
    model: UnfoldedModel,
    noisy: np.ndarray,
    clean: np.ndarray,
    cfg: TrainConfig,
    with_grads: bool,
):
    """Mean loss over all rows; optionally summed-and-normalized gradients.

    Slicing into fixed chunks bounds memory without changing the result: every
    chunk is normalized by the full row count, then accumulated in order.
    """
    b = noisy.shape[0]
    total_loss = 0.0
    grads = Gradients.zeros_like(model) if with_grads else None
    density_num = 0.0
    for lo in range(0, b, _CHUNK):
        sl = slice(lo, min(lo + _CHUNK, b))
        value, trace = loss(
            model, noisy[sl], clean[sl], cfg.lam,
            smooth_beta=cfg.smooth_beta, batch_norm=b,
        )
        total_loss += value
        density_num += code_density(trace.codes[-1]) * (sl.stop - sl.start)
        if with_grads:
            grads.iadd(backward(model, trace, clean[sl], cfg.lam, batch_norm=b))
    return total_loss, grads, density_num / b


def train(
    model: UnfoldedModel,
    train_set: tuple[np.ndarray, np.ndarray],
    val_set: tuple[np.ndarray, np.ndarray],
    cfg: TrainConfig,
) -> TrainResult:
    """Mini-batch Adam with early stopping on validation loss.

    train_set/val_set are (noisy, clean) pairs of (S, N) arrays. Per epoch the
    rows are reshuffled (seeded), batches of batch_size are visited in order,
    and validation data loss is measured with the same threshold mode as
    training. The best model (strictly lowest validation loss) is snapshotted;
    training stops after `patience` consecutive epochs without improvement.
    History rows report the epoch's mean train data loss plus the bank l2
    penalty at epoch end, the validation data loss, the validation code
    density, and wall time (excluded from any reproducibility comparison).
    """
    tr_noisy, tr_clean = (np.asarray(a, dtype=np.float64) for a in train_set)
    va_noisy, va_clean = (np.asarray(a, dtype=np.float64) for a in val_set)
    for name, (xn, xc) in (("train", (tr_noisy, tr_clean)), ("val", (va_noisy, va_clean))):
        if xn.ndim != 2 or xn.shape != xc.shape:
            raise ConfigError(
                f"{name} set must be matching (S, N) arrays, got {xn.shape} vs {xc.shape}"
            )
        if xn.shape[0] == 0:
            raise ConfigError(f"{name} set is empty")

    rng = np.random.default_rng(cfg.seed)
    state = AdamState.init(model)
    best = model.copy()
    best_val = np.inf
    best_epoch = 0
    bad_epochs = 0
    history = []
    s = tr_noisy.shape[0]

    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        perm = rng.permutation(s)
        epoch_loss = 0.0
        for lo in range(0, s, cfg.batch_size):
            idx = perm[lo : lo + cfg.batch_size]
            batch_loss, grads, _ = _chunked_pass(
                model, tr_noisy[idx], tr_clean[idx], cfg, with_grads=True
            )
            adam_step(model, grads, cfg, state)
            epoch_loss += batch_loss * len(idx)
        train_loss = epoch_loss / s + _bank_penalty(model, cfg.l2_w)

        val_loss, _, val_density = _chunked_pass(
            model, va_noisy, va_clean, cfg, with_grads=False
        )
        wall_ms = (time.perf_counter() - t0) * 1e3
        history.append(
            {
                "epoch": epoch,
                "train_loss": train_loss,
                "val_loss": val_loss,
                "sparsity": val_density,
                "wall_ms": wall_ms,
            }
        )
        if val_loss < best_val:
            best_val = val_loss
            best = model.copy()
            best_epoch = epoch
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                break

    return TrainResult(
        model=best, history=history, best_epoch=best_epoch, best_val_loss=best_val
    )


def history_to_csv(history: list, path) -> None:
    """Write history rows as CSV with a fixed column order."""
    cols = ["epoch", "train_loss", "val_loss", "sparsity", "wall_ms"]
    with open(path, "w") as f:
        f.write(",".join(cols) + "\n")
        for row in history:
            f.write(
                f"{row['epoch']},{row['train_loss']!r},{row['val_loss']!r},"
                f"{row['sparsity']!r},{row['wall_ms']!r}\n"
            )


# -- subject-level split -----------------------------------------------------


def split_by_subject(
    records,
    fractions: tuple[float, float, float] = (0.70, 0.15, 0.15),
    seed: int = 0,
):
    """Partition records into train/val/test with no subject crossing splits.

    Subjects (ordered by first appearance) are shuffled with the given seed,
    counts are apportioned by largest remainder so they sum exactly to the
    subject count, and each subject's records travel together.
    """
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ConfigError(f"need three non-negative fractions, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"fractions must sum to 1, got {fractions}")
    subjects = []
    seen = set()
    for rec in records:
        sid = rec.subject_id
        if sid not in seen:
            seen.add(sid)
            subjects.append(sid)
    if len(subjects) < 3:
        raise ConfigError(f"need at least 3 subjects to split, got {len(subjects)}")

    rng = np.random.default_rng(seed)
    order = [subjects[i] for i in rng.permutation(len(subjects))]
    n = len(order)
    exact = [f * n for f in fractions]
    counts = [int(np.floor(e)) for e in exact]
    remainders = [e - c for e, c in zip(exact, counts)]
    leftover = n - sum(counts)
    # hand leftovers to the largest remainders; ties go to the earlier split
    for i in sorted(range(3), key=lambda i: (-remainders[i], i))[:leftover]:
        counts[i] += 1

    train_ids = set(order[: counts[0]])
    val_ids = set(order[counts[0] : counts[0] + counts[1]])
    splits = ([], [], [])
    for rec in records:
        if rec.subject_id in train_ids:
            splits[0].append(rec)
        elif rec.subject_id in val_ids:
            splits[1].append(rec)
        else:
            splits[2].append(rec)
    return splits
