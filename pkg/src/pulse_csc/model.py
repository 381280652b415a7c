"""Unfolded iterative-thresholding network for convolutional sparse coding.

The encoder is K thresholding folds. Fold k mixes an input bank applied to
the raw signal with a lateral bank applied to the previous code, then applies
a per-channel soft threshold whose positive value is softplus of a raw
parameter. The code starts at zero, so fold 0 has no lateral bank: there are
K input banks, K-1 lateral banks and K threshold vectors. A unit-norm
convolutional dictionary decodes the final code back to the signal.

Two initializers are provided: one that makes the network reproduce plain
ISTA iterations exactly (up to bank truncation), and a random one.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .csc import (
    Dictionary,
    conv_bank,
    estimate_lipschitz,
    reconstruct,
    smooth_soft_threshold,
    soft_threshold,
    softplus,
    softplus_inv,
)
from .errors import ChecksumError, SchemaError

CHECKPOINT_MAGIC = b"CSCD"
CHECKPOINT_VERSION = 1


@dataclass
class UnfoldedModel:
    """Mutable parameter container for the unfolded encoder + decoder."""

    decoder: Dictionary
    w1: list  # K banks of shape (M, 1, enc_len)
    w2: list  # K-1 banks of shape (M, M, enc_len)
    theta_raw: np.ndarray  # (K, M) raw threshold parameters
    n_train: int = 0  # signal length the model was set up for (informational)
    revision: int = 0  # bumped on every in-place parameter update

    def __post_init__(self):
        self.theta_raw = np.asarray(self.theta_raw, dtype=np.float64)
        self.w1 = [np.asarray(w, dtype=np.float64) for w in self.w1]
        self.w2 = [np.asarray(w, dtype=np.float64) for w in self.w2]
        self.validate()

    # -- structure ---------------------------------------------------------

    @property
    def n_kernels(self) -> int:
        return self.decoder.n_kernels

    @property
    def kernel_len(self) -> int:
        return self.decoder.kernel_len

    @property
    def n_folds(self) -> int:
        return len(self.w1)

    @property
    def enc_len(self) -> int:
        return self.w1[0].shape[2]

    def validate(self):
        m = self.n_kernels
        k = self.n_folds
        if k < 1:
            raise ValueError("need at least one fold")
        if len(self.w2) != k - 1:
            raise ValueError(
                f"expected {k - 1} lateral banks for {k} folds, got {len(self.w2)}"
            )
        le = self.enc_len
        for i, w in enumerate(self.w1):
            if w.shape != (m, 1, le):
                raise ValueError(f"input bank {i} has shape {w.shape}, want {(m, 1, le)}")
        for i, w in enumerate(self.w2):
            if w.shape != (m, m, le):
                raise ValueError(f"lateral bank {i} has shape {w.shape}, want {(m, m, le)}")
        if self.theta_raw.shape != (k, m):
            raise ValueError(
                f"theta_raw has shape {self.theta_raw.shape}, want {(k, m)}"
            )
        for name, arrs in (("w1", self.w1), ("w2", self.w2)):
            for i, w in enumerate(arrs):
                if not np.all(np.isfinite(w)):
                    raise ValueError(f"non-finite values in {name}[{i}]")
        if not np.all(np.isfinite(self.theta_raw)):
            raise ValueError("non-finite values in theta_raw")

    def thresholds(self) -> np.ndarray:
        """Effective (strictly positive) thresholds, shape (K, M)."""
        return softplus(self.theta_raw)

    def touch(self):
        """Mark parameters as changed; outstanding traces become stale."""
        self.revision += 1

    def copy(self) -> "UnfoldedModel":
        return UnfoldedModel(
            decoder=Dictionary(self.decoder.kernels.copy()),
            w1=[w.copy() for w in self.w1],
            w2=[w.copy() for w in self.w2],
            theta_raw=self.theta_raw.copy(),
            n_train=self.n_train,
            revision=self.revision,
        )


@dataclass
class ForwardTrace:
    """Everything the backward pass needs to replay one forward computation."""

    y_in: np.ndarray  # (B, N) network input
    pre_acts: list  # K arrays (B, N, M): bank outputs before thresholding
    codes: list  # K arrays (B, N, M): codes after thresholding
    y_hat: np.ndarray  # (B, N) reconstruction
    smooth_beta: float | None
    revision: int
    single: bool  # input arrived as a 1-D signal

    @property
    def code(self) -> np.ndarray:
        x = self.codes[-1]
        return x[0] if self.single else x

    @property
    def reconstruction(self) -> np.ndarray:
        return self.y_hat[0] if self.single else self.y_hat


def forward(
    model: UnfoldedModel, y: np.ndarray, smooth_beta: float | None = None
) -> ForwardTrace:
    """Run the unfolded encoder and decoder on y, (N,) or (B, N).

    smooth_beta selects the differentiable threshold surrogate; None (the
    default) uses the exact soft threshold.
    """
    y = np.asarray(y, dtype=np.float64)
    single = y.ndim == 1
    yb = y[np.newaxis, :] if single else y
    if yb.ndim != 2:
        raise ValueError(f"expected (N,) or (B, N) input, got shape {y.shape}")
    n = yb.shape[1]
    need = max(model.enc_len, model.kernel_len)
    if n < need:
        raise ValueError(f"input length {n} shorter than filter support {need}")
    if not np.all(np.isfinite(yb)):
        raise ValueError("input must be finite")

    theta = model.thresholds()
    yc = yb[..., np.newaxis]  # (B, N, 1)
    pre_acts = []
    codes = []
    x = None
    for k in range(model.n_folds):
        u = conv_bank(yc, model.w1[k])
        if k > 0:
            u = u + conv_bank(x, model.w2[k - 1])
        if smooth_beta is None:
            x = soft_threshold(u, theta[k])
        else:
            x = smooth_soft_threshold(u, theta[k], smooth_beta)
        pre_acts.append(u)
        codes.append(x)
    y_hat = reconstruct(model.decoder, x)
    return ForwardTrace(
        y_in=yb,
        pre_acts=pre_acts,
        codes=codes,
        y_hat=y_hat,
        smooth_beta=smooth_beta,
        revision=model.revision,
        single=single,
    )


def denoise(model: UnfoldedModel, y: np.ndarray) -> np.ndarray:
    """Convenience wrapper: reconstruction only."""
    return forward(model, y).reconstruction


# -- initializers ------------------------------------------------------------


def init_ista(
    d0: Dictionary,
    lam: float,
    n: int,
    k: int,
    truncate: bool = True,
) -> tuple[UnfoldedModel, float]:
    """Build a model whose forward pass performs K ISTA iterations.

    One ISTA step is S(X + corr(D, y - rec(D, X)) / c) with c the operator
    norm. Expressed through banks this needs taps reaching L-1 samples to
    either side of the anchor, so the exact form uses banks of length 2L-1
    (anchor L-1). With truncate=True (production default) both banks are cut
    to a centered length-L window and the discarded tap energy fraction is
    returned; truncate=False keeps the exact 2L-1 form for equivalence tests.

    Returns (model, truncation_energy_fraction).
    """
    if lam <= 0:
        raise ValueError(f"lam must be positive, got {lam}")
    if k < 1:
        raise ValueError(f"need at least one fold, got {k}")
    m, l = d0.kernels.shape
    c = estimate_lipschitz(d0, n)
    le = 2 * l - 1
    anchor = l - 1  # == le // 2, the default anchor for odd-length banks

    w1 = np.zeros((m, 1, le))
    # bank output sum_j w1[o,0,j] y[t + anchor - j] must equal
    # sum_s D[o,s] y[t - l//2 + s] / c: taps are the reversed kernels.
    w1[:, 0, l // 2 : l // 2 + l] = d0.kernels[:, ::-1] / c

    # lateral bank: identity minus scaled kernel cross-correlations
    grams = np.empty((m, m, le))
    for o in range(m):
        for i in range(m):
            grams[o, i] = np.correlate(d0.kernels[o], d0.kernels[i], mode="full")
    w2 = -grams[:, :, ::-1] / c
    w2[np.arange(m), np.arange(m), l - 1] += 1.0

    trunc_energy = 0.0
    if truncate:
        start = (l - 1) - l // 2  # window centered on the anchor
        total = float(np.sum(w1**2) + np.sum(w2**2))
        w1 = np.ascontiguousarray(w1[:, :, start : start + l])
        w2 = np.ascontiguousarray(w2[:, :, start : start + l])
        kept = float(np.sum(w1**2) + np.sum(w2**2))
        trunc_energy = (total - kept) / total if total > 0 else 0.0

    theta0 = float(softplus_inv(lam / c))
    model = UnfoldedModel(
        decoder=Dictionary(d0.kernels.copy()),
        w1=[w1.copy() for _ in range(k)],
        w2=[w2.copy() for _ in range(k - 1)],
        theta_raw=np.full((k, m), theta0),
        n_train=n,
    )
    return model, trunc_energy


def init_random(
    m: int,
    l: int,
    k: int,
    seed: int,
    n: int = 0,
    theta0: float = 0.05,
) -> UnfoldedModel:
    """Random initialization: white-noise unit-norm kernels, fan-in scaled banks.

    Draw order is fixed (decoder, input banks in fold order, lateral banks in
    fold order) so a seed pins every parameter.
    """
    rng = np.random.default_rng(seed)
    decoder = Dictionary.random(m, l, rng)
    w1 = [rng.standard_normal((m, 1, l)) / np.sqrt(l) for _ in range(k)]
    w2 = [rng.standard_normal((m, m, l)) / np.sqrt(m * l) for _ in range(k - 1)]
    theta_raw = np.full((k, m), float(softplus_inv(theta0)))
    return UnfoldedModel(
        decoder=decoder, w1=w1, w2=w2, theta_raw=theta_raw, n_train=n
    )


# -- checkpoint format -------------------------------------------------------
#
# magic "CSCD" | u32 version | u32 M | u32 L | u32 K | u32 n_train
# | float64-LE arrays: decoder (M,L), K input banks (M,1,L),
#   K-1 lateral banks (M,M,L), thresholds (K,M)
# | u32 CRC32 over everything after magic+version.


def _param_arrays(model: UnfoldedModel) -> list:
    return (
        [model.decoder.kernels]
        + list(model.w1)
        + list(model.w2)
        + [model.theta_raw]
    )


def save_checkpoint(model: UnfoldedModel, path) -> None:
    """Write the model to the binary checkpoint format."""
    if model.enc_len != model.kernel_len:
        raise ValueError(
            "only models with banks of kernel length are checkpointable; "
            f"got enc_len={model.enc_len}, kernel_len={model.kernel_len}"
        )
    header = struct.pack(
        "<IIII", model.n_kernels, model.kernel_len, model.n_folds, model.n_train
    )
    blobs = [header]
    for arr in _param_arrays(model):
        blobs.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    payload = b"".join(blobs)
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(payload)
        f.write(struct.pack("<I", crc))


def load_checkpoint(path) -> UnfoldedModel:
    """Read a checkpoint, verifying magic, version, sizes and checksum."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 8 + 16 + 4:
        raise SchemaError(f"checkpoint too short ({len(blob)} bytes)")
    if blob[:4] != CHECKPOINT_MAGIC:
        raise SchemaError(f"bad magic {blob[:4]!r}")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != CHECKPOINT_VERSION:
        raise SchemaError(f"unsupported checkpoint version {version}")
    payload, stored = blob[8:-4], blob[-4:]
    (crc_stored,) = struct.unpack("<I", stored)
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    if crc != crc_stored:
        raise ChecksumError(
            f"checksum mismatch: stored {crc_stored:#010x}, computed {crc:#010x}"
        )
    m, l, k, n_train = struct.unpack("<IIII", payload[:16])
    if m < 1 or l < 1 or k < 1:
        raise SchemaError(f"invalid header M={m} L={l} K={k}")
    counts = [(m, l)] + [(m, 1 * l)] * k + [(m, m * l)] * (k - 1) + [(k, m)]
    n_floats = sum(a * b for a, b in counts)
    expect = 16 + 8 * n_floats
    if len(payload) != expect:
        raise SchemaError(
            f"payload is {len(payload)} bytes, expected {expect} for M={m} L={l} K={k}"
        )
    flat = np.frombuffer(payload[16:], dtype="<f8").astype(np.float64)
    pos = 0

    def take(shape):
        nonlocal pos
        size = int(np.prod(shape))
        arr = flat[pos : pos + size].reshape(shape).copy()
        pos += size
        return arr

    decoder = Dictionary(take((m, l)))
    w1 = [take((m, 1, l)) for _ in range(k)]
    w2 = [take((m, m, l)) for _ in range(k - 1)]
    theta_raw = take((k, m))
    return UnfoldedModel(
        decoder=decoder, w1=w1, w2=w2, theta_raw=theta_raw, n_train=n_train
    )
