"""Convolutional sparse coding primitives.

A dictionary of M unit-norm kernels of length L synthesizes a signal as the
sum of per-channel convolutions with a sparse activation map of shape (N, M).
This module owns the convolution bank, its exact adjoint, the weight-side
gradient, soft thresholding (exact and smooth), the operator-norm estimate,
and plain ISTA. Everything is written against zero-padded "same" convolutions
with an explicit anchor so that adjoint pairs are exact, not off-by-one.

Shape conventions: multichannel sequences are (..., N, C) with any number of
leading batch axes; banks are (C_out, C_in, L) with taps indexed so that
output[n] = sum_j w[..., j] * input[n + anchor - j].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import ConvergenceError

UNIT_NORM_TOL = 1e-9


@dataclass(frozen=True)
class Dictionary:
    """M unit-norm kernels of length L, rows of a (M, L) array."""

    kernels: np.ndarray

    def __post_init__(self):
        kernels = np.asarray(self.kernels, dtype=np.float64)
        if kernels.ndim != 2:
            raise ValueError(f"kernels must be (M, L), got shape {kernels.shape}")
        m, l = kernels.shape
        if m < 1 or l < 1:
            raise ValueError(f"need at least one kernel tap, got shape {kernels.shape}")
        if not np.all(np.isfinite(kernels)):
            raise ValueError("kernels must be finite")
        norms = np.linalg.norm(kernels, axis=1)
        if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
            raise ValueError(
                f"kernels must have unit l2 norm, got norms {norms}"
            )
        object.__setattr__(self, "kernels", kernels)

    @property
    def n_kernels(self) -> int:
        return self.kernels.shape[0]

    @property
    def kernel_len(self) -> int:
        return self.kernels.shape[1]

    @classmethod
    def random(cls, m: int, l: int, rng: np.random.Generator) -> "Dictionary":
        k = rng.standard_normal((m, l))
        k /= np.linalg.norm(k, axis=1, keepdims=True)
        return cls(k)


def _windows(x: np.ndarray, l: int, anchor: int) -> np.ndarray:
    """Length-l sliding windows of x along its time axis, zero padded.

    x is (..., N, C); output is (..., N, C, l) with out[..., n, i, j] equal to
    the padded sequence at time n + j - (l - 1 - anchor).
    """
    pad = [(0, 0)] * x.ndim
    pad[-2] = (l - 1 - anchor, anchor)
    xp = np.pad(x, pad)
    return sliding_window_view(xp, l, axis=-2)


def conv_bank(x: np.ndarray, w: np.ndarray, anchor: int | None = None) -> np.ndarray:
    """Apply a bank of filters: out[..., n, o] = sum_{i,j} w[o,i,j] x[..., n+c-j, i].

    Zero-padded, output length equals input length. anchor defaults to L//2.
    """
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 3:
        raise ValueError(f"bank must be (C_out, C_in, L), got shape {w.shape}")
    m_out, m_in, l = w.shape
    if x.ndim < 2 or x.shape[-1] != m_in:
        raise ValueError(
            f"input shape {x.shape} incompatible with bank of {m_in} input channels"
        )
    c = l // 2 if anchor is None else int(anchor)
    if not 0 <= c < l:
        raise ValueError(f"anchor {c} outside kernel of length {l}")
    lead = x.shape[:-2]
    n = x.shape[-2]
    win = _windows(x, l, c)  # (..., n, m_in, l)
    wf = w[:, :, ::-1].reshape(m_out, m_in * l)
    out = win.reshape(-1, m_in * l) @ wf.T
    return out.reshape(*lead, n, m_out)


def adjoint_bank(r: np.ndarray, w: np.ndarray, anchor: int | None = None) -> np.ndarray:
    """Exact adjoint of conv_bank(., w, anchor) applied to r (..., N, C_out)."""
    w = np.asarray(w, dtype=np.float64)
    m_out, m_in, l = w.shape
    c = l // 2 if anchor is None else int(anchor)
    wt = np.ascontiguousarray(np.swapaxes(w, 0, 1)[:, :, ::-1])
    return conv_bank(r, wt, anchor=l - 1 - c)


def conv_bank_weight_grad(
    g: np.ndarray, x: np.ndarray, l: int, anchor: int | None = None
) -> np.ndarray:
    """Gradient of <conv_bank(x, w, anchor), g> with respect to the bank w.

    g is (..., N, C_out), x is (..., N, C_in); leading axes are summed over.
    Returns (C_out, C_in, l).
    """
    g = np.asarray(g, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if g.shape[:-1] != x.shape[:-1]:
        raise ValueError(f"mismatched shapes {g.shape} vs {x.shape}")
    c = l // 2 if anchor is None else int(anchor)
    m_in = x.shape[-1]
    m_out = g.shape[-1]
    win = _windows(x, l, c)  # (..., n, m_in, l)
    gf = g.reshape(-1, m_out)
    wf = gf.T @ win.reshape(-1, m_in * l)
    return wf.reshape(m_out, m_in, l)[:, :, ::-1].copy()


def reconstruct(d: Dictionary, code: np.ndarray) -> np.ndarray:
    """Synthesize (..., N) from activations (..., N, M): sum of kernel convolutions."""
    out = conv_bank(code, d.kernels[np.newaxis, :, :])
    return out[..., 0]


def correlate_dictionary(d: Dictionary, r: np.ndarray) -> np.ndarray:
    """Adjoint of reconstruct: residual (..., N) -> gradient-side code (..., N, M)."""
    return adjoint_bank(np.asarray(r, dtype=np.float64)[..., np.newaxis],
                        d.kernels[np.newaxis, :, :])


def dictionary_weight_grad(r: np.ndarray, code: np.ndarray, l: int) -> np.ndarray:
    """Gradient of <reconstruct(d, code), r> with respect to the kernel matrix (M, L)."""
    g = conv_bank_weight_grad(np.asarray(r, dtype=np.float64)[..., np.newaxis], code, l)
    return g[0]


def softplus(z: np.ndarray) -> np.ndarray:
    """log(1 + exp(z)) computed stably for large |z|."""
    z = np.asarray(z, dtype=np.float64)
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def softplus_inv(y) -> np.ndarray:
    """Inverse of softplus on positive inputs: log(exp(y) - 1)."""
    y = np.asarray(y, dtype=np.float64)
    if np.any(y <= 0):
        raise ValueError("softplus_inv requires strictly positive input")
    # expm1 keeps precision for small y; for large y this is ~y.
    return np.log(np.expm1(y))


def soft_threshold(x: np.ndarray, theta) -> np.ndarray:
    """Elementwise sign(x) * max(|x| - theta, 0). theta broadcasts over x."""
    theta = np.asarray(theta, dtype=np.float64)
    if np.any(theta <= 0):
        raise ValueError("threshold must be strictly positive")
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.maximum(np.abs(x) - theta, 0.0)


def soft_threshold_grads(x: np.ndarray, theta) -> tuple[np.ndarray, np.ndarray]:
    """(d/dx, d/dtheta) of soft_threshold; subgradient 0 at the kinks."""
    x = np.asarray(x, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    alive = (np.abs(x) > theta).astype(np.float64)
    return alive, -np.sign(x) * alive


def smooth_soft_threshold(x: np.ndarray, theta, beta: float = 50.0) -> np.ndarray:
    """Differentiable surrogate: (softplus(b(x-t)) - softplus(-b(x+t))) / b.

    Odd in x, converges to the exact soft threshold as beta grows; the largest
    deviation is 2*log(2)/beta at the kinks.
    """
    x = np.asarray(x, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    if np.any(theta <= 0):
        raise ValueError("threshold must be strictly positive")
    if beta <= 0:
        raise ValueError("beta must be positive")
    return (softplus(beta * (x - theta)) - softplus(-beta * (x + theta))) / beta


def smooth_soft_threshold_grads(
    x: np.ndarray, theta, beta: float = 50.0
) -> tuple[np.ndarray, np.ndarray]:
    """(d/dx, d/dtheta) of the smooth surrogate, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    up = expit(beta * (x - theta))
    dn = expit(-beta * (x + theta))
    return up + dn, -up + dn


def code_density(code: np.ndarray, tol: float = 1e-8) -> float:
    """Fraction of activation entries with magnitude above tol."""
    code = np.asarray(code)
    if code.size == 0:
        return 0.0
    return float(np.mean(np.abs(code) > tol))


def gram_bank(d: Dictionary) -> np.ndarray:
    """Kernel cross-correlation bank: applying it (anchor L-1) to a code gives
    the correlation of the code's full-support reconstruction with every
    kernel. Shape (M, M, 2L-1); symmetric, positive semidefinite as an
    operator, and exactly Toeplitz because no window cropping is involved.
    """
    m, l = d.kernels.shape
    g = np.empty((m, m, 2 * l - 1))
    for o in range(m):
        for i in range(m):
            g[o, i] = np.correlate(d.kernels[i], d.kernels[o], mode="full")
    return g


def reconstruct_full(d: Dictionary, code: np.ndarray) -> np.ndarray:
    """Reconstruction on its entire N+L-1 support (nothing cropped).

    Index p of the output corresponds to sample p - floor(L/2) of the
    same-length reconstruct output; reconstruct(d, code) equals
    reconstruct_full(d, code)[L//2 : L//2 + N].
    """
    code = np.asarray(code, dtype=np.float64)
    n = code.shape[0]
    l = d.kernel_len
    out = np.zeros(n + l - 1)
    for i in range(d.n_kernels):
        out += np.convolve(code[:, i], d.kernels[i], mode="full")
    return out


def embed_signal_full(y: np.ndarray, l: int) -> np.ndarray:
    """Zero-extend a length-N window onto the N+L-1 reconstruction support."""
    y = np.asarray(y, dtype=np.float64)
    out = np.zeros(len(y) + l - 1)
    out[l // 2 : l // 2 + len(y)] = y
    return out


def estimate_lipschitz(
    d: Dictionary,
    n: int,
    tol: float = 1e-6,
    max_iters: int = 1000,
    block: int = 8,
    seed: int = 0x51C,
) -> float:
    """Largest eigenvalue of the encode-side normal operator.

    The operator takes a code to the correlation of its full-support
    reconstruction with every kernel, i.e. convolution with the kernel
    cross-correlation bank; its inverse largest eigenvalue is the safe
    gradient step for the convolutional lasso. Estimated by block power
    iteration with a Rayleigh-Ritz projection: a single start vector stalls
    on the near-degenerate top cluster these gram operators have, while a
    small block separates it in a few hundred rounds. The operator is PSD so
    the top Ritz value climbs toward the true eigenvalue; increments shrink
    geometrically, and iteration stops once the geometric tail bound on the
    remaining error drops below tol (relative). Deterministic for a fixed
    seed.
    """
    if n < d.kernel_len:
        raise ValueError(
            f"signal length {n} shorter than kernel length {d.kernel_len}"
        )
    g = gram_bank(d)
    anchor = d.kernel_len - 1
    m = d.n_kernels
    b = min(block, n * m)
    rng = np.random.default_rng(seed)
    basis, _ = np.linalg.qr(rng.standard_normal((n * m, b)))
    prev_top = None
    prev_step = None
    for _ in range(max_iters):
        imgs = conv_bank(basis.T.reshape(b, n, m), g, anchor=anchor)
        imgs = imgs.reshape(b, n * m).T
        proj = basis.T @ imgs
        proj = 0.5 * (proj + proj.T)
        top = float(np.linalg.eigvalsh(proj)[-1])
        if prev_top is not None:
            step = top - prev_top
            if step <= 0.0:  # monotone sequence flat to roundoff
                return max(top, prev_top)
            if prev_step is not None and step < prev_step:
                q = step / prev_step
                tail = step * q / (1.0 - q)
                if tail <= tol * top:
                    # adding the tail estimate lands nearer the limit and
                    # errs on the large side, which only shrinks the step
                    return top + tail
            prev_step = step
        prev_top = top
        basis, _ = np.linalg.qr(imgs)
    raise ConvergenceError(
        f"operator norm estimate did not converge in {max_iters} iterations"
    )


def ista_encode(
    y: np.ndarray,
    d: Dictionary,
    lam: float,
    n_iters: int,
    step_scale: float | None = None,
    return_objectives: bool = False,
):
    """Proximal gradient (ISTA) for the convolutional lasso with X_0 = 0.

    The data term compares the code's full-support reconstruction against the
    zero-extended observation, so one iteration is exactly a pair of
    zero-padded convolutions; the k-step encoder trajectory is therefore
    representable by an unfolded network with matched weights. Step size is
    1/c with c from estimate_lipschitz (times step_scale when given, for
    deliberately mis-scaled experiments). Returns the final code, plus the
    per-iterate objective history when requested.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 1:
        raise ValueError(f"expected a single 1-D signal, got shape {y.shape}")
    if lam <= 0:
        raise ValueError(f"lam must be positive, got {lam}")
    if n_iters < 1:
        raise ValueError(f"n_iters must be >= 1, got {n_iters}")
    c = estimate_lipschitz(d, len(y))
    if step_scale is not None:
        c = c * step_scale
    g = gram_bank(d)
    anchor = d.kernel_len - 1
    corr_y = correlate_dictionary(d, y)
    y_full = embed_signal_full(y, d.kernel_len)
    x = np.zeros((len(y), d.n_kernels))
    objectives = []
    for _ in range(n_iters):
        grad = corr_y - conv_bank(x, g, anchor=anchor)
        x = soft_threshold(x + grad / c, lam / c)
        if return_objectives:
            resid = y_full - reconstruct_full(d, x)
            obj = 0.5 * float(resid @ resid) + lam * float(np.sum(np.abs(x)))
            objectives.append(obj)
    if return_objectives:
        return x, objectives
    return x
