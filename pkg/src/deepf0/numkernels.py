"""Differentiable numeric kernels with hand-written backward passes.

Feature maps are plain numpy arrays shaped ``(channels, length)`` or, for a
batch, ``(batch, channels, length)``. Every op keeps the dtype of its inputs,
so the same code runs in float32 for training and float64 for gradient
checks.

Convolutions come in two numerically equivalent flavours:

* ``"direct"`` gathers the dilated taps with a strided window view and
  contracts them with a matrix product. Output at time ``t`` is computed
  from the window ending at ``t`` only, so causality holds bit for bit.
* ``"fft"`` multiplies spectra. It is much cheaper for long dilated kernels
  and is what the trainer uses; results agree with ``"direct"`` to rounding.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.fft
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericError, ShapeError

BCE_EPS = 1e-7
CONV_METHODS = ("direct", "fft")


@dataclass
class ConvParams:
    """Weight-normalized 1-D convolution parameters.

    ``direction`` has shape ``(out_channels, in_channels, kernel_size)``;
    ``gain`` and ``bias`` have one entry per output channel.
    """

    direction: np.ndarray
    gain: np.ndarray
    bias: np.ndarray
    dilation: int = 1

    def __post_init__(self):
        if self.direction.ndim != 3:
            raise ShapeError(f"direction must be 3-D, got shape {self.direction.shape}")
        out_ch = self.direction.shape[0]
        if self.gain.shape != (out_ch,) or self.bias.shape != (out_ch,):
            raise ShapeError(
                f"gain/bias must have shape ({out_ch},), got {self.gain.shape} and {self.bias.shape}"
            )
        if self.kernel_size < 1:
            raise ShapeError("kernel_size must be >= 1")
        if int(self.dilation) < 1:
            raise ShapeError(f"dilation must be >= 1, got {self.dilation}")

    @property
    def out_channels(self) -> int:
        return self.direction.shape[0]

    @property
    def in_channels(self) -> int:
        return self.direction.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.direction.shape[2]

    @property
    def span(self) -> int:
        """Number of input samples covered by one output position."""
        return (self.kernel_size - 1) * self.dilation + 1


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 2:
        return x[None], True
    if x.ndim == 3:
        return x, False
    raise ShapeError(f"feature map must be 2-D or 3-D, got shape {x.shape}")


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {what}")


# ---------------------------------------------------------------------------
# weight normalization
# ---------------------------------------------------------------------------

def weight_norm_effective(v: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Return ``w[c] = g[c] * v[c] / ||v[c]||`` with the norm over all non-leading axes."""
    norms = np.sqrt(np.sum(v.reshape(v.shape[0], -1) ** 2, axis=1))
    if np.any(norms == 0) or not np.all(np.isfinite(norms)):
        raise NumericError("weight-norm direction has a zero-norm (or non-finite) output channel")
    scale = (g / norms).reshape((-1,) + (1,) * (v.ndim - 1))
    return v * scale


def weight_norm_backward(v: np.ndarray, g: np.ndarray, grad_w: np.ndarray):
    """Chain rule through ``w = g v / ||v||``.

    Returns:
        ``(grad_v, grad_g)``
    """
    flat_v = v.reshape(v.shape[0], -1)
    flat_gw = grad_w.reshape(v.shape[0], -1)
    norms = np.sqrt(np.sum(flat_v**2, axis=1))
    if np.any(norms == 0):
        raise NumericError("weight-norm direction has a zero-norm output channel")
    grad_g = np.sum(flat_gw * flat_v, axis=1) / norms
    grad_v = (g / norms)[:, None] * flat_gw - (g * grad_g / norms**2)[:, None] * flat_v
    return grad_v.reshape(v.shape), grad_g


# ---------------------------------------------------------------------------
# causal dilated convolution
# ---------------------------------------------------------------------------

def _causal_windows(x: np.ndarray, span: int, dilation: int) -> np.ndarray:
    # (B, C, T) -> read-only view (B, C, T, K); window t ends at input sample t
    xp = np.pad(x, ((0, 0), (0, 0), (span - 1, 0)))
    return sliding_window_view(xp, span, axis=-1)[..., ::dilation]


def _fft_size(length: int, span: int) -> int:
    # circular wrap-around must land in the zero region for every t < length
    return scipy.fft.next_fast_len(length + span - 1, real=True)


def _kernel_spectrum(w: np.ndarray, dilation: int, n_fft: int) -> np.ndarray:
    # tap k sits at lag (K-1-k)*d of the equivalent causal filter
    out_ch, in_ch, k = w.shape
    h = np.zeros((out_ch, in_ch, n_fft), dtype=w.dtype)
    h[:, :, (k - 1) * dilation :: -dilation][:, :, :k] = w
    return scipy.fft.rfft(h, axis=-1)


def _freq_major(a: np.ndarray, axes: tuple) -> np.ndarray:
    # batched matmul is ~10x slower on strided operands
    return np.ascontiguousarray(a.transpose(axes))


def conv1d_causal(x: np.ndarray, p: ConvParams, method: str = "direct") -> np.ndarray:
    """Causal dilated 1-D convolution with weight-normalized kernels.

    The input is left-padded with ``(kernel_size - 1) * dilation`` zeros so the
    output has the same length and position ``t`` sees inputs ``<= t`` only.

    Args:
        x: feature map ``(C_in, T)`` or ``(B, C_in, T)``.
        p: convolution parameters.
        method: ``"direct"`` or ``"fft"``.

    Returns:
        Feature map with ``p.out_channels`` channels and the input's length.
    """
    xb, squeeze = _as_batch(x)
    if xb.shape[1] != p.in_channels:
        raise ShapeError(f"input has {xb.shape[1]} channels, conv expects {p.in_channels}")
    _check_finite(xb, "conv input")
    w = weight_norm_effective(p.direction, p.gain)
    length = xb.shape[2]
    if method == "direct":
        win = _causal_windows(xb, p.span, p.dilation)
        y = np.tensordot(win, w, axes=([1, 3], [1, 2]))  # (B, T, O)
        y = np.ascontiguousarray(y.transpose(0, 2, 1))
    elif method == "fft":
        n_fft = _fft_size(length, p.span)
        hf = _freq_major(_kernel_spectrum(w, p.dilation, n_fft), (2, 0, 1))  # (F, O, I)
        xf = _freq_major(scipy.fft.rfft(xb, n=n_fft, axis=-1), (2, 1, 0))  # (F, I, B)
        yf = np.matmul(hf, xf).transpose(2, 1, 0)  # (B, O, F)
        y = scipy.fft.irfft(yf, n=n_fft, axis=-1)[..., :length].astype(xb.dtype, copy=False)
    else:
        raise ValueError(f"unknown conv method {method!r}; expected one of {CONV_METHODS}")
    y = y + p.bias[None, :, None]
    return y[0] if squeeze else y


def conv1d_backward(x: np.ndarray, p: ConvParams, grad_out: np.ndarray, method: str = "direct"):
    """Exact gradients of :func:`conv1d_causal`.

    Returns:
        ``(grad_x, grad_v, grad_g, grad_bias)``
    """
    xb, squeeze = _as_batch(x)
    gb, _ = _as_batch(grad_out)
    expected = (xb.shape[0], p.out_channels, xb.shape[2])
    if gb.shape != expected:
        raise ShapeError(f"grad_out shape {gb.shape} does not match forward output {expected}")
    if xb.shape[1] != p.in_channels:
        raise ShapeError(f"input has {xb.shape[1]} channels, conv expects {p.in_channels}")
    w = weight_norm_effective(p.direction, p.gain)
    length = xb.shape[2]
    k, d = p.kernel_size, p.dilation
    grad_bias = gb.sum(axis=(0, 2))

    if method == "direct":
        win = _causal_windows(xb, p.span, d)
        grad_w = np.tensordot(gb, win, axes=([0, 2], [0, 2]))  # (O, I, K)
        # grad_x[s] = sum_k w[k] * g[s + (K-1-k) d]: an anti-causal conv with flipped taps
        gp = np.pad(gb, ((0, 0), (0, 0), (0, p.span - 1)))
        gwin = sliding_window_view(gp, p.span, axis=-1)[..., ::d]  # (B, O, T, K)
        grad_x = np.tensordot(gwin, w[:, :, ::-1], axes=([1, 3], [0, 2])).transpose(0, 2, 1)
    elif method == "fft":
        n_fft = _fft_size(length, p.span)
        hf = _kernel_spectrum(w, d, n_fft)  # (O, I, F)
        gf = scipy.fft.rfft(gb, n=n_fft, axis=-1)  # (B, O, F)
        xf = scipy.fft.rfft(xb, n=n_fft, axis=-1)  # (B, I, F)
        # adjoint of circular convolution = circular correlation
        gf_t = _freq_major(gf, (2, 1, 0))  # (F, O, B)
        gxf = np.matmul(_freq_major(np.conj(hf), (2, 1, 0)), gf_t)  # (F, I, B)
        grad_x = scipy.fft.irfft(gxf.transpose(2, 1, 0), n=n_fft, axis=-1)[..., :length]
        ghf = np.matmul(gf_t, _freq_major(np.conj(xf), (2, 0, 1)))  # (F, O, I)
        gh = scipy.fft.irfft(ghf.transpose(1, 2, 0), n=n_fft, axis=-1)
        grad_w = gh[:, :, (k - 1) * d :: -d][:, :, :k]
        grad_x = grad_x.astype(xb.dtype, copy=False)
        grad_w = grad_w.astype(w.dtype, copy=False)
    else:
        raise ValueError(f"unknown conv method {method!r}; expected one of {CONV_METHODS}")

    grad_v, grad_g = weight_norm_backward(p.direction, p.gain, grad_w)
    grad_x = np.ascontiguousarray(grad_x)
    return (grad_x[0] if squeeze else grad_x), grad_v, grad_g, grad_bias


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Gradient of ReLU given its *input* ``x`` (subgradient 0 at 0)."""
    return grad_out * (x > 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    x = np.asarray(x)
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    # keep the open interval even where the exact value rounds to 0 or 1
    one = out.dtype.type(1)
    np.clip(out, np.finfo(out.dtype).tiny, np.nextafter(one, out.dtype.type(0)), out=out)
    return out


def sigmoid_backward(y: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Gradient of the sigmoid given its *output* ``y``."""
    return grad_out * y * (1 - y)


# ---------------------------------------------------------------------------
# pooling and dense
# ---------------------------------------------------------------------------

def avg_pool(x: np.ndarray, pool: int) -> np.ndarray:
    """Non-overlapping average pooling along the last axis."""
    length = x.shape[-1]
    if pool < 1 or length % pool:
        raise ShapeError(f"length {length} is not divisible by pool size {pool}")
    return x.reshape(x.shape[:-1] + (length // pool, pool)).mean(axis=-1)


def avg_pool_backward(grad_out: np.ndarray, pool: int) -> np.ndarray:
    return np.repeat(grad_out / pool, pool, axis=-1)


def dense(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Affine map ``y = x W + b``; ``W`` is ``(in_dim, out_dim)``, ``x`` is ``(in_dim,)`` or ``(B, in_dim)``."""
    if x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ShapeError(f"dense shapes do not agree: x {x.shape}, W {W.shape}, b {b.shape}")
    return x @ W + b


def dense_backward(x: np.ndarray, W: np.ndarray, grad_out: np.ndarray):
    """Returns ``(grad_x, grad_W, grad_b)``."""
    if grad_out.shape[-1] != W.shape[1] or grad_out.shape[:-1] != x.shape[:-1]:
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match dense output")
    grad_x = grad_out @ W.T
    if x.ndim == 1:
        grad_W = np.outer(x, grad_out)
        grad_b = grad_out.copy()
    else:
        grad_W = x.T @ grad_out
        grad_b = grad_out.sum(axis=0)
    return grad_x, grad_W, grad_b


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def bce_loss(y_hat: np.ndarray, y: np.ndarray, eps: float = BCE_EPS):
    """Binary cross-entropy, mean over bins then over the batch.

    Predictions are clamped to ``[eps, 1 - eps]`` before the log; the gradient
    is that of the clamped function, so it is zero where clamping is active.

    Returns:
        ``(loss, grad_y_hat)``
    """
    y_hat = np.asarray(y_hat)
    y = np.asarray(y)
    if y_hat.shape != y.shape:
        raise ShapeError(f"prediction shape {y_hat.shape} != target shape {y.shape}")
    if np.any(y < 0) or np.any(y > 1) or not np.all(np.isfinite(y)):
        raise ValueError("BCE targets must lie in [0, 1]")
    clamped = np.clip(y_hat, eps, 1 - eps)
    per_elem = -(y * np.log(clamped) + (1 - y) * np.log1p(-clamped))
    loss = float(per_elem.mean()) if per_elem.size else 0.0
    inside = (y_hat >= eps) & (y_hat <= 1 - eps)
    grad = (clamped - y) / (clamped * (1 - clamped)) / max(per_elem.size, 1)
    return loss, (grad * inside).astype(y_hat.dtype, copy=False)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update, applied in place.

    ``params`` and ``grads`` map names to arrays of equal shape. Moments are
    created lazily on the first step.
    """
    for name, g in grads.items():
        if name not in params:
            raise ShapeError(f"gradient for unknown parameter {name!r}")
        if params[name].shape != g.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != parameter shape {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name!r}")

    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    corr1 = 1 - b1**t
    corr2 = 1 - b2**t
    for name, g in grads.items():
        p = params[name]
        m = state.first_moment.get(name)
        if m is None:
            m = state.first_moment[name] = np.zeros_like(p)
            state.second_moment[name] = np.zeros_like(p)
        v = state.second_moment[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        m_hat = m / corr1
        v_hat = v / corr2
        p -= (state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(p.dtype, copy=False)
    return params, state
