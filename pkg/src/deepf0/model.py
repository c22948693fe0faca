"""The DeepF0 network: construction, forward/backward, introspection, weight files.

Layout (defaults in brackets)::

    frame [1024] -> causal conv 1->C [C=128, k=64]
                 -> residual blocks, one per dilation [1, 2, 4, 8]:
                        F(x) = relu(pw(relu(dil(x))))
                        y    = relu(x + F(x))          (or F(x) without residual)
                 -> avg pool [64] -> flatten [C * 16] -> dense [360] -> sigmoid

Every convolution is weight-normalized; the dense layer is not.
"""
from __future__ import annotations

import io
import os
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import numkernels as nk
from .errors import ConfigError, FormatError, ShapeError

CREPE_PARAMS = 22.2e6

WEIGHT_MAGIC = b"DF0W"
WEIGHT_VERSION = 1


@dataclass(frozen=True)
class DeepF0Config:
    frame_length: int = 1024
    channels: int = 128
    first_kernel: int = 64
    block_kernel: int = 64
    dilations: tuple = (1, 2, 4, 8)
    pool: int = 64
    bins: int = 360
    use_residual: bool = True
    use_dropout: bool = False
    dropout_rate: float = 0.25

    def __post_init__(self):
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        self.validate()

    def validate(self) -> None:
        for name in ("frame_length", "channels", "first_kernel", "block_kernel", "pool", "bins"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.frame_length % self.pool:
            raise ConfigError(f"frame_length {self.frame_length} is not divisible by pool {self.pool}")
        if any(d < 1 for d in self.dilations):
            raise ConfigError(f"dilations must be positive, got {self.dilations}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    @property
    def pooled_length(self) -> int:
        return self.frame_length // self.pool

    @property
    def dense_in(self) -> int:
        return self.channels * self.pooled_length

    def with_(self, **changes) -> "DeepF0Config":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dilations"] = list(self.dilations)
        return d


def param_shapes(config: DeepF0Config) -> dict[str, tuple]:
    """Ordered name -> shape map of every learnable tensor."""
    c = config.channels
    shapes = {
        "first.v": (c, 1, config.first_kernel),
        "first.g": (c,),
        "first.b": (c,),
    }
    for i, _ in enumerate(config.dilations):
        shapes[f"block{i}.dil.v"] = (c, c, config.block_kernel)
        shapes[f"block{i}.dil.g"] = (c,)
        shapes[f"block{i}.dil.b"] = (c,)
        shapes[f"block{i}.pw.v"] = (c, c, 1)
        shapes[f"block{i}.pw.g"] = (c,)
        shapes[f"block{i}.pw.b"] = (c,)
    shapes["dense.W"] = (config.dense_in, config.bins)
    shapes["dense.b"] = (config.bins,)
    return shapes


def param_count(config: DeepF0Config) -> int:
    """Exact number of learnable scalars, weight-norm gains included."""
    return int(sum(np.prod(s, dtype=np.int64) for s in param_shapes(config).values()))


def receptive_field(config: DeepF0Config) -> int:
    """Input samples that can influence one output position of the last block."""
    return config.first_kernel + sum((config.block_kernel - 1) * d for d in config.dilations)


def layer_table(config: DeepF0Config) -> list[tuple[str, tuple, int]]:
    """``(tensor name, shape, scalar count)`` rows in storage order."""
    return [(name, shape, int(np.prod(shape))) for name, shape in param_shapes(config).items()]


@dataclass
class ModelParams:
    """All learnable tensors of one network, keyed by name (see :func:`param_shapes`)."""

    config: DeepF0Config
    tensors: dict = field(default_factory=dict)

    def __post_init__(self):
        expected = param_shapes(self.config)
        if list(self.tensors) != list(expected):
            raise ShapeError("parameter names do not match the configuration")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ShapeError(f"{name}: shape {self.tensors[name].shape}, expected {shape}")

    @property
    def dtype(self):
        return self.tensors["dense.W"].dtype

    def conv(self, prefix: str, dilation: int = 1) -> nk.ConvParams:
        t = self.tensors
        return nk.ConvParams(t[prefix + ".v"], t[prefix + ".g"], t[prefix + ".b"], dilation)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def flatten(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.tensors.values()])

    def load_flat(self, flat: np.ndarray) -> None:
        if flat.size != param_count(self.config):
            raise ShapeError(f"flat vector has {flat.size} entries, expected {param_count(self.config)}")
        pos = 0
        for v in self.tensors.values():
            v[...] = flat[pos : pos + v.size].reshape(v.shape)
            pos += v.size


def build(config: DeepF0Config, seed: int = 0, dtype=np.float32) -> ModelParams:
    """Initialize a network deterministically from ``seed``.

    Conv directions are He-uniform over their fan-in with gains set to the
    direction norms, so effective weights start equal to the directions. The
    dense layer is Glorot-uniform. All biases start at zero.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(config).items():
        kind = name.rsplit(".", 1)[1]
        if kind == "v":
            fan_in = shape[1] * shape[2]
            bound = np.sqrt(6.0 / fan_in)
            tensors[name] = rng.uniform(-bound, bound, size=shape)
        elif kind == "g":
            v = tensors[name[:-1] + "v"]
            tensors[name] = np.sqrt(np.sum(v.reshape(v.shape[0], -1) ** 2, axis=1))
        elif kind == "W":
            bound = np.sqrt(6.0 / (shape[0] + shape[1]))
            tensors[name] = rng.uniform(-bound, bound, size=shape)
        else:
            tensors[name] = np.zeros(shape)
    return ModelParams(config, {k: v.astype(dtype) for k, v in tensors.items()})


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

def _method_for(p: nk.ConvParams, method: str) -> str:
    if method != "auto":
        return method
    # spectral products only pay off once the dilated span is long
    return "fft" if p.span > 32 else "direct"


def _as_frames(params: ModelParams, frames: np.ndarray) -> tuple[np.ndarray, bool]:
    frames = np.asarray(frames)
    single = frames.ndim == 1
    if single:
        frames = frames[None]
    if frames.ndim != 2 or frames.shape[1] != params.config.frame_length:
        raise ShapeError(
            f"expected frames of length {params.config.frame_length}, got shape {frames.shape}"
        )
    return frames.astype(params.dtype, copy=False), single


def _forward(params, frames, method="auto", training=False, rng=None, keep=False):
    cfg = params.config
    cache = {}
    x = frames[:, None, :]
    first = params.conv("first")
    h = nk.conv1d_causal(x, first, _method_for(first, method))
    if keep:
        cache["x0"] = x
    for i, d in enumerate(cfg.dilations):
        dil = params.conv(f"block{i}.dil", d)
        pw = params.conv(f"block{i}.pw")
        a1 = nk.conv1d_causal(h, dil, _method_for(dil, method))
        r1 = nk.relu(a1)
        a2 = nk.conv1d_causal(r1, pw, _method_for(pw, method))
        r2 = nk.relu(a2)
        s = h + r2 if cfg.use_residual else a2
        y = nk.relu(s)
        mask = None
        if cfg.use_dropout and training:
            keep_p = 1.0 - cfg.dropout_rate
            mask = ((rng.random(y.shape) < keep_p) / keep_p).astype(y.dtype)
            y = y * mask
        if keep:
            cache[i] = (h, a1, r1, a2, s, mask)
        h = y
    features = h
    pooled = nk.avg_pool(features, cfg.pool)
    flat = pooled.reshape(pooled.shape[0], -1)
    logits = nk.dense(flat, params.tensors["dense.W"], params.tensors["dense.b"])
    out = nk.sigmoid(logits)
    if keep:
        cache["features"] = features
        cache["flat"] = flat
        cache["out"] = out
    return out, features, cache


def forward(params: ModelParams, frames: np.ndarray, method: str = "auto") -> np.ndarray:
    """Activations in (0, 1) for one frame ``(T,)`` -> ``(bins,)`` or a batch ``(B, T)`` -> ``(B, bins)``.

    Dropout is never applied here (inference mode).
    """
    frames, single = _as_frames(params, frames)
    out, _, _ = _forward(params, frames, method)
    return out[0] if single else out


def block_features(params: ModelParams, frames: np.ndarray, method: str = "direct") -> np.ndarray:
    """Output of the last residual block (before pooling), ``(B, C, T)``."""
    frames, single = _as_frames(params, frames)
    _, feats, _ = _forward(params, frames, method)
    return feats[0] if single else feats


def loss_and_grads(
    params: ModelParams,
    frames: np.ndarray,
    targets: np.ndarray,
    method: str = "auto",
    rng: np.random.Generator | None = None,
    training: bool = True,
):
    """Mean BCE of ``forward(frames)`` against ``targets`` and its gradient.

    Returns:
        ``(loss, grads)`` with ``grads`` keyed like ``params.tensors``.
    """
    cfg = params.config
    frames, single = _as_frames(params, frames)
    targets = np.asarray(targets)
    if single:
        targets = targets[None]
    if targets.shape != (frames.shape[0], cfg.bins):
        raise ShapeError(f"targets shape {targets.shape} != {(frames.shape[0], cfg.bins)}")
    if cfg.use_dropout and training and rng is None:
        rng = np.random.default_rng(0)
    out, _, cache = _forward(params, frames, method, training, rng, keep=True)
    loss, g_out = nk.bce_loss(out, targets.astype(out.dtype, copy=False))

    grads = {}
    g_logits = nk.sigmoid_backward(out, g_out)
    g_flat, grads["dense.W"], grads["dense.b"] = nk.dense_backward(
        cache["flat"], params.tensors["dense.W"], g_logits
    )
    feats = cache["features"]
    g_h = nk.avg_pool_backward(g_flat.reshape(feats.shape[0], feats.shape[1], -1), cfg.pool)

    for i in reversed(range(len(cfg.dilations))):
        h, a1, r1, a2, s, mask = cache[i]
        d = cfg.dilations[i]
        dil = params.conv(f"block{i}.dil", d)
        pw = params.conv(f"block{i}.pw")
        if mask is not None:
            g_h = g_h * mask
        g_s = nk.relu_backward(s, g_h)
        if cfg.use_residual:
            g_skip = g_s
            g_a2 = nk.relu_backward(a2, g_s)
        else:
            g_skip = None
            g_a2 = g_s
        g_r1, gv, gg, gb = nk.conv1d_backward(r1, pw, g_a2, _method_for(pw, method))
        grads[f"block{i}.pw.v"], grads[f"block{i}.pw.g"], grads[f"block{i}.pw.b"] = gv, gg, gb
        g_a1 = nk.relu_backward(a1, g_r1)
        g_in, gv, gg, gb = nk.conv1d_backward(h, dil, g_a1, _method_for(dil, method))
        grads[f"block{i}.dil.v"], grads[f"block{i}.dil.g"], grads[f"block{i}.dil.b"] = gv, gg, gb
        g_h = g_in + g_skip if g_skip is not None else g_in

    first = params.conv("first")
    _, gv, gg, gb = nk.conv1d_backward(cache["x0"], first, g_h, _method_for(first, method))
    grads["first.v"], grads["first.g"], grads["first.b"] = gv, gg, gb
    grads = {name: grads[name].astype(params.dtype, copy=False) for name in params.tensors}
    return loss, grads


# ---------------------------------------------------------------------------
# weight files
# ---------------------------------------------------------------------------
# magic "DF0W" | u32 version | config block | shape table | f32 payload, all little-endian

_FLAG_RESIDUAL = 1
_FLAG_DROPOUT = 2


def _pack_config(cfg: DeepF0Config) -> bytes:
    flags = (_FLAG_RESIDUAL if cfg.use_residual else 0) | (_FLAG_DROPOUT if cfg.use_dropout else 0)
    head = struct.pack(
        "<5I", cfg.frame_length, cfg.channels, cfg.first_kernel, cfg.block_kernel, len(cfg.dilations)
    )
    dil = struct.pack(f"<{len(cfg.dilations)}I", *cfg.dilations)
    tail = struct.pack("<3If", cfg.pool, cfg.bins, flags, cfg.dropout_rate)
    return head + dil + tail


def _read(buf: io.BytesIO, n: int) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise FormatError("weight file is truncated")
    return data


def _unpack_config(buf: io.BytesIO) -> DeepF0Config:
    frame_length, channels, first_k, block_k, n_dil = struct.unpack("<5I", _read(buf, 20))
    if n_dil > 64:
        raise FormatError(f"implausible dilation count {n_dil}")
    dilations = struct.unpack(f"<{n_dil}I", _read(buf, 4 * n_dil))
    pool, bins, flags, rate = struct.unpack("<3If", _read(buf, 16))
    try:
        return DeepF0Config(
            frame_length=frame_length,
            channels=channels,
            first_kernel=first_k,
            block_kernel=block_k,
            dilations=dilations,
            pool=pool,
            bins=bins,
            use_residual=bool(flags & _FLAG_RESIDUAL),
            use_dropout=bool(flags & _FLAG_DROPOUT),
            dropout_rate=float(np.float32(rate)),
        )
    except ConfigError as exc:
        raise FormatError(f"invalid config block: {exc}") from exc


def weights_to_bytes(params: ModelParams) -> bytes:
    out = io.BytesIO()
    out.write(WEIGHT_MAGIC)
    out.write(struct.pack("<I", WEIGHT_VERSION))
    out.write(_pack_config(params.config))
    out.write(struct.pack("<I", len(params.tensors)))
    for name, arr in params.tensors.items():
        raw = name.encode("utf-8")
        out.write(struct.pack("<H", len(raw)) + raw)
        out.write(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
    for arr in params.tensors.values():
        out.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return out.getvalue()


def weights_from_bytes(data: bytes, expected: DeepF0Config | None = None) -> ModelParams:
    buf = io.BytesIO(data)
    if _read(buf, 4) != WEIGHT_MAGIC:
        raise FormatError("not a DeepF0 weight file (bad magic)")
    (version,) = struct.unpack("<I", _read(buf, 4))
    if version != WEIGHT_VERSION:
        raise FormatError(f"unsupported weight file version {version}")
    cfg = _unpack_config(buf)
    if expected is not None and cfg != expected:
        raise FormatError(f"weight file was written for a different config: {cfg} != {expected}")
    (n_tensors,) = struct.unpack("<I", _read(buf, 4))
    table = []
    for _ in range(n_tensors):
        (name_len,) = struct.unpack("<H", _read(buf, 2))
        name = _read(buf, name_len).decode("utf-8", errors="replace")
        (ndim,) = struct.unpack("<I", _read(buf, 4))
        if ndim > 8:
            raise FormatError(f"implausible rank {ndim} for {name}")
        shape = struct.unpack(f"<{ndim}I", _read(buf, 4 * ndim))
        table.append((name, tuple(shape)))
    if table != list(param_shapes(cfg).items()):
        raise FormatError("shape table does not match the stored configuration")
    tensors = {}
    for name, shape in table:
        n = int(np.prod(shape))
        tensors[name] = np.frombuffer(_read(buf, 4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    if buf.read(1):
        raise FormatError("trailing bytes after parameter payload")
    return ModelParams(cfg, tensors)


def save_weights(params: ModelParams, path) -> None:
    """Write a weight file atomically (temp file + rename)."""
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(weights_to_bytes(params))
    os.replace(tmp, path)


def load_weights(path, expected: DeepF0Config | None = None) -> ModelParams:
    """Read a weight file; raises :class:`FormatError` on any inconsistency."""
    with open(path, "rb") as fh:
        return weights_from_bytes(fh.read(), expected)
