"""Audio ingestion, framing, label tracks and synthetic harmonic signals."""
from __future__ import annotations

import logging
import math
import os
import warnings
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
import scipy.io.wavfile
import scipy.signal

from .errors import DomainError, FormatError, OrderError, ParseError

log = logging.getLogger(__name__)

SAMPLE_RATE = 16000
FRAME_LENGTH = 1024
HOP = 160
VARIANCE_FLOOR = 1e-8
LABEL_TOLERANCE = 0.010
RESAMPLER_TAPS_PER_PHASE = 64
RESAMPLER_BETA = 14.0
SYNTH_MIN_HZ = 32.7
SYNTH_MAX_HZ = 1975.5
SYNTH_PEAK = 0.9


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise DomainError(f"sample rate must be positive, got {self.sample_rate}")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class LabelTrack:
    """Reference pitch annotations; ``f0 == 0`` marks unvoiced instants."""

    times: np.ndarray
    f0: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.f0 = np.asarray(self.f0, dtype=np.float64)
        if self.times.shape != self.f0.shape or self.times.ndim != 1:
            raise FormatError("label times and f0 must be 1-D arrays of equal length")
        if np.any(np.diff(self.times) <= 0):
            raise OrderError("label times must be strictly increasing")
        if np.any(self.f0 < 0) or not np.all(np.isfinite(self.f0)):
            raise DomainError("label f0 values must be finite and >= 0")

    def __len__(self) -> int:
        return len(self.times)


@dataclass
class FrameSeries:
    """Normalized analysis frames. ``labels`` is NaN where no annotation is near."""

    frames: np.ndarray
    centers: np.ndarray
    labels: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.frames)


# ---------------------------------------------------------------------------
# WAV
# ---------------------------------------------------------------------------

def load_wav(path, channel: str = "mean") -> AudioClip:
    """Read a PCM16 or float32 WAV file.

    Args:
        path: file to read.
        channel: how to reduce stereo input: ``"mean"``, ``"left"`` or
            ``"right"``. In MIR-1k the singing voice is on the right channel.
    """
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", scipy.io.wavfile.WavFileWarning)
            rate, data = scipy.io.wavfile.read(os.fspath(path))
    except (FileNotFoundError, IsADirectoryError, PermissionError):
        raise
    except Exception as exc:  # scipy signals bad headers with assorted exception types
        raise FormatError(f"{path}: malformed WAV file ({exc})") from exc
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise FormatError(f"{path}: unsupported sample format {data.dtype} (need PCM16 or float32)")
    if samples.ndim == 2:
        if samples.shape[1] == 1:
            samples = samples[:, 0]
        elif samples.shape[1] == 2:
            if channel == "left":
                samples = samples[:, 0]
            elif channel == "right":
                samples = samples[:, 1]
            elif channel == "mean":
                samples = samples.mean(axis=1)
            else:
                raise ValueError(f"unknown channel selection {channel!r}")
        else:
            raise FormatError(f"{path}: {samples.shape[1]} channels are not supported")
    return AudioClip(samples, int(rate))


def write_wav(path, clip: AudioClip, float32: bool = False) -> None:
    """Write mono audio as PCM16 (default) or float32. PCM output is clamped to [-1, 1]."""
    x = np.asarray(clip.samples, dtype=np.float64)
    path = os.fspath(path)
    tmp = path + ".tmp"
    if float32:
        data = x.astype(np.float32)
    else:
        over = int(np.count_nonzero(np.abs(x) > 1.0))
        if over:
            log.warning("%s: clamping %d samples outside [-1, 1]", path, over)
        data = np.round(np.clip(x, -1.0, 32767 / 32768) * 32768.0).astype(np.int16)
    with open(tmp, "wb") as fh:
        scipy.io.wavfile.write(fh, clip.sample_rate, data)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

def resampling_filter(up: int, down: int) -> np.ndarray:
    """Kaiser-windowed sinc prototype with 64 taps per polyphase branch.

    Unit DC gain; ``resample_poly`` applies the factor ``up`` itself. One
    extra tap keeps the length odd so the output stays centred.
    """
    n_taps = RESAMPLER_TAPS_PER_PHASE * up + 1
    cutoff = 1.0 / max(up, down)
    return scipy.signal.firwin(n_taps, cutoff, window=("kaiser", RESAMPLER_BETA))


def resample(clip: AudioClip, target_rate: int = SAMPLE_RATE) -> AudioClip:
    if clip.sample_rate == target_rate:
        return AudioClip(clip.samples.copy(), clip.sample_rate)
    ratio = Fraction(target_rate, clip.sample_rate)
    up, down = ratio.numerator, ratio.denominator
    if len(clip) == 0:
        return AudioClip(np.zeros(0), target_rate)
    y = scipy.signal.resample_poly(clip.samples, up, down, window=resampling_filter(up, down))
    return AudioClip(y, target_rate)


def resample_16k(clip: AudioClip) -> AudioClip:
    return resample(clip, SAMPLE_RATE)


# ---------------------------------------------------------------------------
# framing
# ---------------------------------------------------------------------------

def frame_times(n_samples: int, hop: int = HOP, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    if n_samples <= 0:
        return np.zeros(0)
    return np.arange(1 + n_samples // hop) * hop / sample_rate


def normalize_frames(frames: np.ndarray) -> np.ndarray:
    """Zero mean, unit variance per row; rows with variance below the floor are only centred."""
    frames = np.asarray(frames, dtype=np.float64)
    centred = frames - frames.mean(axis=-1, keepdims=True)
    var = np.mean(centred**2, axis=-1, keepdims=True)
    return centred / np.sqrt(np.maximum(var, VARIANCE_FLOOR))


def align_labels(centers: np.ndarray, labels: LabelTrack, tolerance: float = LABEL_TOLERANCE) -> np.ndarray:
    """f0 of the nearest annotation within ``tolerance`` seconds of each centre, else NaN."""
    out = np.full(len(centers), np.nan)
    if len(labels) == 0 or len(centers) == 0:
        return out
    idx = np.searchsorted(labels.times, centers)
    left = np.clip(idx - 1, 0, len(labels) - 1)
    right = np.clip(idx, 0, len(labels) - 1)
    d_left = np.abs(centers - labels.times[left])
    d_right = np.abs(labels.times[right] - centers)
    nearest = np.where(d_right < d_left, right, left)
    dist = np.minimum(d_left, d_right)
    # the 1e-9 slack absorbs rounding in label timestamps written as text
    ok = dist <= tolerance + 1e-9
    out[ok] = labels.f0[nearest[ok]]
    return out


def frame_clip(clip: AudioClip, labels: LabelTrack | None = None, hop: int = HOP) -> FrameSeries:
    """Cut centred, normalized 1024-sample frames every ``hop`` samples.

    Frame ``i`` is centred on sample ``i * hop`` and zero-padded where it
    overhangs the clip.
    """
    if clip.sample_rate != SAMPLE_RATE:
        raise DomainError(f"frame_clip needs {SAMPLE_RATE} Hz audio, got {clip.sample_rate} Hz")
    n = len(clip)
    centers = frame_times(n, hop)
    if n == 0:
        empty = np.zeros((0, FRAME_LENGTH), dtype=np.float32)
        return FrameSeries(empty, centers, np.zeros(0) if labels is not None else None)
    half = FRAME_LENGTH // 2
    padded = np.pad(clip.samples, (half, half + hop))
    starts = np.arange(len(centers)) * hop
    raw = np.lib.stride_tricks.sliding_window_view(padded, FRAME_LENGTH)[starts]
    frames = normalize_frames(raw).astype(np.float32)
    frame_labels = align_labels(centers, labels) if labels is not None else None
    return FrameSeries(frames, centers, frame_labels)


# ---------------------------------------------------------------------------
# label files
# ---------------------------------------------------------------------------

def parse_labels_text(text: str, source: str = "<labels>") -> LabelTrack:
    times, f0s = [], []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 2:
            raise ParseError(f"{source}:{lineno}: expected 'time_sec,f0_hz', got {line!r}")
        try:
            t, f = float(parts[0]), float(parts[1])
        except ValueError:
            if not times and lineno == 1 and parts[0].lower().startswith("time"):
                continue  # header row
            raise ParseError(f"{source}:{lineno}: non-numeric field in {line!r}") from None
        if not (math.isfinite(t) and math.isfinite(f)):
            raise ParseError(f"{source}:{lineno}: non-finite value in {line!r}")
        if f < 0:
            raise ParseError(f"{source}:{lineno}: negative f0 {f}")
        if times and t <= times[-1]:
            raise OrderError(f"{source}:{lineno}: time {t} does not increase (previous {times[-1]})")
        times.append(t)
        f0s.append(f)
    return LabelTrack(np.array(times), np.array(f0s))


def parse_labels(path) -> LabelTrack:
    with open(path, encoding="utf-8") as fh:
        return parse_labels_text(fh.read(), os.fspath(path))


def format_labels(track: LabelTrack) -> str:
    rows = ["time_sec,f0_hz"]
    rows += [f"{t:.6f},{f:.6f}" for t, f in zip(track.times, track.f0)]
    return "\n".join(rows) + "\n"


def write_labels(path, track: LabelTrack) -> None:
    path = os.fspath(path)
    with open(path + ".tmp", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_labels(track))
    os.replace(path + ".tmp", path)


# ---------------------------------------------------------------------------
# synthesis
# ---------------------------------------------------------------------------

def f0_at(track: LabelTrack, t: np.ndarray) -> np.ndarray:
    """Instantaneous f0 of a track: linear between two voiced entries, held otherwise."""
    t = np.asarray(t, dtype=np.float64)
    if len(track) == 0:
        return np.zeros_like(t)
    j = np.clip(np.searchsorted(track.times, t, side="right") - 1, 0, len(track) - 1)
    k = np.minimum(j + 1, len(track) - 1)
    f_j, f_k = track.f0[j], track.f0[k]
    t_j, t_k = track.times[j], track.times[k]
    span = np.where(k > j, t_k - t_j, 1.0)
    frac = np.clip((t - t_j) / span, 0.0, 1.0)
    both = (f_j > 0) & (f_k > 0) & (k > j)
    return np.where(both, f_j + frac * (f_k - f_j), f_j)


def synth_harmonic(
    f0_track: LabelTrack,
    duration: float,
    harmonics: int = 1,
    decay: float = 1.0,
    sample_rate: int = SAMPLE_RATE,
    label_hop: float = 0.01,
) -> tuple[AudioClip, LabelTrack]:
    """Phase-continuous harmonic signal following ``f0_track``.

    Harmonic ``h`` has amplitude ``decay ** (h - 1)``; partials at or above
    Nyquist are dropped sample by sample. The result is peak-normalized to
    0.9 and the returned labels are the exact instantaneous f0 on a
    ``label_hop`` grid.
    """
    if harmonics < 1:
        raise DomainError(f"need at least one harmonic, got {harmonics}")
    if duration < 0:
        raise DomainError(f"negative duration {duration}")
    voiced = f0_track.f0[f0_track.f0 > 0]
    if np.any((voiced < SYNTH_MIN_HZ) | (voiced > SYNTH_MAX_HZ)):
        raise DomainError(f"voiced f0 must lie in [{SYNTH_MIN_HZ}, {SYNTH_MAX_HZ}] Hz")
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    f = f0_at(f0_track, t)
    phase = 2.0 * np.pi * np.cumsum(f) / sample_rate
    x = np.zeros(n)
    for h in range(1, harmonics + 1):
        audible = (f > 0) & (h * f < sample_rate / 2)
        x += np.where(audible, decay ** (h - 1) * np.sin(h * phase), 0.0)
    peak = np.max(np.abs(x)) if n else 0.0
    if peak > 0:
        x *= SYNTH_PEAK / peak
    n_labels = int(math.floor(duration / label_hop + 1e-9)) + 1 if n else 0
    label_times = np.arange(n_labels) * label_hop
    label_times = label_times[label_times < duration] if n else label_times
    return AudioClip(x, sample_rate), LabelTrack(label_times, f0_at(f0_track, label_times))
