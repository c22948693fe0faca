"""Raw pitch accuracy and raw chroma accuracy over frame-aligned tracks.

Only frames where the reference is voiced are scored; voicing errors in the
estimate are ignored.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, UndefinedMetricError

DEFAULT_THRESHOLD_CENTS = 50.0
OCTAVE_CENTS = 1200.0
MAX_FOLD = 6


@dataclass
class EvalPair:
    """Reference and estimated pitch per frame, in cents.

    Estimates may be NaN (no estimate); such frames count as wrong when the
    reference is voiced.
    """

    ref_cents: np.ndarray
    est_cents: np.ndarray
    ref_voiced: np.ndarray

    def __post_init__(self):
        self.ref_cents = np.asarray(self.ref_cents, dtype=np.float64)
        self.est_cents = np.asarray(self.est_cents, dtype=np.float64)
        self.ref_voiced = np.asarray(self.ref_voiced, dtype=bool)
        if not (self.ref_cents.shape == self.est_cents.shape == self.ref_voiced.shape):
            raise ShapeError(
                f"frame counts differ: ref {self.ref_cents.shape}, est {self.est_cents.shape}, "
                f"voicing {self.ref_voiced.shape}"
            )

    @classmethod
    def from_hz(cls, ref_hz, est_hz, f_ref: float = 10.0) -> "EvalPair":
        """Build from Hz tracks; reference frames with f0 <= 0 are unvoiced."""
        ref_hz = np.asarray(ref_hz, dtype=np.float64)
        est_hz = np.asarray(est_hz, dtype=np.float64)
        voiced = ref_hz > 0
        with np.errstate(divide="ignore", invalid="ignore"):
            ref_c = np.where(voiced, 1200.0 * np.log2(np.where(voiced, ref_hz, 1.0) / f_ref), np.nan)
            est_ok = est_hz > 0
            est_c = np.where(est_ok, 1200.0 * np.log2(np.where(est_ok, est_hz, 1.0) / f_ref), np.nan)
        return cls(ref_c, est_c, voiced)


def _voiced_errors(pair: EvalPair) -> np.ndarray:
    if not pair.ref_voiced.any():
        raise UndefinedMetricError("no voiced reference frames; accuracy is undefined")
    return pair.est_cents[pair.ref_voiced] - pair.ref_cents[pair.ref_voiced]


def chroma_distance(diff: np.ndarray) -> np.ndarray:
    """Distance after folding octaves: ``min_k |diff - 1200 k|`` for ``|k| <= 6``."""
    ks = OCTAVE_CENTS * np.arange(-MAX_FOLD, MAX_FOLD + 1)
    return np.min(np.abs(np.asarray(diff, dtype=np.float64)[..., None] - ks), axis=-1)


def raw_pitch_accuracy(pair: EvalPair, threshold_cents: float = DEFAULT_THRESHOLD_CENTS) -> float:
    err = _voiced_errors(pair)
    # NaN estimates compare False and so count as misses
    return float(np.count_nonzero(np.abs(err) <= threshold_cents) / err.size)


def raw_chroma_accuracy(pair: EvalPair, threshold_cents: float = DEFAULT_THRESHOLD_CENTS) -> float:
    err = _voiced_errors(pair)
    with np.errstate(invalid="ignore"):
        dist = chroma_distance(err)
    return float(np.count_nonzero(dist <= threshold_cents) / err.size)
