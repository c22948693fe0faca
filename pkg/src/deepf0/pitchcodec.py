"""Conversions between Hz, cents and the 360-bin activation space."""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import DomainError

F_REF = 10.0
N_BINS = 360
BIN_CENTS = 20.0
LOWEST_HZ = 32.70
NOMINAL_TOP_HZ = 1975.5
TARGET_SIGMA_CENTS = 25.0
DECODE_HALF_WINDOW = 4


def hz_to_cents(f, f_ref: float = F_REF):
    """``1200 * log2(f / f_ref)``; accepts scalars or arrays."""
    f_arr = np.asarray(f, dtype=np.float64)
    if np.any(~(f_arr > 0)):
        raise DomainError("frequency must be > 0 Hz")
    out = 1200.0 * np.log2(f_arr / f_ref)
    return float(out) if out.ndim == 0 else out


def cents_to_hz(c, f_ref: float = F_REF):
    out = f_ref * np.exp2(np.asarray(c, dtype=np.float64) / 1200.0)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class CentsGrid:
    """Bin centres in cents, anchored at 32.70 Hz with exact 20-cent spacing.

    With 360 bins the top centre lands near 2067 Hz; the commonly quoted
    1975.5 Hz upper limit is kept only as :data:`NOMINAL_TOP_HZ`.
    """

    bin_centers: np.ndarray
    f_ref: float = F_REF

    @classmethod
    def default(cls) -> "CentsGrid":
        return _default_grid()

    def __len__(self) -> int:
        return len(self.bin_centers)

    @property
    def hz(self) -> np.ndarray:
        return cents_to_hz(self.bin_centers, self.f_ref)


@lru_cache(maxsize=None)
def _default_grid() -> CentsGrid:
    start = hz_to_cents(LOWEST_HZ)
    centers = start + BIN_CENTS * np.arange(N_BINS, dtype=np.float64)
    centers.setflags(write=False)
    return CentsGrid(centers)


def make_grid(bins: int = N_BINS, lowest_hz: float = LOWEST_HZ, step_cents: float = BIN_CENTS) -> CentsGrid:
    """Grid with a custom bin count; used by reduced test configurations."""
    start = hz_to_cents(lowest_hz)
    centers = start + step_cents * np.arange(bins, dtype=np.float64)
    centers.setflags(write=False)
    return CentsGrid(centers)


@dataclass(frozen=True)
class PitchEstimate:
    cents: float
    hz: float
    confidence: float


def make_target(f0, grid: CentsGrid | None = None, sigma: float = TARGET_SIGMA_CENTS) -> np.ndarray:
    """Gaussian-blurred target vector(s) centred on the true pitch.

    Args:
        f0: frequency in Hz, scalar or 1-D array (one target row per entry).
        grid: bin centres; defaults to the 360-bin grid.
        sigma: Gaussian standard deviation in cents.

    Returns:
        ``(bins,)`` for a scalar ``f0``, else ``(len(f0), bins)``; float64.
    """
    grid = grid or CentsGrid.default()
    f0_arr = np.asarray(f0, dtype=np.float64)
    if np.any(~(f0_arr > 0)):
        raise DomainError("targets need a voiced f0 > 0 Hz")
    c_true = 1200.0 * np.log2(f0_arr / grid.f_ref)
    diff = grid.bin_centers - c_true[..., None]
    return np.exp(-(diff**2) / (2.0 * sigma**2))


def _peak_window(m: int, n: int) -> slice:
    # window shrinks at the grid edges instead of reading out of range
    return slice(max(m - DECODE_HALF_WINDOW, 0), min(m + DECODE_HALF_WINDOW, n - 1) + 1)


def decode(activations: np.ndarray, grid: CentsGrid | None = None) -> PitchEstimate:
    """Local weighted average of bin centres around the strongest bin."""
    grid = grid or CentsGrid.default()
    act = np.asarray(activations, dtype=np.float64)
    if act.shape != (len(grid),):
        raise DomainError(f"expected {len(grid)} activations, got shape {act.shape}")
    if not np.all(np.isfinite(act)):
        raise DomainError("activations must be finite")
    m = int(np.argmax(act))  # first maximum wins ties
    win = _peak_window(m, len(act))
    weights = act[win]
    # correctly rounded sums make the result independent of summation order
    total = math.fsum(weights)
    if not total > 0:
        raise DomainError("degenerate activations: no positive peak to decode")
    cents = math.fsum(weights * grid.bin_centers[win]) / total
    return PitchEstimate(cents=cents, hz=cents_to_hz(cents, grid.f_ref), confidence=float(act[m]))


def decode_batch(activations: np.ndarray, grid: CentsGrid | None = None):
    """Vectorized :func:`decode` over rows.

    Returns:
        ``(cents, hz, confidence)`` arrays. Rows without a positive peak get
        NaN cents and Hz.
    """
    grid = grid or CentsGrid.default()
    act = np.asarray(activations, dtype=np.float64)
    if act.ndim != 2 or act.shape[1] != len(grid):
        raise DomainError(f"expected (frames, {len(grid)}) activations, got shape {act.shape}")
    n = act.shape[1]
    m = np.argmax(act, axis=1)
    offsets = np.arange(-DECODE_HALF_WINDOW, DECODE_HALF_WINDOW + 1)
    idx = m[:, None] + offsets[None, :]
    valid = (idx >= 0) & (idx < n)
    idx = np.clip(idx, 0, n - 1)
    weights = np.where(valid, np.take_along_axis(act, idx, axis=1), 0.0)
    total = weights.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        cents = (weights * grid.bin_centers[idx]).sum(axis=1) / total
    cents = np.where(total > 0, cents, np.nan)
    hz = cents_to_hz(cents, grid.f_ref)
    conf = act[np.arange(len(act)), m]
    return cents, np.atleast_1d(hz), conf
