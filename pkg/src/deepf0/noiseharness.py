"""Mixing interference into clean audio at a prescribed SNR."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError

log = logging.getLogger(__name__)

SNR_LEVELS = (20.0, 10.0, 0.0)


@dataclass(frozen=True)
class SnrSpec:
    snr_db: float
    seed: int = 0

    def __post_init__(self):
        if not math.isfinite(self.snr_db):
            raise DomainError(f"SNR must be finite, got {self.snr_db}")


def rms_power(x) -> float:
    """Mean of squared samples (0 for an empty sequence)."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        return 0.0
    return float(np.mean(x * x))


def noise_segment(noise: np.ndarray, length: int, seed: int = 0) -> np.ndarray:
    """Cut ``length`` samples from ``noise`` at a seeded offset, looping if it is short."""
    noise = np.asarray(noise, dtype=np.float64)
    if noise.size == 0:
        raise DomainError("noise is empty")
    offset = int(np.random.default_rng(seed).integers(noise.size))
    return noise[(offset + np.arange(length)) % noise.size]


def noise_gain(signal_power: float, noise_power: float, snr_db: float) -> float:
    """Gain ``alpha`` so that ``P_s / (alpha^2 P_n)`` equals the target SNR."""
    if not signal_power > 0:
        raise DomainError("signal is silent; SNR is undefined")
    if not noise_power > 0:
        raise DomainError("noise is silent; SNR is undefined")
    return math.sqrt(signal_power / (noise_power * 10.0 ** (snr_db / 10.0)))


def mix_at_snr(signal, noise, spec: SnrSpec | float) -> np.ndarray:
    """Return ``signal + alpha * noise_segment`` at the requested SNR.

    Power is measured over the whole utterance and over the exact noise
    segment that gets added, so the achieved SNR matches the target up to
    rounding. The result is not rescaled; samples may leave [-1, 1].
    """
    if not isinstance(spec, SnrSpec):
        spec = SnrSpec(float(spec))
    signal = np.asarray(signal, dtype=np.float64)
    seg = noise_segment(noise, signal.size, spec.seed)
    alpha = noise_gain(rms_power(signal), rms_power(seg), spec.snr_db)
    mixed = signal + alpha * seg
    clipped = int(np.count_nonzero(np.abs(mixed) > 1.0))
    if clipped:
        log.info("mix at %.2f dB: %d samples exceed full scale (left unclipped)", spec.snr_db, clipped)
    return mixed


def measure_snr(clean, mixed) -> float:
    """``10 log10(P_clean / P_residual)``; ``inf`` when the residual is zero."""
    clean = np.asarray(clean, dtype=np.float64)
    mixed = np.asarray(mixed, dtype=np.float64)
    if clean.shape != mixed.shape:
        raise ShapeError(f"length mismatch: {clean.shape} vs {mixed.shape}")
    p_res = rms_power(mixed - clean)
    if p_res == 0:
        return math.inf
    p_clean = rms_power(clean)
    if p_clean == 0:
        return -math.inf
    return 10.0 * math.log10(p_clean / p_res)
