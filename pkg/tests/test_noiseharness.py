import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepf0.errors import DomainError
from deepf0.noiseharness import SnrSpec, measure_snr, mix_at_snr, noise_gain, noise_segment, rms_power


def test_rms_power():
    assert rms_power(np.zeros(10)) == 0.0
    assert rms_power(np.full(10, 0.5)) == 0.25
    t = np.arange(160000) / 16000
    assert rms_power(np.sin(2 * np.pi * 100 * t)) == pytest.approx(0.5, abs=1e-6)


def test_gain_examples():
    assert noise_gain(1.0, 1.0, 0.0) == 1.0
    assert noise_gain(1.0, 1.0, 20.0) == pytest.approx(0.1, abs=1e-15)


def test_equal_power_mix_is_plain_sum(rng):
    s = rng.choice([-0.5, 0.5], 1000)
    n = rng.choice([-0.5, 0.5], 1000)
    np.testing.assert_allclose(mix_at_snr(s, n, SnrSpec(0.0, seed=3)), s + noise_segment(n, 1000, 3))


def test_silent_inputs():
    with pytest.raises(DomainError):
        mix_at_snr(np.ones(10), np.zeros(10), 10.0)
    with pytest.raises(DomainError):
        mix_at_snr(np.zeros(10), np.ones(10), 10.0)


def test_infinite_snr_sentinel():
    x = np.ones(5)
    assert measure_snr(x, x) == math.inf


def test_round_trip_10db(rng):
    s = rng.standard_normal(8000)
    n = rng.standard_normal(5000)
    assert measure_snr(s, mix_at_snr(s, n, 10.0)) == pytest.approx(10.0, abs=0.01)


def test_doubling_gain_costs_6db(rng):
    s = rng.standard_normal(4000)
    seg = noise_segment(rng.standard_normal(4000), 4000, 0)
    a = noise_gain(rms_power(s), rms_power(seg), 12.0)
    drop = measure_snr(s, s + a * seg) - measure_snr(s, s + 2 * a * seg)
    assert drop == pytest.approx(20 * math.log10(2), abs=1e-9)


def test_short_noise_is_looped():
    seg = noise_segment(np.arange(3.0), 7, seed=0)
    assert len(seg) == 7
    # consecutive samples follow the loop order
    assert all((b - a) % 3 == 1 for a, b in zip(seg[:-1], seg[1:]))


def test_mix_is_linear_in_noise(rng):
    s = rng.standard_normal(2000)
    n = rng.standard_normal(3000)
    spec = SnrSpec(7.5, seed=11)
    seg = noise_segment(n, 2000, 11)
    alpha = noise_gain(rms_power(s), rms_power(seg), 7.5)
    assert np.array_equal(mix_at_snr(s, n, spec), s + alpha * seg)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31), snr=st.floats(-5, 30))
def test_round_trip_property(seed, snr):
    rng = np.random.default_rng(seed)
    s = rng.standard_normal(int(rng.integers(100, 3000)))
    n = rng.uniform(-1, 1, int(rng.integers(50, 4000)))
    assert abs(measure_snr(s, mix_at_snr(s, n, SnrSpec(snr, seed))) - snr) < 0.01


def test_nonfinite_snr():
    with pytest.raises(DomainError):
        SnrSpec(float("nan"))
