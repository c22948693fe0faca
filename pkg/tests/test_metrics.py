import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepf0.errors import ShapeError, UndefinedMetricError
from deepf0.metrics import EvalPair, chroma_distance, raw_chroma_accuracy, raw_pitch_accuracy


def brute_force_scores(ref, est, voiced, thr=50.0):
    hits_p = hits_c = n = 0
    for r, e, v in zip(ref, est, voiced):
        if not v:
            continue
        n += 1
        d = e - r
        if abs(d) <= thr:
            hits_p += 1
        best = min(abs(d - 1200.0 * k) for k in range(-6, 7))
        if best <= thr:
            hits_c += 1
    return hits_p / n, hits_c / n


def pair(errors, base=5000.0):
    errors = np.asarray(errors, float)
    ref = np.full(len(errors), base)
    return EvalPair(ref, ref + errors, np.ones(len(errors), bool))


def test_rpa_examples():
    assert raw_pitch_accuracy(pair([0, 0, 0])) == 1.0
    assert raw_pitch_accuracy(pair([1200] * 4)) == 0.0
    assert raw_pitch_accuracy(pair([0, 49, 51])) == pytest.approx(2 / 3)


def test_rca_examples():
    assert raw_chroma_accuracy(pair([1200] * 4)) == 1.0
    assert raw_chroma_accuracy(pair([600] * 4)) == 0.0
    np.testing.assert_allclose(chroma_distance(np.array([0, 1249, 1151])), [0, 49, 49])
    assert raw_chroma_accuracy(pair([0, 1249, 1151])) == 1.0


def test_no_voiced_frames():
    p = EvalPair(np.zeros(3), np.zeros(3), np.zeros(3, bool))
    with pytest.raises(UndefinedMetricError):
        raw_pitch_accuracy(p)
    with pytest.raises(UndefinedMetricError):
        raw_chroma_accuracy(p)


def test_length_mismatch():
    with pytest.raises(ShapeError):
        EvalPair(np.zeros(3), np.zeros(4), np.ones(3, bool))


def test_from_hz_voicing():
    p = EvalPair.from_hz([0.0, 440.0, 220.0], [300.0, 440.0, 0.0])
    assert p.ref_voiced.tolist() == [False, True, True]
    # missing estimate on a voiced frame counts as a miss
    assert raw_pitch_accuracy(p) == 0.5
    assert raw_chroma_accuracy(p) == 0.5


def test_agreement_with_brute_force(rng):
    for _ in range(1000):
        n = int(rng.integers(1, 30))
        ref = rng.uniform(2000, 9000, n)
        est = ref + rng.choice([0, 1200, -1200, 2400, 600]) + rng.normal(0, 60, n)
        voiced = rng.random(n) < 0.8
        voiced[0] = True
        p = EvalPair(ref, est, voiced)
        assert (raw_pitch_accuracy(p), raw_chroma_accuracy(p)) == brute_force_scores(ref, est, voiced)


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_rca_at_least_rpa(seed):
    rng = np.random.default_rng(seed)
    n = 20
    ref = rng.uniform(2000, 9000, n)
    p = EvalPair(ref, ref + rng.normal(0, 800, n), rng.random(n) < 0.7)
    if not p.ref_voiced.any():
        return
    assert raw_chroma_accuracy(p) >= raw_pitch_accuracy(p)


def test_unvoiced_frames_ignored(rng):
    ref = rng.uniform(2000, 9000, 10)
    voiced = np.array([True] * 5 + [False] * 5)
    est = ref.copy()
    a = EvalPair(ref, est, voiced)
    est2 = est.copy()
    est2[5:] += rng.normal(0, 3000, 5)
    b = EvalPair(ref, est2, voiced)
    assert raw_pitch_accuracy(a) == raw_pitch_accuracy(b) == 1.0
    assert raw_chroma_accuracy(a) == raw_chroma_accuracy(b)


def test_octave_shift_changes_rpa_not_rca(rng):
    ref = rng.uniform(3000, 8000, 40)
    est = ref + rng.normal(0, 30, 40)
    voiced = np.ones(40, bool)
    base = EvalPair(ref, est, voiced)
    shifted = EvalPair(ref, est + 1200, voiced)
    assert raw_chroma_accuracy(shifted) == raw_chroma_accuracy(base)
    assert raw_pitch_accuracy(shifted) != raw_pitch_accuracy(base)
