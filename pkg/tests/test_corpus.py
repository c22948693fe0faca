import numpy as np
import pytest

from deepf0 import audioio, corpus
from deepf0.errors import ConfigError
from deepf0.noiseharness import rms_power


def test_spec_groups_mix_tones_and_glides():
    specs = corpus.make_corpus_spec(40, 8, seed=0)
    assert len(specs) == 40
    kinds = {}
    for s in specs:
        kinds.setdefault(s.group, set()).add(s.kind)
        assert 80.0 <= min(s.f0_start, s.f0_end) and max(s.f0_start, s.f0_end) <= 1000.0
    assert len(kinds) == 8
    assert all(k == {"tone", "glide"} for k in kinds.values())
    # timbre is a property of the group
    for g in kinds:
        timbres = {(s.harmonics, s.decay) for s in specs if s.group == g}
        assert len(timbres) == 1


def test_spec_deterministic():
    assert corpus.make_corpus_spec(seed=4) == corpus.make_corpus_spec(seed=4)
    assert corpus.make_corpus_spec(seed=4) != corpus.make_corpus_spec(seed=5)


def test_spec_file_round_trip(tmp_path):
    specs = corpus.make_corpus_spec(6, 3, seed=2)
    corpus.write_spec(tmp_path / "s.csv", specs)
    assert corpus.read_spec(tmp_path / "s.csv") == specs


def test_bad_spec_row(tmp_path):
    (tmp_path / "s.csv").write_text("name,group,f0_start,f0_end\nx,g,abc,100\n")
    with pytest.raises(ConfigError, match=":2:"):
        corpus.read_spec(tmp_path / "s.csv")


def test_dataset_round_trip(tmp_path):
    specs = corpus.make_corpus_spec(4, 2, seed=1)
    corpus.write_dataset(tmp_path, specs)
    tracks = corpus.load_dataset_dir(tmp_path)
    assert [t.name for t in tracks] == [s.name for s in specs]
    assert [t.group for t in tracks] == [s.group for s in specs]
    for t, s in zip(tracks, specs):
        ref, labels = corpus.synth_track(s)
        # PCM16 storage: within half a quantization step
        assert np.max(np.abs(t.clip.samples - ref.samples)) <= 0.5 / 32768 + 1e-12
        np.testing.assert_allclose(t.labels.f0, labels.f0, rtol=1e-9)


def test_missing_groups_file(tmp_path):
    with pytest.raises(ConfigError, match="groups.csv"):
        corpus.load_dataset_dir(tmp_path)


def test_frames_from_tracks_step():
    s = corpus.TrackSpec("a", "g", 200.0, 200.0)
    t = corpus.Track(s.name, s.group, *corpus.synth_track(s))
    full = corpus.frames_from_tracks([t], 1)
    every4 = corpus.frames_from_tracks([t], 4)
    assert len(full) == 101 and len(every4) == 26
    assert np.array_equal(every4.frames, full.frames[::4])
    assert set(full.group) == {"g"}


def test_corrupt_tracks_hits_target():
    specs = corpus.make_corpus_spec(5, 5, seed=0)
    tracks = [corpus.Track(s.name, s.group, *corpus.synth_track(s)) for s in specs]
    noise = [corpus.make_accompaniment(1.0, seed=3)]
    noisy, measured = corpus.corrupt_tracks(tracks, noise, 10.0, seed=1)
    assert np.all(np.abs(np.array(measured) - 10.0) < 0.01)
    assert all(n.labels is t.labels for n, t in zip(noisy, tracks))


def test_accompaniment():
    a = corpus.make_accompaniment(2.0, seed=7)
    assert len(a) == 32000
    assert np.max(np.abs(a.samples)) == pytest.approx(0.9)
    assert np.array_equal(a.samples, corpus.make_accompaniment(2.0, seed=7).samples)
    # every half-second chord carries energy
    assert all(rms_power(a.samples[i : i + 8000]) > 1e-3 for i in range(0, 32000, 8000))
    assert len(corpus.make_accompaniment(0.0)) == 0
