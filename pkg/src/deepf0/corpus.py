"""Dataset directories and the synthetic oracle corpus.

A dataset directory holds ``<name>.wav`` + ``<name>.f0.csv`` pairs and a
``groups.csv`` (``file,group``) naming the artist/speaker/instrument of each
track, which is what the group-disjoint splits key on.
"""
from __future__ import annotations

import csv
import io
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import audioio
from .audioio import AudioClip, LabelTrack
from .errors import ConfigError, DomainError, FormatError
from .noiseharness import SnrSpec, mix_at_snr
from .trainer import FrameDataset

GROUPS_FILE = "groups.csv"
LABEL_SUFFIX = ".f0.csv"


@dataclass
class TrackSpec:
    name: str
    group: str
    f0_start: float
    f0_end: float
    duration: float = 1.0
    harmonics: int = 6
    decay: float = 0.7

    @property
    def kind(self) -> str:
        return "tone" if self.f0_start == self.f0_end else "glide"

    def track(self) -> LabelTrack:
        if self.duration <= 0:
            return LabelTrack([0.0], [self.f0_start])
        return LabelTrack([0.0, self.duration], [self.f0_start, self.f0_end])


def synth_track(spec: TrackSpec) -> tuple[AudioClip, LabelTrack]:
    return audioio.synth_harmonic(spec.track(), spec.duration, spec.harmonics, spec.decay)


def make_corpus_spec(
    n_tracks: int = 40,
    n_groups: int = 8,
    seed: int = 0,
    duration: float = 1.0,
    fmin: float = 80.0,
    fmax: float = 1000.0,
) -> list[TrackSpec]:
    """Tones and glides spread over ``n_groups`` synthetic "speakers".

    Each group has its own timbre (harmonic count and decay). Within a group
    tracks alternate glide, tone, glide, ...; the glides of a group split
    the log-frequency range ``[fmin, fmax]`` into overlapping bands and sweep
    one band each, so every group covers the whole range and a held-out
    group shares the pitch range of the training groups but not the timbre.
    Tones are log-uniform over the range.
    """
    if n_groups < 1 or n_tracks < n_groups:
        raise ConfigError("need at least one track per group")
    rng = np.random.default_rng(seed)
    timbres = [(int(rng.integers(2, 9)), float(rng.uniform(0.5, 0.9))) for _ in range(n_groups)]
    lo, hi = np.log2(fmin), np.log2(fmax)
    sizes = [len(range(g, n_tracks, n_groups)) for g in range(n_groups)]
    specs = []
    for i in range(n_tracks):
        g, j = i % n_groups, i // n_groups
        harmonics, decay = timbres[g]
        if j % 2 == 0:
            n_bands = (sizes[g] + 1) // 2
            width = (hi - lo) / n_bands
            # bands overlap by 10% of their width on each side
            band_lo = max(lo, lo + (j // 2) * width - 0.1 * width)
            band_hi = min(hi, lo + (j // 2 + 1) * width + 0.1 * width)
            a = float(2 ** (band_lo + rng.uniform(0, 0.05) * width))
            b = float(2 ** (band_hi - rng.uniform(0, 0.05) * width))
            if rng.random() < 0.5:
                a, b = b, a
        else:
            a = b = float(2 ** rng.uniform(lo, hi))
        specs.append(TrackSpec(f"track{i:03d}", f"group{g}", round(a, 4), round(b, 4), duration, harmonics, decay))
    return specs


_SPEC_FIELDS = [f.name for f in fields(TrackSpec)]


def write_spec(path, specs: list[TrackSpec]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, _SPEC_FIELDS, lineterminator="\n")
        w.writeheader()
        for s in specs:
            w.writerow(asdict(s))


def read_spec(path) -> list[TrackSpec]:
    with open(path, encoding="utf-8") as fh:
        rows = [r for r in csv.DictReader(line for line in fh if not line.lstrip().startswith("#"))]
    specs = []
    for lineno, r in enumerate(rows, start=2):
        try:
            specs.append(
                TrackSpec(
                    name=r["name"],
                    group=r["group"],
                    f0_start=float(r["f0_start"]),
                    f0_end=float(r["f0_end"]),
                    duration=float(r.get("duration") or 1.0),
                    harmonics=int(r.get("harmonics") or 6),
                    decay=float(r.get("decay") or 0.7),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"{path}:{lineno}: bad track spec ({exc})") from exc
    return specs


def write_dataset(out_dir, specs: list[TrackSpec]) -> list[str]:
    """Synthesize every spec into ``out_dir``; returns the written file stems."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for s in specs:
        f0 = np.array([s.f0_start, s.f0_end])
        if np.any((f0 < audioio.SYNTH_MIN_HZ) | (f0 > audioio.SYNTH_MAX_HZ)):
            raise DomainError(f"{s.name}: f0 outside [{audioio.SYNTH_MIN_HZ}, {audioio.SYNTH_MAX_HZ}] Hz")
    for s in specs:
        clip, labels = synth_track(s)
        audioio.write_wav(out / f"{s.name}.wav", clip)
        audioio.write_labels(out / f"{s.name}{LABEL_SUFFIX}", labels)
    write_groups(out / GROUPS_FILE, {s.name: s.group for s in specs})
    return [s.name for s in specs]


def write_groups(path, groups: dict) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["file", "group"])
    for name, group in groups.items():
        w.writerow([name, group])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_groups(path) -> dict:
    if not os.path.exists(path):
        raise ConfigError(f"missing {path}")
    with open(path, encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"file", "group"} <= set(reader.fieldnames):
            raise ConfigError(f"{path}: header must contain 'file,group'")
        out = {}
        for r in reader:
            name = r["file"].strip()
            if name.endswith(".wav"):
                name = name[:-4]
            out[name] = r["group"].strip()
    return out


@dataclass
class Track:
    name: str
    group: str
    clip: AudioClip
    labels: LabelTrack


def load_dataset_dir(path) -> list[Track]:
    """Read every track listed in ``groups.csv``; raises naming any missing file."""
    root = Path(path)
    if not root.is_dir():
        raise ConfigError(f"dataset directory {root} does not exist")
    groups = read_groups(root / GROUPS_FILE)
    if not groups:
        raise ConfigError(f"{root / GROUPS_FILE} lists no tracks")
    tracks = []
    for name, group in groups.items():
        wav = root / f"{name}.wav"
        lab = root / f"{name}{LABEL_SUFFIX}"
        for p in (wav, lab):
            if not p.exists():
                raise ConfigError(f"missing file {p}")
        clip = audioio.resample_16k(audioio.load_wav(wav))
        tracks.append(Track(name, group, clip, audioio.parse_labels(lab)))
    return tracks


def load_noise_dir(path) -> list[AudioClip]:
    root = Path(path)
    files = sorted(root.glob("*.wav")) if root.is_dir() else [root]
    if not files:
        raise ConfigError(f"no noise WAV files under {root}")
    return [audioio.resample_16k(audioio.load_wav(f)) for f in files]


def corrupt_tracks(tracks: list[Track], noises: list[AudioClip], snr_db: float, seed: int = 0):
    """Mix noise into every track at ``snr_db``.

    Returns:
        ``(noisy tracks, measured SNR per track)``
    """
    from .noiseharness import measure_snr

    out, measured = [], []
    for i, t in enumerate(tracks):
        noise = noises[i % len(noises)]
        mixed = mix_at_snr(t.clip.samples, noise.samples, SnrSpec(snr_db, seed + i))
        measured.append(measure_snr(t.clip.samples, mixed))
        out.append(Track(t.name, t.group, AudioClip(mixed, t.clip.sample_rate), t.labels))
    return out, measured


def frames_from_tracks(tracks: list[Track], frame_step: int = 1) -> FrameDataset:
    """Frame every track; keep every ``frame_step``-th frame."""
    parts = []
    for t in tracks:
        fs = audioio.frame_clip(t.clip, t.labels)
        sel = slice(None, None, frame_step)
        n = len(fs.frames[sel])
        parts.append(
            FrameDataset(fs.frames[sel], fs.labels[sel], np.full(n, t.name, dtype=object), np.full(n, t.group, dtype=object))
        )
    return FrameDataset.concat(parts)


def make_accompaniment(duration: float, seed: int = 0, sample_rate: int = audioio.SAMPLE_RATE) -> AudioClip:
    """Synthetic musical accompaniment: a sequence of random three-note chords.

    Each chord lasts half a second; notes are harmonic tones between 65 Hz
    and 1 kHz with their own timbre.
    """
    rng = np.random.default_rng(seed)
    n = int(round(duration * sample_rate))
    x = np.zeros(n)
    seg = sample_rate // 2
    for start in range(0, n, seg):
        length = min(seg, n - start)
        for _ in range(3):
            f0 = float(2 ** rng.uniform(np.log2(65.0), np.log2(1000.0)))
            harmonics = int(rng.integers(2, 8))
            decay = float(rng.uniform(0.4, 0.9))
            clip, _ = audioio.synth_harmonic(LabelTrack([0.0], [f0]), length / sample_rate, harmonics, decay)
            x[start : start + len(clip)] += clip.samples[: length] * rng.uniform(0.5, 1.0)
    peak = np.max(np.abs(x)) if n else 0.0
    if peak > 0:
        x *= 0.9 / peak
    return AudioClip(x, sample_rate)
