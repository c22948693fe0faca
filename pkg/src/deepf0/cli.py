"""Command-line entry point: ``deepf0 <verb> [options]``.

Verbs: synth, train, predict, eval, inspect, ablate, mix-noise. Global
options (--seed, --config, --out, --threads, --snr) may appear before or
after the verb. Exit codes: 0 success, 2 configuration error, 3 data or
format error, 4 numeric or training error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, audioio, corpus
from . import model as M
from . import trainer as T
from .errors import ConfigError, DeepF0Error, FormatError
from .noiseharness import SnrSpec, measure_snr, mix_at_snr
from .runconfig import RunConfig, load_config

log = logging.getLogger("deepf0")

REPORT_COLUMNS = ["model", "dataset", "rpa_mean", "rpa_std", "rca_mean", "rca_std"]
ABLATION_DILATIONS = [(1,), (1, 2), (1, 2, 4), (1, 2, 4, 8), (1, 2, 4, 8, 16)]


# ---------------------------------------------------------------------------
# manifests and atomic output
# ---------------------------------------------------------------------------

@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    inputs: list
    outputs: list = field(default_factory=list)
    version: str = __version__
    started: str = ""
    wall_seconds: float = 0.0
    extra: dict = field(default_factory=dict)


def atomic_write(path, data) -> None:
    path = os.fspath(path)
    tmp = path + ".tmp"
    mode = "wb" if isinstance(data, bytes) else "w"
    with open(tmp, mode, **({} if mode == "wb" else {"encoding": "utf-8", "newline": ""})) as fh:
        fh.write(data)
    os.replace(tmp, path)


def manifest_path(out) -> Path:
    out = Path(out)
    return out / "manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")


def write_manifest(manifest: RunManifest, out, t0: float) -> Path:
    manifest.wall_seconds = round(time.time() - t0, 3)
    path = manifest_path(out)
    atomic_write(path, json.dumps(asdict(manifest), indent=2, default=str) + "\n")
    return path


def _start(args, command: str, cfg: RunConfig | None, inputs) -> tuple[RunManifest, float]:
    m = RunManifest(
        command=command,
        config=cfg.to_dict() if cfg is not None else {},
        seed=args.seed,
        inputs=[str(p) for p in inputs],
        started=datetime.now(timezone.utc).isoformat(timespec="seconds"),
    )
    return m, time.time()


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _need_out(args) -> Path:
    if args.out is None:
        raise ConfigError(f"{args.verb} needs --out")
    return Path(args.out)


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

def _train_config(cfg: RunConfig, args, **overrides) -> T.TrainConfig:
    s = cfg.train
    levels = _snr_levels(args, allow_many=True)
    kw = dict(
        lr=s.lr,
        patience_epochs=s.patience_epochs,
        batch_size=s.batch_size,
        max_epochs=s.max_epochs,
        batches_per_epoch=s.batches_per_epoch,
        conv_method=s.conv_method,
        seed=args.seed,
        threads=args.threads,
        snr_condition=SnrSpec(levels[0], args.seed) if len(levels) == 1 else None,
    )
    kw.update(overrides)
    return T.TrainConfig(**kw)


def _noise_sources(args, duration: float):
    if args.noise:
        return corpus.load_noise_dir(args.noise), str(args.noise)
    # no recordings given: fall back to the seeded synthetic accompaniment
    return [corpus.make_accompaniment(duration, args.seed)], "synthetic-accompaniment"


def _snr_levels(args, allow_many: bool = False) -> list[float]:
    if args.snr is None:
        return []
    try:
        levels = [float(v) for v in str(args.snr).split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"--snr: expected dB values, got {args.snr!r}") from exc
    if not levels or (len(levels) > 1 and not allow_many):
        raise ConfigError(f"{args.verb} takes exactly one --snr value")
    return levels


def _maybe_corrupt(tracks, args, manifest: RunManifest, allow_many: bool = False):
    """Mix noise into ``tracks`` at each ``--snr`` level.

    Several levels (train only) pool one corrupted copy of every track per
    level; copies keep their group so splits stay disjoint.
    """
    levels = _snr_levels(args, allow_many)
    if not levels:
        return tracks
    longest = max(len(t.clip) for t in tracks) / audioio.SAMPLE_RATE
    noises, source = _noise_sources(args, max(longest, 1.0))
    pooled, report = [], {}
    for level in levels:
        noisy, measured = corpus.corrupt_tracks(tracks, noises, level, args.seed)
        for t, snr in zip(noisy, measured):
            if len(levels) > 1:
                t.name = f"{t.name}@{level:g}dB"
            log.info("%s: mixed at %.4f dB (target %.2f)", t.name, snr, level)
            report[t.name] = round(snr, 6)
        pooled += noisy
    manifest.extra["noise_source"] = source
    manifest.extra["snr_target_db"] = levels if len(levels) > 1 else levels[0]
    manifest.extra["snr_measured_db"] = report
    return pooled


def _group_frames(tracks, step: int) -> dict:
    counts: dict = {}
    for t in tracks:
        n = len(audioio.frame_times(len(t.clip)))
        counts[t.group] = counts.get(t.group, 0) + len(range(0, n, step))
    return counts


def _fold_data(tracks, plan: T.SplitPlan, fold: int, cfg: RunConfig):
    roles = plan.folds[fold]
    pick = lambda role: [t for t in tracks if roles[t.group] == role]
    return (
        corpus.frames_from_tracks(pick("train"), cfg.train.train_frame_step),
        corpus.frames_from_tracks(pick("val"), cfg.train.val_frame_step),
        corpus.frames_from_tracks(pick("test"), 1),
    )


def _check_frame_length(cfg: RunConfig) -> None:
    if cfg.model.frame_length != audioio.FRAME_LENGTH:
        raise ConfigError(
            f"audio commands need frame_length={audioio.FRAME_LENGTH}, config has {cfg.model.frame_length}"
        )


def _folds_to_run(args, n_folds: int) -> list[int]:
    if args.fold is None:
        return list(range(n_folds))
    if not 0 <= args.fold < n_folds:
        raise ConfigError(f"--fold must be in [0, {n_folds}), got {args.fold}")
    return [args.fold]


# ---------------------------------------------------------------------------
# verbs
# ---------------------------------------------------------------------------

def cmd_inspect(args) -> int:
    cfg = load_config(args.config)
    m = cfg.model
    total = M.param_count(m)
    rf = M.receptive_field(m)
    reduction = 100.0 * (1.0 - total / M.CREPE_PARAMS)
    lines = [f"{'tensor':<16} {'shape':<18} {'params':>10}"]
    for name, shape, n in M.layer_table(m):
        lines.append(f"{name:<16} {'x'.join(map(str, shape)):<18} {n:>10}")
    lines += [
        f"total parameters: {total}",
        f"receptive field: {rf} samples (frame length {m.frame_length})",
        f"reduction vs {M.CREPE_PARAMS / 1e6:.1f}M parameters: {reduction:.2f}%",
    ]
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        manifest, t0 = _start(args, "inspect", cfg, [args.config] if args.config else [])
        atomic_write(out / "inspect.txt", text)
        manifest.outputs = [str(out / "inspect.txt")]
        manifest.extra = {"param_count": total, "receptive_field": rf, "reduction_percent": reduction}
        write_manifest(manifest, out, t0)
    if rf > m.frame_length:
        log.error("receptive field %d exceeds the frame length %d", rf, m.frame_length)
        return 2
    return 0


def cmd_synth(args) -> int:
    out = _need_out(args)
    manifest, t0 = _start(args, "synth", None, [args.spec] if args.spec else [])
    if args.spec:
        specs = corpus.read_spec(args.spec)
    else:
        specs = corpus.make_corpus_spec(args.tracks, args.groups, seed=args.seed, duration=args.duration)
    names = corpus.write_dataset(out, specs)
    corpus.write_spec(out / "spec.csv", specs)
    manifest.outputs = [str(out / f"{n}.wav") for n in names] + [str(out / corpus.GROUPS_FILE)]
    manifest.extra["groups"] = sorted({s.group for s in specs})
    manifest.extra["tracks"] = len(specs)
    write_manifest(manifest, out, t0)
    log.info("wrote %d tracks in %d groups to %s", len(specs), len(manifest.extra["groups"]), out)
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    _check_frame_length(cfg)
    out = _need_out(args)
    out.mkdir(parents=True, exist_ok=True)
    manifest, t0 = _start(args, "train", cfg, [args.dataset] + ([args.config] if args.config else []))
    tracks = corpus.load_dataset_dir(args.dataset)
    tracks = _maybe_corrupt(tracks, args, manifest, allow_many=True)
    n_folds = args.folds if args.folds is not None else cfg.train.folds
    plan = T.make_folds(_group_frames(tracks, cfg.train.train_frame_step), n_folds, args.seed)
    manifest.extra["folds"] = plan.folds
    results = {}
    for fold in _folds_to_run(args, n_folds):
        train_data, val_data, test_data = _fold_data(tracks, plan, fold, cfg)
        params = M.build(cfg.model, args.seed)
        best, history = T.train(params, train_data, val_data, _train_config(cfg, args))
        M.save_weights(best, out / f"fold{fold}.weights")
        atomic_write(out / f"fold{fold}.history.csv", history.to_csv())
        res = T.evaluate(best, test_data, cfg.train.conv_method)
        results[fold] = {
            "best_epoch": history.best_epoch,
            "epochs": history.epochs,
            "stopped_early": history.stopped_early,
            "test_rpa": res.rpa,
            "test_rca": res.rca,
        }
        manifest.outputs += [str(out / f"fold{fold}.weights"), str(out / f"fold{fold}.history.csv")]
        log.info("fold %d: test RPA %.4f RCA %.4f (best epoch %d)", fold, res.rpa, res.rca, history.best_epoch)
    manifest.extra["results"] = results
    write_manifest(manifest, out, t0)
    return 0


def _predict_rows(params, clip: audioio.AudioClip, method: str) -> list:
    fs = audioio.frame_clip(audioio.resample_16k(clip))
    if len(fs) == 0:
        return []
    hz, conf = T.predict_hz(params, fs.frames, method=method)
    return [(f"{t:.2f}", f"{h:.4f}", f"{c:.6f}") for t, h, c in zip(fs.centers, hz, conf)]


def cmd_predict(args) -> int:
    cfg = load_config(args.config)
    params = M.load_weights(args.weights)
    out = _need_out(args)
    single_file = len(args.audio) == 1 and out.suffix == ".csv"
    if not single_file:
        out.mkdir(parents=True, exist_ok=True)
    manifest, t0 = _start(args, "predict", RunConfig(params.config, cfg.train), [args.weights] + list(args.audio))
    for path in args.audio:
        clip = audioio.load_wav(path)
        rows = _predict_rows(params, clip, cfg.train.conv_method)
        target = out if single_file else out / (Path(path).stem + ".f0.csv")
        atomic_write(target, _csv_text(["time_sec", "f0_hz", "confidence"], rows))
        manifest.outputs.append(str(target))
    write_manifest(manifest, out, t0)
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    out = _need_out(args)
    out.mkdir(parents=True, exist_ok=True)
    if args.oracle:
        params, model_name = None, "oracle"
    elif args.weights is None:
        raise ConfigError("eval needs --weights or --oracle")
    else:
        params, model_name = M.load_weights(args.weights), Path(args.weights).name
    snapshot = RunConfig(params.config if params is not None else cfg.model, cfg.train)
    inputs = [args.dataset] + ([args.weights] if args.weights else [])
    manifest, t0 = _start(args, "eval", snapshot, inputs)
    tracks = corpus.load_dataset_dir(args.dataset)
    if args.fold is not None:
        n_folds = args.folds if args.folds is not None else cfg.train.folds
        plan = T.make_folds(_group_frames(tracks, cfg.train.train_frame_step), n_folds, args.seed)
        _folds_to_run(args, n_folds)
        tracks = [t for t in tracks if plan.folds[args.fold][t.group] == "test"]
    tracks = _maybe_corrupt(tracks, args, manifest)
    data = corpus.frames_from_tracks(tracks, 1)
    if params is None:
        est = np.nan_to_num(data.f0, nan=0.0)
    else:
        _check_frame_length(snapshot)
        est, _ = T.predict_hz(params, data.frames, method=cfg.train.conv_method)
    res = T.score(data.f0, est, data.track)
    stats = res.track_stats()
    row = [model_name, Path(args.dataset).name] + [f"{stats[k]:.6f}" for k in REPORT_COLUMNS[2:]]
    atomic_write(out / "report.csv", _csv_text(REPORT_COLUMNS, [row]))
    per_track = [(name, f"{a:.6f}", f"{b:.6f}") for name, (a, b) in res.per_track.items()]
    atomic_write(out / "tracks.csv", _csv_text(["track", "rpa", "rca"], per_track))
    sys.stdout.write(
        f"{model_name} on {Path(args.dataset).name}: "
        f"RPA {100 * stats['rpa_mean']:.2f} +/- {100 * stats['rpa_std']:.2f}, "
        f"RCA {100 * stats['rca_mean']:.2f} +/- {100 * stats['rca_std']:.2f}\n"
    )
    manifest.outputs = [str(out / "report.csv"), str(out / "tracks.csv")]
    manifest.extra.update({"pooled_rpa": res.rpa, "pooled_rca": res.rca})
    write_manifest(manifest, out, t0)
    return 0


def cmd_mix_noise(args) -> int:
    if args.snr is None:
        raise ConfigError("mix-noise needs --snr")
    level = _snr_levels(args)[0]
    out = _need_out(args)
    src = Path(args.audio)
    manifest, t0 = _start(args, "mix-noise", None, [args.audio, args.noise or "synthetic-accompaniment"])
    if (src / corpus.GROUPS_FILE).exists():
        tracks = corpus.load_dataset_dir(src)
        noisy = _maybe_corrupt(tracks, args, manifest)
        out.mkdir(parents=True, exist_ok=True)
        for t in noisy:
            audioio.write_wav(out / f"{t.name}.wav", t.clip, float32=True)
            audioio.write_labels(out / f"{t.name}{corpus.LABEL_SUFFIX}", t.labels)
            manifest.outputs.append(str(out / f"{t.name}.wav"))
        corpus.write_groups(out / corpus.GROUPS_FILE, {t.name: t.group for t in noisy})
    else:
        clip = audioio.resample_16k(audioio.load_wav(src))
        noises, source = _noise_sources(args, max(clip.duration, 1.0))
        mixed = mix_at_snr(clip.samples, noises[0].samples, SnrSpec(level, args.seed))
        snr = measure_snr(clip.samples, mixed)
        log.info("%s: mixed at %.4f dB (target %.2f)", src.name, snr, level)
        audioio.write_wav(out, audioio.AudioClip(mixed, clip.sample_rate), float32=True)
        manifest.outputs = [str(out)]
        manifest.extra.update({"noise_source": source, "snr_target_db": level, "snr_measured_db": snr})
    write_manifest(manifest, out, t0)
    return 0


def _dilation_sets(text) -> list[tuple]:
    """Parse ``"1;1,2,4,8"`` into dilation tuples; None gives the default sweep."""
    if text is None:
        return ABLATION_DILATIONS
    try:
        sets = [tuple(int(d) for d in part.split(",")) for part in text.split(";") if part.strip()]
    except ValueError as exc:
        raise ConfigError(f"--dilation-sets: expected e.g. '1;1,2,4,8', got {text!r}") from exc
    if not sets or any(d < 1 for ds in sets for d in ds):
        raise ConfigError(f"--dilation-sets: need positive dilations, got {text!r}")
    return sets


def cmd_ablate(args) -> int:
    """Train every variant for the same number of epochs on one fold and score its test split."""
    cfg = load_config(args.config)
    _check_frame_length(cfg)
    out = _need_out(args)
    out.mkdir(parents=True, exist_ok=True)
    manifest, t0 = _start(args, "ablate", cfg, [args.dataset])
    tracks = corpus.load_dataset_dir(args.dataset)
    n_folds = args.folds if args.folds is not None else cfg.train.folds
    plan = T.make_folds(_group_frames(tracks, cfg.train.train_frame_step), n_folds, args.seed)
    fold = args.fold if args.fold is not None else 0
    _folds_to_run(argparse.Namespace(fold=fold), n_folds)
    train_data, val_data, test_data = _fold_data(tracks, plan, fold, cfg)
    epochs = args.epochs if args.epochs is not None else cfg.train.max_epochs
    # patience equal to the budget: every variant sees exactly `epochs` epochs
    tcfg = _train_config(cfg, args, max_epochs=epochs, patience_epochs=epochs)

    def run(model_cfg):
        best, history = T.train(M.build(model_cfg, args.seed), train_data, val_data, tcfg)
        res = T.evaluate(best, test_data, cfg.train.conv_method)
        return res, history

    base = cfg.model
    fig_rows = []
    for dil in _dilation_sets(args.dilation_sets):
        mc = base.with_(dilations=dil)
        res, hist = run(mc)
        fig_rows.append(
            ["-".join(map(str, dil)), M.receptive_field(mc), M.param_count(mc), f"{res.rpa:.6f}", f"{res.rca:.6f}", hist.best_epoch]
        )
        log.info("dilations %s: RPA %.4f RCA %.4f", dil, res.rpa, res.rca)
    header = ["dilations", "receptive_field", "params", "rpa", "rca", "best_epoch"]
    atomic_write(out / "dilation_ablation.csv", _csv_text(header, fig_rows))

    manifest.outputs = [str(out / "dilation_ablation.csv")]
    table_rows = []
    variants = [] if args.no_components else [
        ("full", base),
        ("no_residual", base.with_(use_residual=False)),
        ("dropout", base.with_(use_dropout=True)),
    ]
    for name, mc in variants:
        res, hist = run(mc)
        table_rows.append([name, mc.use_residual, mc.use_dropout, f"{res.rpa:.6f}", f"{res.rca:.6f}", hist.best_epoch])
        log.info("%s: RPA %.4f RCA %.4f", name, res.rpa, res.rca)
    if variants:
        header = ["variant", "use_residual", "use_dropout", "rpa", "rca", "best_epoch"]
        atomic_write(out / "component_ablation.csv", _csv_text(header, table_rows))
        manifest.outputs.append(str(out / "component_ablation.csv"))
    manifest.extra.update({"fold": fold, "epochs": epochs})
    write_manifest(manifest, out, t0)
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _global_options(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--seed", type=int, default=d(0), help="random seed (default 0)")
    parser.add_argument("--config", default=d(None), help="key=value config file or run manifest")
    parser.add_argument("--out", default=d(None), help="output file or directory")
    parser.add_argument("--threads", type=int, default=d(1), help="worker threads for batch gradients")
    parser.add_argument(
        "--snr", default=d(None), help="corrupt inputs with noise at this SNR in dB (train: comma list pools levels)"
    )
    parser.add_argument("-v", "--verbose", action="store_true", default=d(False), help="debug logging")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deepf0", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _global_options(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_options(common, suppress=True)
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("inspect", parents=[common], help="parameter count, receptive field, layer table")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("synth", parents=[common], help="render a synthetic dataset")
    p.add_argument("spec", nargs="?", help="track spec CSV; omitted: generate tones and glides")
    p.add_argument("--tracks", type=int, default=40)
    p.add_argument("--groups", type=int, default=8)
    p.add_argument("--duration", type=float, default=1.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train per fold with early stopping")
    p.add_argument("dataset")
    p.add_argument("--fold", type=int, help="train this fold only (default: every fold)")
    p.add_argument("--folds", type=int, help="number of folds (default from config, 5)")
    p.add_argument("--noise", help="noise WAV file or directory used with --snr")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[common], help="per-frame f0 CSV for audio files")
    p.add_argument("weights")
    p.add_argument("audio", nargs="+")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", parents=[common], help="RPA/RCA report on a dataset")
    p.add_argument("dataset")
    p.add_argument("--weights")
    p.add_argument("--oracle", action="store_true", help="score the labels against themselves")
    p.add_argument("--fold", type=int, help="score only the test groups of this fold")
    p.add_argument("--folds", type=int)
    p.add_argument("--noise", help="noise WAV file or directory used with --snr")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("mix-noise", parents=[common], help="mix noise into a WAV file or dataset at --snr")
    p.add_argument("audio", help="WAV file or dataset directory")
    p.add_argument("--noise", help="noise WAV file or directory (default: synthetic accompaniment)")
    p.set_defaults(func=cmd_mix_noise)

    p = sub.add_parser("ablate", parents=[common], help="dilation and component ablations")
    p.add_argument("dataset")
    p.add_argument("--epochs", type=int, help="epoch budget per variant (default max_epochs)")
    p.add_argument("--dilation-sets", help="';'-separated dilation lists, e.g. '1;1,2,4,8' (default: 1 up to 1,2,4,8,16)")
    p.add_argument("--no-components", action="store_true", help="skip the residual/dropout variants")
    p.add_argument("--fold", type=int)
    p.add_argument("--folds", type=int)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.threads < 1:
        log.error("--threads must be >= 1")
        return 2
    try:
        return args.func(args)
    except DeepF0Error as exc:
        log.error("%s", exc)
        return exc.exit_code
    except FileNotFoundError as exc:
        log.error("%s", exc)
        return FormatError.exit_code


if __name__ == "__main__":
    sys.exit(main())
