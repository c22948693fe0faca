"""Cross-validation splits, mini-batch training with early stopping, evaluation."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from . import numkernels as nk
from .errors import ConfigError, TrainingError, UndefinedMetricError
from .metrics import EvalPair, raw_chroma_accuracy, raw_pitch_accuracy
from .noiseharness import SnrSpec
from .pitchcodec import CentsGrid, decode_batch, make_grid, make_target

log = logging.getLogger(__name__)

ROLES = ("train", "val", "test")


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass
class FrameDataset:
    """Frames pooled from many tracks.

    ``f0`` holds the per-frame reference in Hz: 0 for unvoiced, NaN for
    frames without an annotation.
    """

    frames: np.ndarray
    f0: np.ndarray
    track: np.ndarray
    group: np.ndarray

    def __post_init__(self):
        n = len(self.frames)
        self.f0 = np.asarray(self.f0, dtype=np.float64)
        self.track = np.asarray(self.track)
        self.group = np.asarray(self.group)
        if not (len(self.f0) == len(self.track) == len(self.group) == n):
            raise ConfigError("dataset columns have different lengths")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def voiced(self) -> np.ndarray:
        return np.nan_to_num(self.f0, nan=0.0) > 0

    def subset(self, mask_or_idx) -> "FrameDataset":
        return FrameDataset(
            self.frames[mask_or_idx], self.f0[mask_or_idx], self.track[mask_or_idx], self.group[mask_or_idx]
        )

    def in_groups(self, groups) -> "FrameDataset":
        return self.subset(np.isin(self.group, list(groups)))

    @classmethod
    def concat(cls, parts: list["FrameDataset"]) -> "FrameDataset":
        if not parts:
            return cls(np.zeros((0, 0), np.float32), np.zeros(0), np.zeros(0, str), np.zeros(0, str))
        return cls(
            np.concatenate([p.frames for p in parts]),
            np.concatenate([p.f0 for p in parts]),
            np.concatenate([p.track for p in parts]),
            np.concatenate([p.group for p in parts]),
        )


def grid_for(config: M.DeepF0Config) -> CentsGrid:
    return CentsGrid.default() if config.bins == 360 else make_grid(config.bins)


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

@dataclass
class SplitPlan:
    folds: list[dict]
    seed: int = 0

    def groups(self, fold: int, role: str) -> list:
        return sorted(g for g, r in self.folds[fold].items() if r == role)


def make_folds(group_frames: dict, n_folds: int = 5, seed: int = 0) -> SplitPlan:
    """Group-disjoint train/val/test plan, roughly 60/20/20 by frame count.

    Groups are dealt greedily (largest first, seeded tie order) into
    ``n_folds`` buckets of near-equal frame count. Fold ``f`` tests on bucket
    ``f``, validates on bucket ``f + 1`` and trains on the rest.
    """
    if n_folds < 3:
        raise ConfigError(f"need at least 3 folds, got {n_folds}")
    if len(group_frames) < n_folds:
        raise ConfigError(f"{n_folds} folds need at least {n_folds} groups, got {len(group_frames)}")
    rng = np.random.default_rng(seed)
    names = sorted(group_frames)
    order = rng.permutation(len(names))
    # stable sort keeps the seeded order among equal sizes
    order = sorted(order, key=lambda i: -group_frames[names[i]])
    load = [0] * n_folds
    bucket_of = {}
    for i in order:
        b = min(range(n_folds), key=lambda k: (load[k], k))
        bucket_of[names[i]] = b
        load[b] += group_frames[names[i]]
    folds = []
    for f in range(n_folds):
        roles = {}
        for g in names:
            b = bucket_of[g]
            roles[g] = "test" if b == f else "val" if b == (f + 1) % n_folds else "train"
        folds.append(roles)
    return SplitPlan(folds, seed)


# ---------------------------------------------------------------------------
# early stopping
# ---------------------------------------------------------------------------

class EarlyStopper:
    """Patience automaton over per-epoch validation scores (1-based epochs)."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -math.inf
        self.best_epoch = 0
        self.epoch = 0

    def update(self, score: float) -> bool:
        """Record the next epoch's score; return True when training should stop."""
        self.epoch += 1
        if score > self.best:
            self.best = score
            self.best_epoch = self.epoch
        return self.epoch - self.best_epoch >= self.patience


def early_stop_epoch(scores, patience: int, max_epochs: int | None = None) -> tuple[int, int, bool]:
    """Replay :class:`EarlyStopper` over a score sequence.

    Returns:
        ``(stop_epoch, best_epoch, stopped_early)``
    """
    stopper = EarlyStopper(patience)
    limit = len(scores) if max_epochs is None else min(max_epochs, len(scores))
    for e in range(limit):
        if stopper.update(scores[e]):
            return stopper.epoch, stopper.best_epoch, True
    return stopper.epoch, stopper.best_epoch, False


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    lr: float = 2e-4
    patience_epochs: int = 32
    batch_size: int = 32
    max_epochs: int = 500
    seed: int = 0
    snr_condition: SnrSpec | None = None
    threads: int = 1
    conv_method: str = "auto"
    # None means one full pass per epoch; otherwise a fixed number of
    # batches drawn from a running shuffle of the training frames
    batches_per_epoch: int | None = None

    def __post_init__(self):
        if self.batches_per_epoch is not None and self.batches_per_epoch < 1:
            raise ConfigError("batches_per_epoch must be positive")
        if self.lr <= 0 or self.patience_epochs < 1 or self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("lr, patience_epochs, batch_size and max_epochs must be positive")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_rpa: list = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False
    optimizer_steps: int = 0

    @property
    def epochs(self) -> int:
        return len(self.val_rpa)

    def to_csv(self) -> str:
        rows = ["epoch,train_loss,val_rpa"]
        rows += [f"{i},{l:.8f},{v:.8f}" for i, (l, v) in enumerate(zip(self.train_loss, self.val_rpa), 1)]
        return "\n".join(rows) + "\n"


def _batch_grads(params, frames, targets, method, rng, threads):
    if threads == 1 or len(frames) < 2 * threads:
        return M.loss_and_grads(params, frames, targets, method, rng)
    chunks = np.array_split(np.arange(len(frames)), threads)
    seeds = rng.integers(2**32, size=len(chunks)) if rng is not None else [None] * len(chunks)

    def work(args):
        idx, s = args
        sub_rng = np.random.default_rng(s) if s is not None else None
        return len(idx), M.loss_and_grads(params, frames[idx], targets[idx], method, sub_rng)

    with ThreadPoolExecutor(threads) as pool:
        results = list(pool.map(work, zip(chunks, seeds)))
    # single accumulation point, fixed chunk order
    total = len(frames)
    loss = sum(n * r[0] for n, r in results) / total
    grads = {k: sum(n * r[1][k] for n, r in results) / total for k in params.tensors}
    return loss, {k: v.astype(params.dtype, copy=False) for k, v in grads.items()}


def predict_hz(params: M.ModelParams, frames: np.ndarray, chunk: int = 64, method: str = "auto"):
    """Forward + decode in chunks. Returns ``(hz, confidence)``."""
    grid = grid_for(params.config)
    hz = np.zeros(len(frames))
    conf = np.zeros(len(frames))
    for start in range(0, len(frames), chunk):
        act = M.forward(params, frames[start : start + chunk], method)
        _, h, c = decode_batch(act, grid)
        hz[start : start + chunk] = h
        conf[start : start + chunk] = c
    return hz, conf


def validation_rpa(params: M.ModelParams, data: FrameDataset, method: str = "auto") -> float:
    voiced = data.subset(data.voiced)
    est, _ = predict_hz(params, voiced.frames, method=method)
    return raw_pitch_accuracy(EvalPair.from_hz(voiced.f0, est))


class _ShuffleStream:
    """Hands out batches from successive permutations of ``range(n)``."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self.order = np.zeros(0, dtype=np.int64)
        self.pos = 0
        self.last_sizes: list[int] = []

    def _take(self, k: int) -> np.ndarray:
        out = []
        while k > 0:
            if self.pos >= len(self.order):
                self.order = self.rng.permutation(self.n)
                self.pos = 0
            chunk = self.order[self.pos : self.pos + k]
            self.pos += len(chunk)
            k -= len(chunk)
            out.append(chunk)
        return np.sort(np.concatenate(out))

    def epoch(self, batch_size: int, n_batches: int | None):
        self.last_sizes = []
        if n_batches is None:
            # a plain pass: fresh permutation, last batch may be short
            order = self.rng.permutation(self.n)
            for start in range(0, self.n, batch_size):
                idx = np.sort(order[start : start + batch_size])
                self.last_sizes.append(len(idx))
                yield idx
            return
        for _ in range(n_batches):
            idx = self._take(min(batch_size, self.n))
            self.last_sizes.append(len(idx))
            yield idx


def train(
    params: M.ModelParams,
    train_data: FrameDataset,
    val_data: FrameDataset,
    config: TrainConfig,
    on_epoch=None,
) -> tuple[M.ModelParams, TrainHistory]:
    """Train with BCE + Adam; stop once validation RPA stalls for ``patience_epochs``.

    Unvoiced and unlabeled frames are skipped. ``params`` is updated in
    place; the returned parameters are a copy taken at the best epoch.
    """
    tr = train_data.subset(train_data.voiced)
    va = val_data.subset(val_data.voiced)
    if len(tr) == 0:
        raise ConfigError("training set has no voiced frames")
    if len(va) == 0:
        raise ConfigError("validation set has no voiced frames")
    grid = grid_for(params.config)
    targets = make_target(tr.f0, grid).astype(params.dtype)
    rng = np.random.default_rng(config.seed)
    state = nk.AdamState(lr=config.lr)
    stopper = EarlyStopper(config.patience_epochs)
    history = TrainHistory()
    best = params.copy()

    stream = _ShuffleStream(len(tr), rng)
    for epoch in range(1, config.max_epochs + 1):
        losses = []
        for idx in stream.epoch(config.batch_size, config.batches_per_epoch):
            loss, grads = _batch_grads(params, tr.frames[idx], targets[idx], config.conv_method, rng, config.threads)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite training loss at epoch {epoch}", epoch)
            try:
                nk.adam_step(params.tensors, grads, state)
            except ArithmeticError as exc:
                raise TrainingError(f"epoch {epoch}: {exc}", epoch) from exc
            losses.append(loss * len(idx))
        train_loss = float(sum(losses) / sum(stream.last_sizes))
        rpa = validation_rpa(params, va, config.conv_method)
        history.train_loss.append(train_loss)
        history.val_rpa.append(rpa)
        stop = stopper.update(rpa)
        if stopper.best_epoch == epoch:
            best = params.copy()
        log.info("epoch %d: loss %.5f val_rpa %.4f (best %.4f @ %d)", epoch, train_loss, rpa, stopper.best, stopper.best_epoch)
        if on_epoch is not None:
            on_epoch(epoch, train_loss, rpa)
        if stop:
            history.stopped_early = True
            break
    history.best_epoch = stopper.best_epoch
    history.optimizer_steps = state.step_count
    return best, history


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalResult:
    rpa: float
    rca: float
    est_hz: np.ndarray
    ref_hz: np.ndarray
    per_track: dict

    def track_stats(self) -> dict:
        """Mean and population std of the per-track metrics."""
        rpas = np.array([v[0] for v in self.per_track.values()])
        rcas = np.array([v[1] for v in self.per_track.values()])
        return {
            "rpa_mean": float(rpas.mean()),
            "rpa_std": float(rpas.std()),
            "rca_mean": float(rcas.mean()),
            "rca_std": float(rcas.std()),
        }


def score(ref_hz, est_hz, tracks) -> EvalResult:
    """Pooled and per-track RPA/RCA for precomputed estimates."""
    ref_hz = np.nan_to_num(np.asarray(ref_hz, dtype=np.float64), nan=0.0)
    est_hz = np.asarray(est_hz, dtype=np.float64)
    tracks = np.asarray(tracks)
    pair = EvalPair.from_hz(ref_hz, est_hz)
    per_track = {}
    for name in dict.fromkeys(tracks.tolist()):
        sel = tracks == name
        p = EvalPair.from_hz(ref_hz[sel], est_hz[sel])
        try:
            per_track[name] = (raw_pitch_accuracy(p), raw_chroma_accuracy(p))
        except UndefinedMetricError:
            continue
    return EvalResult(raw_pitch_accuracy(pair), raw_chroma_accuracy(pair), est_hz, ref_hz, per_track)


def evaluate(params: M.ModelParams, data: FrameDataset, method: str = "auto") -> EvalResult:
    """Run the network over every frame and score against the references."""
    est, _ = predict_hz(params, data.frames, method=method)
    return score(data.f0, est, data.track)
