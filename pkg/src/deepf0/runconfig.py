"""``key=value`` run configuration files.

One setting per line, ``#`` starts a comment, blank lines are ignored.
Recognised keys:

    model:    frame_length channels first_kernel block_kernel dilations
              pool bins use_residual use_dropout dropout_rate
    training: lr patience_epochs batch_size max_epochs batches_per_epoch
              conv_method train_frame_step val_frame_step folds

``dilations`` is a comma-separated list (empty for none); booleans accept
true/false/1/0/yes/no. A JSON run manifest is also accepted, in which case
its ``config`` snapshot is used.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace

from .errors import ConfigError
from .model import DeepF0Config

MODEL_KEYS = tuple(f.name for f in fields(DeepF0Config))
TRAIN_KEYS = (
    "lr",
    "patience_epochs",
    "batch_size",
    "max_epochs",
    "batches_per_epoch",
    "conv_method",
    "train_frame_step",
    "val_frame_step",
    "folds",
)
_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


@dataclass(frozen=True)
class TrainSettings:
    lr: float = 2e-4
    patience_epochs: int = 32
    batch_size: int = 32
    max_epochs: int = 500
    batches_per_epoch: int | None = None
    conv_method: str = "auto"
    train_frame_step: int = 1
    val_frame_step: int = 1
    folds: int = 5


@dataclass(frozen=True)
class RunConfig:
    model: DeepF0Config = field(default_factory=DeepF0Config)
    train: TrainSettings = field(default_factory=TrainSettings)

    def to_dict(self) -> dict:
        out = self.model.to_dict()
        out.update({k: getattr(self.train, k) for k in TRAIN_KEYS})
        return out

    def to_text(self) -> str:
        lines = []
        for k, v in self.to_dict().items():
            if isinstance(v, (list, tuple)):
                v = ",".join(str(d) for d in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            elif v is None:
                v = "none"
            lines.append(f"{k}={v}")
        return "\n".join(lines) + "\n"


def _coerce(key: str, raw, kind):
    if kind is bool:
        if isinstance(raw, bool):
            return raw
        s = str(raw).strip().lower()
        if s in _TRUE:
            return True
        if s in _FALSE:
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if key == "dilations":
        if isinstance(raw, (list, tuple)):
            return tuple(int(d) for d in raw)
        s = str(raw).strip().strip("[]()")
        return tuple(int(d) for d in s.split(",") if d.strip())
    if key == "batches_per_epoch" and (raw is None or str(raw).strip().lower() in ("", "none")):
        return None
    return kind(raw)


_KINDS = {
    **{f.name: type(f.default) for f in fields(DeepF0Config)},
    **{f.name: type(f.default) for f in fields(TrainSettings)},
    "batches_per_epoch": int,
}


def from_mapping(values: dict, origin: str = "<config>") -> RunConfig:
    model_kw, train_kw = {}, {}
    for key, raw in values.items():
        if key not in _KINDS:
            raise ConfigError(f"{origin}: unknown key {key!r}")
        try:
            value = _coerce(key, raw, _KINDS[key])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{origin}: bad value for {key}: {exc}") from exc
        (model_kw if key in MODEL_KEYS else train_kw)[key] = value
    model = DeepF0Config(**model_kw)
    train = replace(TrainSettings(), **train_kw)
    for name in ("patience_epochs", "batch_size", "max_epochs", "train_frame_step", "val_frame_step", "folds"):
        if getattr(train, name) < 1:
            raise ConfigError(f"{origin}: {name} must be positive")
    if train.lr <= 0:
        raise ConfigError(f"{origin}: lr must be positive")
    if train.conv_method not in ("auto", "direct", "fft"):
        raise ConfigError(f"{origin}: conv_method must be auto, direct or fft")
    return RunConfig(model, train)


def parse_config_text(text: str, origin: str = "<config>") -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in values:
            raise ConfigError(f"{origin}:{lineno}: duplicate key {key!r}")
        values[key] = value
    return from_mapping(values, origin)


def load_config(path) -> RunConfig:
    """Read a key=value file or the config snapshot of a JSON manifest; ``None`` gives defaults."""
    if path is None:
        return RunConfig()
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if text.lstrip().startswith("{"):
        try:
            snapshot = json.loads(text)["config"]
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"{path}: not a run manifest ({exc})") from exc
        return from_mapping(snapshot, str(path))
    return parse_config_text(text, str(path))
