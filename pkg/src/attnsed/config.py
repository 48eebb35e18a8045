"""Plain-text run configuration: one key=value per line, schema-validated.

A run config is the merged view of the synthesis, model, and training
settings plus a target class and optional path conventions. Keys are
prefixed by section (``synth.``, ``model.``, ``train.``); unknown or
duplicate keys are hard errors. Parsing and serialization round-trip
exactly, so a config can be archived alongside its outputs and replayed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Tuple

from .errors import ConfigError
from .model import ModelConfig
from .synth import CLASS_IDS, SynthConfig
from .training import TrainConfig


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected a boolean, got {s!r}")


def _parse_ints(s: str) -> tuple:
    try:
        return tuple(int(p) for p in s.split(",") if p.strip() != "")
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated integers, got {s!r}") from exc


def _parse_floats(s: str) -> tuple:
    try:
        return tuple(float(p) for p in s.split(",") if p.strip() != "")
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated numbers, got {s!r}") from exc


def _parse_pair(s: str) -> tuple:
    parts = s.lower().split("x")
    if len(parts) != 2:
        raise ConfigError(f"expected TxF (e.g. 3x3), got {s!r}")
    return int(parts[0]), int(parts[1])


def _parse_pairs(s: str) -> tuple:
    return tuple(_parse_pair(p) for p in s.split(",") if p.strip() != "")


def _fmt_ints(v) -> str:
    return ",".join(str(int(x)) for x in v)


def _fmt_floats(v) -> str:
    return ",".join(repr(float(x)) for x in v)


def _fmt_pair(v) -> str:
    return f"{v[0]}x{v[1]}"


def _fmt_pairs(v) -> str:
    return ",".join(_fmt_pair(p) for p in v)


def _parse_int(s: str) -> int:
    try:
        return int(s)
    except ValueError as exc:
        raise ConfigError(f"expected an integer, got {s!r}") from exc


def _parse_float(s: str) -> float:
    try:
        return float(s)
    except ValueError as exc:
        raise ConfigError(f"expected a number, got {s!r}") from exc


def _parse_class(s: str) -> str:
    if s not in CLASS_IDS:
        raise ConfigError(f"unknown event class {s!r}; choose from {sorted(CLASS_IDS)}")
    return s


# key -> (section, field, parse, format). Section '' is top level.
_SCHEMA: Dict[str, Tuple[str, str, Callable, Callable]] = {
    "class": ("", "class_name", _parse_class, str),
    "data_dir": ("", "data_dir", str, str),
    "work_dir": ("", "work_dir", str, str),
    "synth.n_clips": ("synth", "n_clips", _parse_int, str),
    "synth.clip_duration_s": ("synth", "clip_duration_s", _parse_float, lambda v: repr(float(v))),
    "synth.event_presence_prob": ("synth", "event_presence_prob", _parse_float, lambda v: repr(float(v))),
    "synth.ebr_set": ("synth", "ebr_set", _parse_floats, _fmt_floats),
    "synth.master_seed": ("synth", "master_seed", _parse_int, str),
    "synth.classes": ("synth", "classes", _parse_ints, _fmt_ints),
    "model.n_mels": ("model", "n_mels", _parse_int, str),
    "model.n_conv_layers": ("model", "n_conv_layers", _parse_int, str),
    "model.conv_channels": ("model", "conv_channels", _parse_ints, _fmt_ints),
    "model.kernel": ("model", "kernel", _parse_pair, _fmt_pair),
    "model.pool_windows": ("model", "pool_windows", _parse_pairs, _fmt_pairs),
    "model.gru_units": ("model", "gru_units", _parse_int, str),
    "model.temporal_attention_units": ("model", "temporal_attention_units", _parse_int, str),
    "model.frequential_attention_units": ("model", "frequential_attention_units", _parse_int, str),
    "model.dropout_p": ("model", "dropout_p", _parse_float, lambda v: repr(float(v))),
    "model.ta_activation": ("model", "ta_activation", str, str),
    "model.fa_activation": ("model", "fa_activation", str, str),
    "model.use_temporal_attention": ("model", "use_temporal_attention", _parse_bool,
                                     lambda v: "true" if v else "false"),
    "model.use_frequential_attention": ("model", "use_frequential_attention", _parse_bool,
                                        lambda v: "true" if v else "false"),
    "train.learning_rate": ("train", "learning_rate", _parse_float, lambda v: repr(float(v))),
    "train.batch_size": ("train", "batch_size", _parse_int, str),
    "train.pretrain_epochs": ("train", "pretrain_epochs", _parse_int, str),
    "train.main_epochs": ("train", "main_epochs", _parse_int, str),
    "train.positive_weight": ("train", "positive_weight", _parse_float, lambda v: repr(float(v))),
    "train.seed": ("train", "seed", _parse_int, str),
    "train.checkpoint_dir": ("train", "checkpoint_dir", str, str),
}


@dataclass
class RunConfig:
    """Everything a command run needs, minus the file paths given as flags."""

    synth: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    class_name: str = "babycry"
    data_dir: str = ""
    work_dir: str = ""


def _assignments_from_text(text: str, source: str) -> Dict[str, str]:
    raw: Dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {stripped!r}")
        key, _, value = stripped.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        if key in raw:
            raise ConfigError(f"{source}:{lineno}: duplicate config key {key!r}")
        raw[key] = value
    return raw


def _build(assignments: Dict[str, str], base: RunConfig) -> RunConfig:
    sections: Dict[str, dict] = {
        "synth": dict(base.synth.__dict__),
        "model": base.model.to_dict(),
        "": {"class_name": base.class_name, "data_dir": base.data_dir,
             "work_dir": base.work_dir},
    }
    sections["train"] = {k: getattr(base.train, k)
                         for k in TrainConfig.__dataclass_fields__}  # type: ignore[attr-defined]
    for key, text in assignments.items():
        section, fname, parse, _ = _SCHEMA[key]
        try:
            sections[section][fname] = parse(text)
        except ConfigError as exc:
            raise ConfigError(f"config key {key}: {exc}") from exc
    top = sections[""]
    return RunConfig(synth=SynthConfig(**sections["synth"]),
                     model=ModelConfig(**sections["model"]),
                     train=TrainConfig(**sections["train"]),
                     class_name=top["class_name"], data_dir=top["data_dir"],
                     work_dir=top["work_dir"])


def parse_config(text: str, source: str = "<config>",
                 base: RunConfig = None) -> RunConfig:
    """Apply key=value lines over defaults (or over ``base``)."""
    return _build(_assignments_from_text(text, source),
                  base if base is not None else RunConfig())


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read(), source=str(path))


def apply_overrides(cfg: RunConfig, overrides) -> RunConfig:
    """Apply ``key=value`` strings (from CLI flags) on top of a config."""
    joined = "\n".join(overrides)
    return _build(_assignments_from_text(joined, "<override>"), cfg)


def serialize_config(cfg: RunConfig) -> str:
    """Canonical text form; parse(serialize(c)) == c."""
    values = {"": {"class_name": cfg.class_name, "data_dir": cfg.data_dir,
                   "work_dir": cfg.work_dir},
              "synth": cfg.synth.__dict__,
              "model": cfg.model.to_dict(),
              "train": {k: getattr(cfg.train, k)
                        for k in TrainConfig.__dataclass_fields__}}  # type: ignore[attr-defined]
    lines = []
    for key, (section, fname, _, fmt) in _SCHEMA.items():
        lines.append(f"{key} = {fmt(values[section][fname])}")
    return "\n".join(lines) + "\n"
