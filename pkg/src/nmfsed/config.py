"""Whole-pipeline configuration as plain-text key=value assignments.

Keys are section-prefixed (``train.epochs=8``, ``decode.low_threshold=0.08``);
sections mirror the pipeline stages. Two decode settings take per-class
entries via a third path component::

    decode.frame_threshold.ticks3=0.6
    decode.median_windows.ticks3=3,7

Unknown keys are rejected. ``train.lambda`` is accepted as an alias for the
``lam`` field (``lambda`` is a Python keyword). After applying assignments
every section dataclass is rebuilt, so cross-field validation always runs on
the final values.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, replace

from . import dsp, evaluate, labeler, models, nmf, postproc, train


@dataclass
class PipelineConfig:
    feature: dsp.FeatureConfig = field(default_factory=dsp.FeatureConfig)
    nmf: nmf.NmfConfig = field(default_factory=nmf.NmfConfig)
    labeler: labeler.LabelerConfig = field(default_factory=labeler.LabelerConfig)
    model: models.ModelConfig = field(default_factory=models.ModelConfig)
    train: train.TrainConfig = field(default_factory=train.TrainConfig)
    decode: postproc.DecodeConfig = field(default_factory=postproc.DecodeConfig)
    eval: evaluate.EvalConfig = field(default_factory=evaluate.EvalConfig)


_SECTION_TYPES = {
    "feature": dsp.FeatureConfig,
    "nmf": nmf.NmfConfig,
    "labeler": labeler.LabelerConfig,
    "model": models.ModelConfig,
    "train": train.TrainConfig,
    "decode": postproc.DecodeConfig,
    "eval": evaluate.EvalConfig,
}
_SECTIONS = tuple(_SECTION_TYPES)

_ALIASES = {("train", "lambda"): "lam"}
_REVERSE_ALIASES = {(sec, f): name for (sec, name), f in _ALIASES.items()}

# dict-valued fields that accept per-class entries; values are prototypes
# whose type drives coercion of the entry values
_DICT_FIELDS = {
    ("decode", "frame_threshold"): 0.0,
    ("decode", "median_windows"): (),
}


def _coerce(current, text: str, key: str):
    """Parse text into the type of the field's current value."""
    if isinstance(current, bool):
        t = text.lower()
        if t in ("true", "1", "yes", "on"):
            return True
        if t in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {text!r}")
    if isinstance(current, int):
        try:
            return int(text)
        except ValueError:
            raise ValueError(f"{key}: expected an integer, got {text!r}") from None
    if isinstance(current, float):
        try:
            return float(text)
        except ValueError:
            raise ValueError(f"{key}: expected a number, got {text!r}") from None
    if isinstance(current, str):
        return text
    if isinstance(current, tuple):
        parts = [p for p in (s.strip() for s in text.split(",")) if p]
        try:
            return tuple(int(p) for p in parts)
        except ValueError:
            raise ValueError(f"{key}: expected comma-separated integers, got {text!r}") from None
    raise ValueError(f"{key}: unsupported setting type {type(current).__name__}")


def apply_assignments(cfg: PipelineConfig, pairs) -> PipelineConfig:
    """Return a new config with the (key, value-text) pairs applied in order."""
    section_kwargs = {
        sec: {f.name: getattr(getattr(cfg, sec), f.name)
              for f in dataclasses.fields(_SECTION_TYPES[sec])}
        for sec in _SECTIONS
    }
    for key, text in pairs:
        sec, dot, rest = key.partition(".")
        if not dot or sec not in _SECTION_TYPES:
            raise ValueError(
                f"unknown config key {key!r} (sections: {', '.join(_SECTIONS)})"
            )
        fname, _, subkey = rest.partition(".")
        fname = _ALIASES.get((sec, fname), fname)
        if fname not in section_kwargs[sec]:
            raise ValueError(f"unknown config key {key!r}")
        current = section_kwargs[sec][fname]
        if subkey:
            if (sec, fname) not in _DICT_FIELDS:
                raise ValueError(f"{key}: {sec}.{fname} takes no per-class entries")
            value = _coerce(_DICT_FIELDS[(sec, fname)], text, key)
            updated = dict(current)
            updated[subkey] = value
            section_kwargs[sec][fname] = updated
        else:
            if isinstance(current, dict):
                raise ValueError(
                    f"{key}: set per-class entries as {sec}.{fname}.<label>=..."
                )
            section_kwargs[sec][fname] = _coerce(current, text, key)
    sections = {}
    for sec in _SECTIONS:
        try:
            sections[sec] = _SECTION_TYPES[sec](**section_kwargs[sec])
        except ValueError as exc:
            raise ValueError(f"invalid {sec} configuration: {exc}") from exc
    return PipelineConfig(**sections)


def parse_pairs(lines, source: str = "<config>"):
    """key=value pairs from text lines; blank lines and # comments skipped."""
    pairs = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, eq, value = line.partition("=")
        if not eq:
            raise ValueError(f"{source}:{lineno}: expected key=value, got {line!r}")
        pairs.append((key.strip(), value.strip()))
    return pairs


def load_config(path, base: PipelineConfig | None = None) -> PipelineConfig:
    base = base if base is not None else PipelineConfig()
    with open(path, encoding="utf-8") as fh:
        pairs = parse_pairs(fh, source=str(path))
    return apply_assignments(base, pairs)


def parse_overrides(items) -> list:
    pairs = []
    for item in items or []:
        key, eq, value = item.partition("=")
        if not eq:
            raise ValueError(f"override {item!r} must be key=value")
        pairs.append((key.strip(), value.strip()))
    return pairs


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def format_config(cfg: PipelineConfig) -> str:
    """Canonical text form; parse_pairs/apply_assignments round-trips it."""
    lines = []
    for sec in _SECTIONS:
        obj = getattr(cfg, sec)
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            name = _REVERSE_ALIASES.get((sec, f.name), f.name)
            if isinstance(v, dict):
                for label in sorted(v):
                    lines.append(f"{sec}.{name}.{label}={_format_value(v[label])}")
            else:
                lines.append(f"{sec}.{name}={_format_value(v)}")
    return "\n".join(lines) + "\n"


def set_seeds(cfg: PipelineConfig, seed: int) -> PipelineConfig:
    """Point every stage's seed at one value (the CLI --seed behavior)."""
    return replace(
        cfg,
        nmf=replace(cfg.nmf, seed=seed),
        labeler=replace(cfg.labeler, seed=seed),
        model=replace(cfg.model, seed=seed),
        train=replace(cfg.train, seed=seed),
    )
