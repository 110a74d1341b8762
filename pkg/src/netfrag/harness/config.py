"""Experiment configuration: sectioned key=value files.

Grammar (configparser INI subset)::

    [experiment]
    kind = retinotopy
    seed = 1

    [selforg]
    alpha = 0.005
    post_shape = 16, 16

Values are typed by the defaults of the section's dataclass; tuples are
comma separated, ``none`` clears an optional number.  Unknown sections and
keys are rejected with the offending name in the message.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields, replace

from ..errors import InvalidArgument
from ..fragments import FragmentConfig
from ..maplets import RelaxParams
from ..selforg import SelfOrgConfig
from .stimuli import TEXTURE_KINDS

KINDS = ("retinotopy", "fragments", "segment", "select", "match")


@dataclass
class CorpusConfig:
    textures: tuple = TEXTURE_KINDS
    per_texture: int = 50
    size: int = 32
    jitter: float = 0.1
    shuffle_seed: int = 7
    test_images: int = 5       # fresh images per texture for reactivation tests

    def __post_init__(self):
        if self.size < 16 or self.per_texture < 1 or self.test_images < 1:
            raise InvalidArgument("corpus needs size >= 16 and positive counts")
        if not 0 <= self.jitter <= 1:
            raise InvalidArgument("jitter must lie in [0, 1]")
        for t in self.textures:
            if t not in TEXTURE_KINDS:
                raise InvalidArgument(f"unknown texture kind {t!r}")


@dataclass
class SegmentConfig:
    scenes: int = 50
    side: int = 12
    background: str = "noise"

    def __post_init__(self):
        if self.scenes < 1 or self.side < 4:
            raise InvalidArgument("segment needs scenes >= 1 and side >= 4")


@dataclass
class SelectConfig:
    trials: int = 20
    bias: float = 0.2
    first: str = "stripes_0"
    second: str = "stripes_90"

    def __post_init__(self):
        if self.trials < 1 or not 0 <= self.bias < 1:
            raise InvalidArgument("select needs trials >= 1 and bias in [0, 1)")


@dataclass
class MatchConfig:
    models: int = 10
    queries: int = 100
    max_shift: int = 8
    size: int = 32
    jitter: float = 0.1
    background: str = "blank"
    oracle_queries: int = 50
    noise_trials: int = 100
    calibration_trials: int = 50
    tau_rej: float | None = None    # none: calibrate on noise queries

    def __post_init__(self):
        if not 1 <= self.models <= 10:
            raise InvalidArgument("models must lie in 1..10")
        if self.queries < 1 or self.max_shift < 0 or self.size < 16:
            raise InvalidArgument("match needs queries >= 1, max_shift >= 0, size >= 16")


SECTIONS = {
    "selforg": SelfOrgConfig,
    "fragments": FragmentConfig,
    "corpus": CorpusConfig,
    "segment": SegmentConfig,
    "select": SelectConfig,
    "maplets": RelaxParams,
    "match": MatchConfig,
}

USES = {
    "retinotopy": ("selforg",),
    "fragments": ("fragments", "corpus"),
    "segment": ("fragments", "corpus", "segment"),
    "select": ("fragments", "corpus", "select"),
    "match": ("maplets", "match"),
}


@dataclass
class ExperimentConfig:
    kind: str
    seed: int = 1
    out: str | None = None
    snapshot_every: int = 0
    sections: dict = field(default_factory=dict)

    def section(self, name: str):
        return self.sections[name]

    def with_seed(self, seed: int) -> "ExperimentConfig":
        secs = {k: (replace(v, seed=int(seed)) if hasattr(v, "seed") else v) for k, v in self.sections.items()}
        return replace(self, seed=int(seed), sections=secs)

    def to_dict(self) -> dict:
        d = {"experiment": {"kind": self.kind, "seed": self.seed, "snapshot_every": self.snapshot_every}}
        for name, sec in self.sections.items():
            d[name] = {f.name: _plain(getattr(sec, f.name)) for f in fields(sec)}
        return d

    def to_text(self) -> str:
        """Resolved config in the same grammar it was read from."""
        lines = []
        for name, sec in self.to_dict().items():
            lines.append(f"[{name}]")
            for k, v in sec.items():
                lines.append(f"{k} = {_format(v)}")
            lines.append("")
        return "\n".join(lines)


def _plain(v):
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    return v


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, (list, tuple)):
        return ", ".join(_format(x) for x in v)
    return str(v)


def config_hash(cfg: ExperimentConfig) -> str:
    """sha256 over a canonical JSON dump with sorted keys."""
    blob = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _parse_scalar(text: str, like, key: str):
    t = text.strip()
    if like is None:
        if t.lower() == "none":
            return None
        try:
            return float(t)
        except ValueError:
            raise InvalidArgument(f"key {key!r}: expected a number or none, got {text!r}") from None
    try:
        if isinstance(like, bool):
            low = t.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if isinstance(like, int):
            return int(t)
        if isinstance(like, float):
            return float(t)
    except ValueError:
        raise InvalidArgument(f"key {key!r}: cannot parse {text!r} as {type(like).__name__}") from None
    return t


def _parse_value(text: str, default, key: str):
    if isinstance(default, tuple):
        parts = [p for p in text.split(",") if p.strip()]
        like = default[0] if default else ""
        return tuple(_parse_scalar(p, like, key) for p in parts)
    return _parse_scalar(text, default, key)


def _build_section(name: str, items: dict, seed: int | None):
    cls = SECTIONS[name]
    defaults = {f.name: (f.default if f.default is not dataclasses.MISSING else f.default_factory())
                for f in fields(cls)}
    kw = {}
    for key, text in items.items():
        if key not in defaults:
            raise InvalidArgument(f"unknown key {key!r} in section [{name}]")
        kw[key] = _parse_value(text, defaults[key], key)
    if seed is not None and "seed" in defaults and "seed" not in kw:
        kw["seed"] = seed
    try:
        return cls(**kw)
    except InvalidArgument as e:
        raise InvalidArgument(f"section [{name}]: {e}") from None


def parse_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str          # keys are case sensitive
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise InvalidArgument(f"config syntax: {e}") from None
    if not cp.has_section("experiment"):
        raise InvalidArgument("missing [experiment] section")
    exp = dict(cp["experiment"])
    for key in exp:
        if key not in ("kind", "seed", "out", "snapshot_every"):
            raise InvalidArgument(f"unknown key {key!r} in section [experiment]")
    kind = exp.get("kind", "").strip()
    if kind not in KINDS:
        raise InvalidArgument(f"key 'kind': must be one of {', '.join(KINDS)}")
    seed = _parse_scalar(exp.get("seed", "1"), 1, "seed")
    snap = _parse_scalar(exp.get("snapshot_every", "0"), 0, "snapshot_every")
    if seed < 0 or snap < 0:
        raise InvalidArgument("seed and snapshot_every must be >= 0")
    for name in cp.sections():
        if name != "experiment" and name not in SECTIONS:
            raise InvalidArgument(f"unknown section [{name}]")
    sections = {}
    for name in USES[kind]:
        items = dict(cp[name]) if cp.has_section(name) else {}
        sections[name] = _build_section(name, items, seed)
    return ExperimentConfig(kind, seed, exp.get("out"), snap, sections)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise InvalidArgument(f"cannot read config {path}: {e.strerror or e}") from None
    return parse_config(text)


def default_config(kind: str, seed: int = 1) -> ExperimentConfig:
    return parse_config(f"[experiment]\nkind = {kind}\nseed = {seed}\n")
