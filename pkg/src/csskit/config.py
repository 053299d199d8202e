"""Run configuration.

A run config is a YAML (or JSON) mapping with these optional sections; every
key not listed is rejected::

    seed: 0                       # single source of randomness
    stft:     {sample_rate, window_len, hop, fft_size, window_kind}
    net:      {preset: XT} or any NetConfig field
    teacher_net: same keys as net (stage-2 teacher; default preset LT)
    train:    TrainConfig fields (stage is taken from --stage)
    css:      {window_len, window_shift, stitch_overlap, output_method}
    simulate: {train_samples, test_samples, sample_dur, train_mics, train_radius,
               session_dur, session_speakers, session_mics, session_radius,
               sessions, noise_db, reflection_gain}
    segment:  {method: cts|fws, max_len, max_silence, window, quality_threshold}

Defaults are the dataclass defaults (see each section's class).
"""
import dataclasses
import json
from dataclasses import dataclass, field

import yaml

from .css import CssConfig
from .dsp import StftConfig
from .objectives import LossWeights
from .train import TrainConfig
from .vararray import PRESETS, NetConfig


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(f"{k}: {r}" for k, r in self.problems))


@dataclass(frozen=True)
class SimulateConfig:
    train_samples: int = 50
    test_samples: int = 10
    sample_dur: float = 1.6
    train_mics: int = 4
    train_radius: float = 0.05
    session_dur: float = 30.0
    session_speakers: int = 2
    session_mics: int = 7
    session_radius: float = 0.0425
    sessions: int = 4
    noise_db: float = -25.0
    reflection_gain: float = 0.3

    def __post_init__(self):
        for name in ("train_samples", "test_samples", "train_mics", "session_mics",
                     "session_speakers", "sessions"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("sample_dur", "session_dur", "train_radius", "session_radius"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")


@dataclass(frozen=True)
class SegmentConfig:
    method: str = "cts"
    max_len: float = 20.0
    max_silence: float = 2.5
    window: float = 4.0
    quality_threshold: float = None

    def __post_init__(self):
        if self.method not in ("cts", "fws"):
            raise ValueError(f"method must be cts or fws, got {self.method!r}")
        if self.max_len <= 0 or self.max_silence < 0 or self.window <= 0:
            raise ValueError("lengths must be positive")


@dataclass
class RunConfig:
    seed: int = 0
    stft: StftConfig = field(default_factory=StftConfig)
    net: NetConfig = field(default_factory=lambda: PRESETS["XT"])
    teacher_net: NetConfig = field(default_factory=lambda: PRESETS["LT"])
    train: TrainConfig = field(default_factory=TrainConfig)
    css: CssConfig = field(default_factory=CssConfig)
    simulate: SimulateConfig = field(default_factory=SimulateConfig)
    segment: SegmentConfig = field(default_factory=SegmentConfig)


def _build(section, cls, raw, problems, extra=None):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        problems.append((section, "must be a mapping"))
        return None
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = dict(extra or {})
    for key, value in raw.items():
        if key not in names:
            problems.append((f"{section}.{key}", "unknown key"))
        else:
            kwargs[key] = tuple(value) if isinstance(value, list) else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        problems.append((section, str(exc)))
        return None


def _net(section, raw, problems, default):
    raw = dict(raw or {})
    preset = raw.pop("preset", None)
    base = {}
    if preset is not None:
        if preset not in PRESETS:
            problems.append((f"{section}.preset", f"unknown preset {preset!r}; have {sorted(PRESETS)}"))
        else:
            base = PRESETS[preset].to_dict()
    elif not raw:
        return default
    base.update(raw)
    return _build(section, NetConfig, {k: v for k, v in base.items() if k in raw or preset},
                  problems)


def parse_config(data):
    """Validate a mapping into a :class:`RunConfig`; all problems are reported together."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError([("<root>", "config must be a mapping")])
    problems = []
    known = {f.name for f in dataclasses.fields(RunConfig)}
    for key in data:
        if key not in known:
            problems.append((key, "unknown key"))
    seed = data.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        problems.append(("seed", "must be a non-negative integer"))
    train_raw = dict(data.get("train") or {})
    weights = train_raw.pop("loss_weights", None)
    extra = {}
    if weights is not None:
        lw = _build("train.loss_weights", LossWeights, weights, problems)
        if lw is not None:
            extra["loss_weights"] = lw
    cfg = RunConfig(
        seed=seed,
        stft=_build("stft", StftConfig, data.get("stft"), problems),
        net=_net("net", data.get("net"), problems, PRESETS["XT"]),
        teacher_net=_net("teacher_net", data.get("teacher_net"), problems, PRESETS["LT"]),
        train=_build("train", TrainConfig, train_raw, problems, extra),
        css=_build("css", CssConfig, data.get("css"), problems),
        simulate=_build("simulate", SimulateConfig, data.get("simulate"), problems),
        segment=_build("segment", SegmentConfig, data.get("segment"), problems),
    )
    if problems:
        raise ConfigError(problems)
    if cfg.net.bins != cfg.stft.bins:
        raise ConfigError([("net.bins", f"{cfg.net.bins} does not match stft bins {cfg.stft.bins}")])
    return cfg


def load_config(path=None):
    if path is None:
        return parse_config({})
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        data = yaml.safe_load(text) if not path.endswith(".json") else json.loads(text)
    except (yaml.YAMLError, json.JSONDecodeError) as exc:
        raise ConfigError([("<file>", f"cannot parse {path}: {exc}")]) from None
    return parse_config(data)
