"""Run configuration: flat ``section.key = value`` files with env overrides.

Every key has a default; unknown keys are rejected. ``BICLKT_<SECTION>_<KEY>``
environment variables override file values.
"""
from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field, fields, replace

from .augmentation import AugmentationConfig
from .contrastive import ContrastiveConfig
from .dataio import MasteryParams
from .encoders import EncoderConfig
from .prediction import HeadConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataSection:
    path: str = ""
    format: str = ""
    name: str = "synthetic"
    max_len: int = 200
    train_fraction: float = 0.8


@dataclass(frozen=True)
class SynthSection:
    n_students: int = 200
    n_concepts: int = 12
    n_exercises: int = 60
    seq_len: int = 50
    guess: float = 0.2
    slip: float = 0.1
    learn_rate: float = 0.15


@dataclass(frozen=True)
class GraphSection:
    edge_threshold: float = 0.0
    cap: int = 20
    count_mode: str = "students"


@dataclass(frozen=True)
class EncoderSection:
    d_in: int = 64
    hidden: tuple = (64, 64)
    d: int = 64
    d_z: int = 32
    activation: str = "relu"
    skip_concat: bool = True


@dataclass(frozen=True)
class LossSection:
    tau: float = 0.5
    batch_size: int = 4
    epochs: int = 100
    lam: float = 0.5
    margin: float = 0.75
    kind: str = "nt_xent"
    include_positive_in_denominator: bool = False
    lr: float = 1e-3


@dataclass(frozen=True)
class HeadSection:
    kind: str = "R"
    mode: str = "Concate"
    hidden: int = 64
    response_dim: int = 16
    mem_slots: int = 20
    d_k: int = 64
    d_v: int = 64
    lr: float = 1e-3
    epochs: int = 200
    batch_size: int = 8
    patience: int = 10
    valid_fraction: float = 0.1
    finetune: bool = False


@dataclass(frozen=True)
class EvalSection:
    threshold: float = 0.5
    probe_l2: float = 1e-4
    probe_epochs: int = 500
    probe_lr: float = 0.05
    grid_aug: tuple = ()
    grid_modes: tuple = ()
    grid_heads: tuple = ()
    n_seeds: int = 5


@dataclass(frozen=True)
class RunSection:
    seed: int = 0


SECTIONS = {
    "data": DataSection, "synth": SynthSection, "graph": GraphSection,
    "aug": AugmentationConfig, "encoder": EncoderSection, "loss": LossSection,
    "head": HeadSection, "eval": EvalSection, "run": RunSection,
}

# sections each stage's outputs depend on (cumulative)
STAGE_SECTIONS = {
    "synth": ("synth", "run"),
    "ingest": ("data",),
    "build-graphs": ("data", "graph", "run"),
    "pretrain": ("data", "graph", "aug", "encoder", "loss", "run"),
    "train-head": ("data", "graph", "aug", "encoder", "loss", "head", "run"),
    "evaluate": ("data", "graph", "aug", "encoder", "loss", "head", "eval", "run"),
    "ablate": ("data", "graph", "aug", "encoder", "loss", "head", "eval", "run"),
}


@dataclass(frozen=True)
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    synth: SynthSection = field(default_factory=SynthSection)
    graph: GraphSection = field(default_factory=GraphSection)
    aug: AugmentationConfig = field(default_factory=AugmentationConfig)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    loss: LossSection = field(default_factory=LossSection)
    head: HeadSection = field(default_factory=HeadSection)
    eval: EvalSection = field(default_factory=EvalSection)
    run: RunSection = field(default_factory=RunSection)

    # typed views for the library modules
    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(**{f.name: getattr(self.encoder, f.name) for f in fields(EncoderSection)})

    def contrastive_config(self) -> ContrastiveConfig:
        s = self.loss
        return ContrastiveConfig(tau=s.tau, batch_size=s.batch_size, epochs=s.epochs, lam=s.lam,
                                 margin=s.margin, loss=s.kind,
                                 include_positive=s.include_positive_in_denominator, lr=s.lr)

    def head_config(self) -> HeadConfig:
        s = self.head
        return HeadConfig(hidden=s.hidden, response_dim=s.response_dim, mem_slots=s.mem_slots,
                          d_k=s.d_k, d_v=s.d_v, lr=s.lr, epochs=s.epochs, batch_size=s.batch_size,
                          patience=s.patience, valid_fraction=s.valid_fraction, finetune=s.finetune)

    def mastery_params(self) -> MasteryParams:
        return MasteryParams(guess=self.synth.guess, slip=self.synth.slip, learn_rate=self.synth.learn_rate)

    def with_seed(self, seed: int) -> RunConfig:
        return replace(self, run=RunSection(seed=seed))

    def override(self, section: str, **values) -> RunConfig:
        return replace(self, **{section: replace(getattr(self, section), **values)})

    def items(self):
        """``(section, key, value)`` for every setting, in declaration order."""
        for name in SECTIONS:
            sec = getattr(self, name)
            for f in fields(sec):
                yield name, f.name, getattr(sec, f.name)

    def fingerprint(self, stage: str | None = None) -> str:
        wanted = STAGE_SECTIONS.get(stage, tuple(SECTIONS)) if stage else tuple(SECTIONS)
        text = "\n".join(f"{s}.{k}={format_value(v)}" for s, k, v in self.items() if s in wanted)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def dump(self) -> str:
        return "".join(f"{s}.{k} = {format_value(v)}\n" for s, k, v in self.items())


def format_value(v) -> str:
    if isinstance(v, tuple):
        return ",".join(map(str, v))
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(raw: str, default, where: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [x.strip() for x in raw.split(",") if x.strip()]
            if default and isinstance(default[0], int):
                return tuple(int(x) for x in items)
            return tuple(items)
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot read {raw!r} as {type(default).__name__}") from None


# encoder.hidden is a tuple of ints even though its default could be empty elsewhere
_INT_TUPLES = {("encoder", "hidden")}


def parse(text: str, source="<config>") -> dict:
    """``{section: {key: raw string}}`` from ``section.key = value`` lines."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line or "." not in line.split("=", 1)[0]:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value'")
        key, value = line.split("=", 1)
        section, name = key.strip().split(".", 1)
        out.setdefault(section, {})[name] = value.strip()
    return out


def build(raw: dict, source="<config>") -> RunConfig:
    cfg = RunConfig()
    for section, values in raw.items():
        if section not in SECTIONS:
            raise ConfigError(f"{source}: unknown section {section!r}")
        current = getattr(cfg, section)
        known = {f.name: getattr(current, f.name) for f in fields(current)}
        updates = {}
        for key, value in values.items():
            if key not in known:
                raise ConfigError(f"{source}: unknown key {section}.{key}")
            default = known[key]
            if (section, key) in _INT_TUPLES:
                default = (0,)
            updates[key] = _coerce(value, default, f"{source}: {section}.{key}")
        try:
            cfg = replace(cfg, **{section: replace(current, **updates)})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{source}: invalid [{section}] settings: {exc}") from None
    return cfg


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    out = {}
    for section in SECTIONS:
        for f in fields(SECTIONS[section]):
            var = f"BICLKT_{section.upper()}_{f.name.upper()}"
            if var in environ:
                out.setdefault(section, {})[f.name] = environ[var]
    return out


def load(path=None, environ=None) -> RunConfig:
    raw = parse(open(path, encoding="utf-8").read(), str(path)) if path else {}
    for section, values in env_overrides(environ).items():
        raw.setdefault(section, {}).update(values)
    return build(raw, str(path or "<defaults>"))


def describe() -> str:
    """Every key with its default, for ``--help``."""
    return "\n".join(f"  {s}.{k} = {format_value(v)}" for s, k, v in RunConfig().items())
