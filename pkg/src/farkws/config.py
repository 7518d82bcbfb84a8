"""Experiment configuration: INI files with ``key = value`` lines under sections.

Every field has a default, so an empty file (or none at all) describes the
baseline recipe. :func:`dump_config` writes the effective configuration with
all defaults materialized, and loading that output yields an equal object.
"""
import configparser
import dataclasses
import io
import os
from dataclasses import dataclass, field

from .detect import DetectorConfig
from .dsp import FrontendConfig
from .errors import ConfigError
from .losses import CoralStrategy, LossConfig, LossMode
from .models import Variant
from .train import TrainConfig


@dataclass
class ModelSection:
    variant: str = "baseline"
    num_words: int = 3
    channels: tuple = (32, 32, 32)
    fc1_width: int = 128
    domain_hidden: int = 64


@dataclass
class LossSection:
    mode: str = "ce"
    strategy: str = ""
    lam: float = -1.0  # negative means the mode's default


@dataclass
class DataSection:
    train_positives: int = 500
    train_negatives: int = 300
    test_positives: int = 100
    test_negatives: int = 150
    negatives_per_clip: int = 2


@dataclass
class EvalSection:
    grid_points: int = 1001
    target_fa: float = 1.0


@dataclass
class PathSection:
    train_manifest: str = ""
    test_manifest: str = ""
    feature_dir: str = ""
    domain_net: str = ""
    checkpoint: str = ""
    out: str = "out"


@dataclass
class ExperimentConfig:
    seed: int = 0
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    model: ModelSection = field(default_factory=ModelSection)
    loss: LossSection = field(default_factory=LossSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    data: DataSection = field(default_factory=DataSection)
    eval: EvalSection = field(default_factory=EvalSection)
    paths: PathSection = field(default_factory=PathSection)

    # -- derived objects -------------------------------------------------

    @property
    def variant(self):
        return Variant.parse(self.model.variant)

    def loss_config(self):
        lam = None if self.loss.lam < 0 else self.loss.lam
        return LossConfig(self.loss.mode, self.loss.strategy or None, lam)

    def widths(self):
        return {"channels": tuple(self.model.channels), "fc1_width": self.model.fc1_width}

    def validate(self, require_paths=()):
        """Cross-field checks; ``require_paths`` names path fields that must exist on disk."""
        variant = self.variant
        loss = self.loss_config()
        if variant.uses_embedding and not self.paths.domain_net:
            raise ConfigError(f"variant {variant.name} needs paths.domain_net")
        if (variant is Variant.MTL) != (loss.mode is LossMode.MTL):
            raise ConfigError(f"variant {variant.name} is incompatible with loss mode {loss.mode.value}")
        if loss.mode is LossMode.MTL and self.loss.strategy:
            raise ConfigError("MTL training takes no CORAL strategy")
        if len(self.model.channels) != 3 or min(self.model.channels) < 1:
            raise ConfigError("model.channels needs three positive widths")
        if self.eval.grid_points < 2 or self.eval.target_fa < 0:
            raise ConfigError("eval.grid_points must be >= 2 and eval.target_fa >= 0")
        if self.detector.window_frames < self.model.num_words:
            raise ConfigError("detector.window_frames must hold every keyword word")
        for name in require_paths:
            path = getattr(self.paths, name)
            if not path:
                raise ConfigError(f"paths.{name} is not set")
            if not os.path.exists(path):
                raise ConfigError(f"paths.{name} does not exist: {path}")
        return self


SECTIONS = ["frontend", "model", "loss", "train", "detector", "data", "eval", "paths"]


def _convert(kind, text, where):
    text = text.strip()
    try:
        if kind is bool:
            return {"true": True, "false": False, "1": True, "0": False}[text.lower()]
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is tuple:
            return tuple(int(v) for v in text.replace(",", " ").split())
        return text
    except (ValueError, KeyError):
        raise ConfigError(f"{where}: cannot read {text!r} as {kind.__name__}") from None


def _format(value):
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _build(cls, values, where):
    kinds = {f.name: type(f.default) if f.default is not dataclasses.MISSING else
             type(f.default_factory()) for f in dataclasses.fields(cls)}
    unknown = set(values) - set(kinds)
    if unknown:
        raise ConfigError(f"[{where}] unknown key(s): {', '.join(sorted(unknown))}")
    kwargs = {k: _convert(kinds[k], v, f"{where}.{k}") for k, v in values.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}] {exc}") from None


def parse_config(text, source="<config>"):
    parser = configparser.ConfigParser(interpolation=None, default_section="__unused__")
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {' '.join(str(exc).split())}") from None
    unknown = set(parser.sections()) - set(SECTIONS) - {"experiment"}
    if unknown:
        raise ConfigError(f"{source}: unknown section(s): {', '.join(sorted(unknown))}")
    seed = 0
    if parser.has_section("experiment"):
        extra = set(parser["experiment"]) - {"seed"}
        if extra:
            raise ConfigError(f"[experiment] unknown key(s): {', '.join(sorted(extra))}")
        seed = _convert(int, parser["experiment"].get("seed", "0"), "experiment.seed")
    defaults = ExperimentConfig()
    parts = {}
    for name in SECTIONS:
        values = dict(parser[name]) if parser.has_section(name) else {}
        parts[name] = _build(type(getattr(defaults, name)), values, name)
    if not (parser.has_section("train") and "seed" in parser["train"]):
        # the experiment seed also drives training unless overridden
        parts["train"] = dataclasses.replace(parts["train"], seed=seed)
    cfg = ExperimentConfig(seed=seed, **parts)
    _check_enums(cfg)
    return cfg


def _check_enums(cfg):
    Variant.parse(cfg.model.variant)
    try:
        LossMode(cfg.loss.mode)
    except ValueError:
        raise ConfigError(f"loss.mode must be one of ce, coral, mtl (got {cfg.loss.mode!r})") from None
    if cfg.loss.strategy:
        CoralStrategy.parse(cfg.loss.strategy)


def load_config(path=None):
    if path is None:
        return ExperimentConfig()
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path))


def with_overrides(cfg, seed=None, variant=None, strategy=None, lam=None, out=None, **paths):
    """Apply command-line overrides; a strategy implies CORAL, the MTL variant implies MTL loss."""
    cfg = dataclasses.replace(cfg, model=dataclasses.replace(cfg.model), loss=dataclasses.replace(cfg.loss),
                              paths=dataclasses.replace(cfg.paths))
    if seed is not None:
        cfg.seed = seed
        cfg.train = dataclasses.replace(cfg.train, seed=seed)
    if variant is not None:
        cfg.model.variant = Variant.parse(variant).name.lower()
        if cfg.model.variant == "mtl":
            cfg.loss.mode = "mtl"
    if strategy is not None:
        cfg.loss.strategy = CoralStrategy.parse(strategy).name.lower()
        cfg.loss.mode = "coral"
    if lam is not None:
        if lam < 0:
            raise ConfigError("lambda must be nonnegative")
        cfg.loss.lam = lam
    if out is not None:
        cfg.paths.out = out
    for key, value in paths.items():
        if value is not None:
            setattr(cfg.paths, key, value)
    _check_enums(cfg)
    return cfg


def dump_config(cfg):
    """Effective configuration as INI text with every default written out."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser["experiment"] = {"seed": str(cfg.seed)}
    for name in SECTIONS:
        section = getattr(cfg, name)
        parser[name] = {f.name: _format(getattr(section, f.name)) for f in dataclasses.fields(section)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()
