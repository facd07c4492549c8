# License AGPL-3.0 or later (http://www.gnu.org/licenses/agpl)

import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .classifier import EarlyStopping, ModelConfig, TrainConfig
from .defense import POLICY_THRESHOLD, FineTuneConfig, Policy
from .exceptions import ConfigurationError
from .signals import SynthConfig

_logger = logging.getLogger(__name__)

WORKERS_ENV = "AMC_SHAPFT_WORKERS"
DESK_EPSILONS = (0.025, 0.05, 0.075, 0.1)


class SmartDict(dict):
    """Dotted notation dict."""

    def __getattr__(self, attrib):
        val = self.get(attrib)
        return self.__class__(val) if type(val) is dict else val


def make_md5(content):
    if not isinstance(content, str):
        content = json.dumps(content, sort_keys=True, default=str)
    return hashlib.md5(content.encode()).hexdigest()


def _merge(base, extra):
    merged = dict(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


class ConfLoader:
    """Reads ``<name>.yml`` or every ``*.yml`` of a ``<name>/`` folder."""

    def __init__(self, conf_dir):
        self.conf_dir = Path(conf_dir)

    def load_conf(self, name):
        conf = {}
        path = self.conf_dir / name
        filepath = path.with_suffix(".yml")
        if filepath.exists():
            conf = self._load_conf_from_file(filepath)
        elif path.is_dir():
            # folders of fragments, merged section by section
            for filepath in sorted(path.rglob("*.yml")):
                conf = _merge(conf, self._load_conf_from_file(filepath))
        else:
            raise ConfigurationError(f"no configuration {filepath} or {path}/")
        return SmartDict(conf)

    def save_conf(self, filepath, conf):
        with Path(filepath).open("w") as f:
            yaml.safe_dump(conf, f, sort_keys=False)

    def _load_conf_from_file(self, filepath):
        with filepath.open() as fd:
            content = fd.read()
        if not content.strip():
            return {}
        try:
            data = yaml.safe_load(content)
        except yaml.YAMLError as err:
            raise ConfigurationError(f"{filepath}: invalid YAML ({err})") from err
        if not isinstance(data, dict):
            raise ConfigurationError(f"{filepath}: expected a mapping at the top level")
        return data


class ChecksumLedger:
    """md5 of the settings each stage was last produced with (``checksum.yml``)."""

    def __init__(self, output_dir):
        self.path = Path(output_dir) / "checksum.yml"
        self.checksum = self._load_checksum()

    def _load_checksum(self):
        if not self.path.exists():
            return {}
        with self.path.open() as fd:
            return yaml.safe_load(fd) or {}

    def changed(self, stage, digest):
        return self.checksum.get(stage) != digest

    def store(self, stage, digest):
        self.checksum[stage] = digest

    def save_checksum(self):
        if self.checksum:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("w") as f:
                yaml.safe_dump(dict(self.checksum), f)


@dataclass
class AttackSettings:
    epsilons: tuple = DESK_EPSILONS

    def __post_init__(self):
        self.epsilons = tuple(float(e) for e in self.epsilons)
        if not self.epsilons:
            raise ConfigurationError("attack.epsilons must not be empty")
        if any(e < 0 for e in self.epsilons):
            raise ConfigurationError("attack.epsilons must be >= 0")


@dataclass
class ExplainerSettings:
    num_samples: int = 64
    background_cap: int = 5000
    batch_size: int = 256
    seed: int = None

    def __post_init__(self):
        if self.num_samples < 1 or self.background_cap < 1 or self.batch_size < 1:
            raise ConfigurationError("explainer counts must be >= 1")


@dataclass
class DefenseSettings:
    policy: str = "auto"
    threshold: float = POLICY_THRESHOLD

    def __post_init__(self):
        if self.policy != "auto":
            try:
                Policy(self.policy)
            except ValueError:
                raise ConfigurationError(
                    f"defense.policy must be auto, errors_only or all_samples, "
                    f"not {self.policy!r}"
                ) from None

    def policy_override(self):
        return None if self.policy == "auto" else Policy(self.policy)


@dataclass
class FigureSettings:
    svg: bool = True
    epsilon: float = None


DESK_DATASET = {
    "schemes": ["BPSK", "QPSK", "QAM16", "GFSK"],
    "snr_grid": {"start": 0, "stop": 18, "step": 2},
    "train_size": 2000,
    "test_size": 200,
    "adv_size": 1600,
}
DESK_TRAIN = {"epochs": 50}

_SECTIONS = {
    "attack": AttackSettings,
    "explainer": ExplainerSettings,
    "defense": DefenseSettings,
    "fine_tune": FineTuneConfig,
    "figures": FigureSettings,
}
_TOP_LEVEL = {"seed", "output_dir", "workers", "dataset", "model", "train"} | set(_SECTIONS)


def _check_keys(section, data, cls):
    if not isinstance(data, dict):
        raise ConfigurationError(f"{section} must be a mapping")
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigurationError(
            f"unknown key(s) {', '.join(section + '.' + k for k in unknown)}; "
            f"allowed: {', '.join(sorted(allowed))}"
        )


def _seeded(values, key, seed, override):
    if override:
        values[key] = seed
    else:
        values.setdefault(key, seed)


def _build(section, cls, data):
    _check_keys(section, data, cls)
    try:
        return cls(**data)
    except TypeError as err:
        raise ConfigurationError(f"{section}: {err}") from err


@dataclass
class RunConfig:
    """Every setting of a run; sections missing from the file take desk-scale values."""

    seed: int = 0
    output_dir: str = "runs/desk"
    workers: int = 1
    dataset: SynthConfig = None
    model: ModelConfig = None
    train: TrainConfig = None
    attack: AttackSettings = field(default_factory=AttackSettings)
    explainer: ExplainerSettings = field(default_factory=ExplainerSettings)
    defense: DefenseSettings = field(default_factory=DefenseSettings)
    fine_tune: FineTuneConfig = None
    figures: FigureSettings = field(default_factory=FigureSettings)
    source: str = None

    @classmethod
    def from_dict(cls, data, seed=None, source=None):
        data = SmartDict(data or {})
        unknown = sorted(set(data) - _TOP_LEVEL)
        if unknown:
            raise ConfigurationError(f"unknown configuration key(s): {', '.join(unknown)}")
        override = seed is not None
        seed = int(seed if override else data.get("seed", 0))
        dataset = _merge(DESK_DATASET, data.dataset or {})
        _seeded(dataset, "master_seed", seed, override)
        _check_keys("dataset", dataset, SynthConfig)
        synth = SynthConfig.from_dict(dataset)
        model = dict(data.model or {})
        model.setdefault("num_classes", len(synth.schemes))
        model = _build("model", ModelConfig, model)
        if model.num_classes != len(synth.schemes):
            raise ConfigurationError(
                f"model.num_classes {model.num_classes} does not match the "
                f"{len(synth.schemes)} dataset schemes"
            )
        train = _merge(DESK_TRAIN, data.train or {})
        _seeded(train, "seed", seed, override)
        if "early_stopping" in train:
            train["early_stopping"] = _build(
                "train.early_stopping", EarlyStopping, train["early_stopping"]
            )
        sections = {}
        for name, section_cls in _SECTIONS.items():
            values = dict(data.get(name) or {})
            if name in ("fine_tune", "explainer"):
                _seeded(values, "seed", seed, override)
            sections[name] = _build(name, section_cls, values)
        try:
            workers = int(os.environ.get(WORKERS_ENV, data.get("workers", 1)))
        except ValueError:
            raise ConfigurationError(f"{WORKERS_ENV} must be an integer") from None
        if workers < 1:
            raise ConfigurationError("workers must be >= 1")
        return cls(
            seed=seed,
            output_dir=str(data.get("output_dir", "runs/desk")),
            workers=workers,
            dataset=synth,
            model=model,
            train=_build("train", TrainConfig, train),
            source=source,
            **sections,
        )

    @classmethod
    def load(cls, path, seed=None):
        path = Path(path)
        if path.suffix == ".yml" and not path.exists():
            raise ConfigurationError(f"configuration file {path} does not exist")
        conf = ConfLoader(path.parent).load_conf(path.stem if path.suffix else path.name)
        return cls.from_dict(conf, seed=seed, source=str(path))

    def to_dict(self):
        data = {
            "seed": self.seed,
            "output_dir": self.output_dir,
            "workers": self.workers,
            "dataset": self.dataset.to_dict(),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
        }
        for name in _SECTIONS:
            data[name] = asdict(getattr(self, name))
        data["attack"]["epsilons"] = list(self.attack.epsilons)
        return data

    def stage_settings(self, stage, epsilon=None):
        """Settings that determine the artifacts of ``stage``."""
        settings = {"dataset": self.dataset.to_dict()}
        if stage == "synth":
            return settings
        settings.update(model=self.model.to_dict(), train=self.train.to_dict())
        if stage == "train":
            return settings
        if stage == "direct_ft":
            settings["fine_tune"] = self.fine_tune.to_dict()
            return settings
        if stage == "figures":
            settings = self.to_dict()
            settings.pop("workers")
            settings.pop("output_dir")
            settings["epsilon"] = epsilon
            return settings
        settings["epsilon"] = epsilon
        if stage == "attack":
            return settings
        settings["explainer"] = asdict(self.explainer)
        if stage == "explain":
            return settings
        settings.update(defense=asdict(self.defense), fine_tune=self.fine_tune.to_dict())
        if stage in ("defend", "compare"):
            return settings
        raise ConfigurationError(f"unknown stage {stage!r}")

    def stage_hash(self, stage, epsilon=None):
        return make_md5(self.stage_settings(stage, epsilon))
