"""Run configuration: typed sections, INI round trip, shipped defaults.

The config file is plain-text key/value with nested sections (configparser
syntax).  Every tunable default lives here; commands resolve a config once
and snapshot it into the run directory so a run is fully reproducible from
its artifacts.
"""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path


@dataclass
class RunSection:
    master_seed: int = 0


@dataclass
class WorldSection:
    n_concepts: int = 4
    n_per_class: int = 256
    image_size: int = 16


@dataclass
class ScheduleSection:
    n_train_steps: int = 1000
    beta_start: float = 0.00085
    beta_end: float = 0.012
    kind: str = "scaled_linear"


@dataclass
class SamplingSection:
    n_infer_steps: int = 50
    guidance_scale: float = 7.5
    inversion_guidance_scale: float = 1.0
    build_guidance_scale: float = 1.0


@dataclass
class BaseTrainSection:
    steps: int = 3000
    lr: float = 2e-3
    batch_size: int = 32
    p_uncond: float = 0.1


@dataclass
class ClassifierSection:
    epochs: int = 40
    lr: float = 1e-3
    batch_size: int = 128
    holdout_fraction: float = 0.2
    max_imbalance: float = 3.0
    noise_aug: float = 0.1


@dataclass
class UnlearnSection:
    concept: int = 1
    anchor: int = 0


@dataclass
class NegativeGuidanceSection:
    eta: float = 1.0
    steps: int = 400
    lr: float = 1e-3
    batch_size: int = 32


@dataclass
class RetrainExcludingSection:
    steps: int = 2000
    lr: float = 1e-3
    batch_size: int = 32
    weight_decay: float = 0.0
    value_decay: float = 3.0


@dataclass
class RelearnSection:
    rank: int = 4
    beta: float = 1.0
    steps: int = 500
    batch_size: int = 1
    lr: float = 1e-3
    checkpoint_every: int = 50
    n_reference: int = 6
    restart_index: int = 35
    p_values: tuple = (0.25, 0.5, 0.75)
    target_total: int = 33
    invert_with_original: bool = False


@dataclass
class AttackSection:
    max_iters: int = 12
    step_size: float = 0.5
    norm_bound: float = 4.0
    chain_steps: int = 10


@dataclass
class EvalSection:
    n_prompts: int = 50
    fid_per_class: int = 40
    threshold: float = 0.5
    horizon: int = 250
    with_attack: bool = True
    automemora_w: float = 0.5


_SECTIONS = {
    "run": RunSection,
    "world": WorldSection,
    "schedule": ScheduleSection,
    "sampling": SamplingSection,
    "base_train": BaseTrainSection,
    "classifier": ClassifierSection,
    "unlearn": UnlearnSection,
    "unlearn.negative_guidance": NegativeGuidanceSection,
    "unlearn.retrain_excluding": RetrainExcludingSection,
    "relearn": RelearnSection,
    "attack": AttackSection,
    "eval": EvalSection,
}


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    world: WorldSection = field(default_factory=WorldSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    sampling: SamplingSection = field(default_factory=SamplingSection)
    base_train: BaseTrainSection = field(default_factory=BaseTrainSection)
    classifier: ClassifierSection = field(default_factory=ClassifierSection)
    unlearn: UnlearnSection = field(default_factory=UnlearnSection)
    negative_guidance: NegativeGuidanceSection = field(default_factory=NegativeGuidanceSection)
    retrain_excluding: RetrainExcludingSection = field(default_factory=RetrainExcludingSection)
    relearn: RelearnSection = field(default_factory=RelearnSection)
    attack: AttackSection = field(default_factory=AttackSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self) -> dict:
        return asdict(self)


_ATTR_FOR_SECTION = {
    "run": "run",
    "world": "world",
    "schedule": "schedule",
    "sampling": "sampling",
    "base_train": "base_train",
    "classifier": "classifier",
    "unlearn": "unlearn",
    "unlearn.negative_guidance": "negative_guidance",
    "unlearn.retrain_excluding": "retrain_excluding",
    "relearn": "relearn",
    "attack": "attack",
    "eval": "eval",
}


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(text: str, template):
    if isinstance(template, bool):
        if text.lower() in ("true", "1", "yes", "on"):
            return True
        if text.lower() in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"cannot parse boolean from {text!r}")
    if isinstance(template, (tuple, list)):
        parts = [p.strip() for p in text.split(",") if p.strip()]
        return tuple(float(p) for p in parts)
    if isinstance(template, int):
        return int(text)
    if isinstance(template, float):
        return float(text)
    return text


def default_config() -> RunConfig:
    """The shipped defaults (every stated pipeline default appears here)."""
    return RunConfig()


def write_config(config: RunConfig, path: Path | str) -> None:
    parser = configparser.ConfigParser()
    for section_name, attr in _ATTR_FOR_SECTION.items():
        section = getattr(config, attr)
        parser[section_name] = {
            f.name: _format_value(getattr(section, f.name)) for f in fields(section)
        }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        parser.write(fh)


def load_config(path: Path | str) -> RunConfig:
    """Read an INI config; missing sections/keys fall back to defaults."""
    parser = configparser.ConfigParser()
    read = parser.read(str(path))
    if not read:
        raise FileNotFoundError(f"config file not found: {path}")
    config = RunConfig()
    for section_name, attr in _ATTR_FOR_SECTION.items():
        if not parser.has_section(section_name):
            continue
        section = getattr(config, attr)
        known = {f.name for f in fields(section)}
        for key, raw in parser.items(section_name):
            if key not in known:
                raise ValueError(f"unknown config key [{section_name}] {key}")
            template = getattr(section, key)
            setattr(section, key, _parse_value(raw, template))
    return config
