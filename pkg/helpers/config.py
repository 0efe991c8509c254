"""
Run configuration: environment defaults and `section.key = value` files.

Example file:

    # desk-scale training
    network.in_shape = 32, 32, 32
    train.steps_per_stage = 200
    loss.alpha = 10
    data.preprocess = auto
"""

import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

from dotenv import load_dotenv

from data import MEDIASTINUM_WINDOW, SynthConfig
from evaluate import DEFAULT_ALPHAS, DEFAULT_BETAS
from losses import LossWeights
from network import NetworkConfig
from train import TrainConfig

# Load environment variables
load_dotenv()

PREPROCESS_MODES = ("auto", "always", "never")
TRUE_WORDS = ("1", "true", "yes", "on")
FALSE_WORDS = ("0", "false", "no", "off")


class ConfigError(ValueError):
    """A configuration value cannot be used; `key` names it."""

    def __init__(self, message: str, key: str = ""):
        super().__init__(message)
        self.key = key


@dataclass
class DataSettings:
    window: Tuple[float, float] = MEDIASTINUM_WINDOW
    preprocess: str = "auto"
    crop_margin: int = -1  # < 0 keeps the full volume

    def __post_init__(self):
        if self.preprocess not in PREPROCESS_MODES:
            raise ValueError(f"preprocess must be one of {PREPROCESS_MODES}, got {self.preprocess!r}")
        if len(self.window) != 2 or self.window[0] >= self.window[1]:
            raise ValueError(f"window needs low < high, got {self.window}")


@dataclass
class GridSettings:
    alpha: Tuple[float, ...] = DEFAULT_ALPHAS
    beta: Tuple[float, ...] = DEFAULT_BETAS
    eval_fraction: float = 0.125

    def __post_init__(self):
        if not self.alpha or not self.beta:
            raise ValueError("Grid needs at least one alpha and one beta")
        if not 0 < self.eval_fraction < 1:
            raise ValueError(f"eval_fraction must be in (0, 1), got {self.eval_fraction}")


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    data: DataSettings = field(default_factory=DataSettings)
    grid: GridSettings = field(default_factory=GridSettings)

    @property
    def seed(self) -> int:
        return self.train.seed

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def env_defaults() -> Dict[str, Any]:
    """REFINEREG_DEVICE, REFINEREG_SEED and REFINEREG_LOG_LEVEL with their defaults."""
    seed = os.getenv("REFINEREG_SEED", "0")
    try:
        seed = int(seed)
    except ValueError:
        raise ConfigError(f"REFINEREG_SEED must be an integer, got {seed!r}", key="REFINEREG_SEED")
    return {
        "device": os.getenv("REFINEREG_DEVICE", "cpu"),
        "seed": seed,
        "log_level": os.getenv("REFINEREG_LOG_LEVEL", "INFO").upper(),
    }


def coerce(key: str, text: str, default: Any) -> Any:
    """Read `text` as the type of `default`; tuples are comma separated."""
    try:
        if isinstance(default, bool):
            word = text.lower()
            if word in TRUE_WORDS:
                return True
            if word in FALSE_WORDS:
                return False
            raise ValueError(word)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            item = type(default[0]) if default else float
            return tuple(item(part.strip()) for part in text.split(",") if part.strip())
        return text
    except ValueError:
        raise ConfigError(f"Cannot read {key} = {text!r}", key=key)


def read_config_file(path: Path) -> Dict[str, Dict[str, str]]:
    """Raw `section -> key -> text` mapping; the last assignment of a key wins."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as e:
        raise ConfigError(f"Cannot read config file {path}: {e}", key=str(path))

    sections: Dict[str, Dict[str, str]] = {}
    for number, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{number}: expected 'section.key = value'", key=line)
        key, value = (part.strip() for part in line.split("=", 1))
        if "." not in key:
            raise ConfigError(f"{path}:{number}: key {key!r} has no section", key=key)
        section, name = key.split(".", 1)
        sections.setdefault(section, {})[name] = value
    return sections


def apply_section(section: str, target, values: Dict[str, str], renames: Optional[Dict[str, str]] = None):
    """A copy of dataclass `target` with `values` coerced onto its fields."""
    renames = renames or {}
    known = {f.name for f in fields(target)}
    changes = {}
    for key, text in values.items():
        name = renames.get(key, key)
        if name not in known:
            raise ConfigError(f"Unknown config key {section}.{key}", key=f"{section}.{key}")
        if is_dataclass(getattr(target, name)):
            raise ConfigError(f"{section}.{key} is a settings group, set its keys instead", key=f"{section}.{key}")
        changes[name] = coerce(f"{section}.{key}", text, getattr(target, name))
    try:
        return replace(target, **changes)
    except ValueError as e:
        raise ConfigError(f"Invalid {section} settings: {e}", key=section)


def load_config(path: Optional[Path] = None) -> RunConfig:
    """
    Build the run configuration: dataclass defaults, then the environment, then the file.

    Args:
        path: Optional config file

    Returns:
        RunConfig
    """
    env = env_defaults()
    sections = read_config_file(path) if path is not None else {}
    unknown = set(sections) - {"network", "train", "loss", "data", "synth", "grid"}
    if unknown:
        section = sorted(unknown)[0]
        raise ConfigError(f"Unknown config section {section!r}", key=section)

    network = apply_section("network", NetworkConfig(), sections.get("network", {}))

    loss = dict(sections.get("loss", {}))
    smooth_norm = loss.pop("smooth_norm", None)
    weights = apply_section("loss", LossWeights(), loss, renames={"lambda": "lam"})

    train_values = dict(sections.get("train", {}))
    if smooth_norm is not None:
        train_values["smooth_norm"] = smooth_norm
    if "stage_schedule" in train_values:
        raise ConfigError("Set train.steps_per_stage and train.final_steps instead", key="train.stage_schedule")
    base = TrainConfig(network=network, weights=weights, seed=env["seed"], device=env["device"])
    train_config = apply_section("train", base, train_values)

    # regenerate the schedule from the new block lengths
    if {"steps_per_stage", "final_steps"} & set(train_values):
        train_config = replace(train_config, stage_schedule=None)

    synth_values = dict(sections.get("synth", {}))
    synth = apply_section("synth", SynthConfig(seed=train_config.seed), synth_values)
    try:
        synth.validate()
    except ValueError as e:
        raise ConfigError(f"Invalid synth settings: {e}", key="synth")

    data_settings = apply_section("data", DataSettings(), sections.get("data", {}))
    grid = apply_section("grid", GridSettings(), sections.get("grid", {}))
    return RunConfig(train=train_config, synth=synth, data=data_settings, grid=grid)


def with_overrides(
    run: RunConfig,
    seed: Optional[int] = None,
    device: Optional[str] = None,
    no_refine_core: bool = False,
    no_rigid: bool = False,
    no_range_loss: bool = False,
    no_smooth_loss: bool = False,
) -> RunConfig:
    """Apply CLI flags on top of a loaded configuration."""
    network = replace(
        run.train.network,
        use_refine_core=run.train.network.use_refine_core and not no_refine_core,
        use_rigid=run.train.network.use_rigid and not no_rigid,
    )
    weights = replace(
        run.train.weights,
        alpha=0.0 if no_range_loss else run.train.weights.alpha,
        beta=0.0 if no_smooth_loss else run.train.weights.beta,
    )
    train_config = replace(
        run.train,
        network=network,
        weights=weights,
        seed=run.train.seed if seed is None else seed,
        device=run.train.device if device is None else device,
    )
    synth = replace(run.synth, seed=run.synth.seed if seed is None else seed)
    return replace(run, train=train_config, synth=synth)
