"""Run configuration files.

INI sections ([model], [train], [data], [run]) with key=value lines and
`#` comments.  Unknown sections or keys are rejected outright, and every
value is converted and validated before any command touches a dataset,
so a typo fails in milliseconds instead of after a load.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .network import Topology, build_architecture
from .trainer import TrainConfig

DATASETS = ("mnist", "moving_bar")


class ConfigError(ValueError):
    """The configuration cannot be used; the message names the key."""


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_floats(raw: str) -> tuple[float, ...]:
    return tuple(float(p) for p in raw.split(",") if p.strip())


@dataclass(frozen=True)
class RunConfig:
    """Everything a subcommand needs, with defaults matching the small
    fully connected setup."""

    # model
    architecture: str = "1fc"
    n_classes: int = 10
    n_perclass: int = 1
    kappa: float = 2.0
    # train
    lam: float = 0.5
    t_free: int = 60
    t_nudge: int = 15
    beta: float = 0.75
    learning_rate: float = 3e-3
    batch_size: int = 4
    bias_mode: str = "random_sign"
    optimizer: str = "sgd"
    weight_decay: float = 0.0
    epochs: int = 1
    # data
    dataset: str = "mnist"
    data_root: str | None = None
    subset: int = 0
    test_subset: int = 0
    n_samples: int = 256
    frames: int = 5
    size: int = 8
    # run
    seed: int = 0
    workers: int = 1
    out_dir: str = "runs"
    checkpoint: str | None = None
    threshold: float = 0.95
    beta_sweep: bool = False
    betas: tuple[float, ...] = (0.5, 0.1, 0.01)
    kappas: tuple[float, ...] = (0.5, 1.0, 2.0, 4.0)
    stability_samples: int = 100
    ifr: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.dataset not in DATASETS:
            raise ConfigError(
                f"data.dataset must be one of {DATASETS}, got {self.dataset!r}")
        if self.workers < 1:
            raise ConfigError(f"run.workers must be >= 1, got {self.workers}")
        if self.epochs < 0:
            raise ConfigError(f"train.epochs must be >= 0, got {self.epochs}")
        if self.subset < 0 or self.test_subset < 0:
            raise ConfigError("data subsets must be >= 0 (0 means all)")
        if not self.betas or any(b <= 0 for b in self.betas):
            raise ConfigError("run.betas must be a non-empty list of "
                              "positive values")
        if not self.kappas or any(k < 0 for k in self.kappas):
            raise ConfigError("run.kappas must be non-empty and "
                              "non-negative")
        if self.stability_samples < 1:
            raise ConfigError("run.stability_samples must be >= 1")
        # surface model/train errors now, not mid-run
        try:
            self.topology()
            self.train_config()
        except ConfigError:
            raise
        except ValueError as err:
            raise ConfigError(str(err)) from err

    def topology(self) -> Topology:
        input_shape = (2, self.size, self.size) \
            if self.dataset == "moving_bar" else None
        return build_architecture(self.architecture, self.n_classes,
                                  self.n_perclass, input_shape)

    def train_config(self, epochs: int | None = None) -> TrainConfig:
        return TrainConfig(
            lam=self.lam, t_free=self.t_free,
            t_nudge=self.t_nudge, beta=self.beta, kappa=self.kappa,
            learning_rate=self.learning_rate, batch_size=self.batch_size,
            n_perclass=self.n_perclass, bias_mode=self.bias_mode,
            optimizer=self.optimizer, weight_decay=self.weight_decay,
            epochs=self.epochs if epochs is None else epochs, seed=self.seed)


# (section, key) -> (attribute, converter); the converter's ValueError
# text ends up in the ConfigError.
_KEYS = {
    ("model", "architecture"): ("architecture", str),
    ("model", "n_classes"): ("n_classes", int),
    ("model", "n_perclass"): ("n_perclass", int),
    ("model", "kappa"): ("kappa", float),
    ("train", "lam"): ("lam", float),
    ("train", "t_free"): ("t_free", int),
    ("train", "t_nudge"): ("t_nudge", int),
    ("train", "beta"): ("beta", float),
    ("train", "learning_rate"): ("learning_rate", float),
    ("train", "batch_size"): ("batch_size", int),
    ("train", "bias_mode"): ("bias_mode", str),
    ("train", "optimizer"): ("optimizer", str),
    ("train", "weight_decay"): ("weight_decay", float),
    ("train", "epochs"): ("epochs", int),
    ("data", "dataset"): ("dataset", str),
    ("data", "root"): ("data_root", str),
    ("data", "subset"): ("subset", int),
    ("data", "test_subset"): ("test_subset", int),
    ("data", "n_samples"): ("n_samples", int),
    ("data", "frames"): ("frames", int),
    ("data", "size"): ("size", int),
    ("run", "seed"): ("seed", int),
    ("run", "workers"): ("workers", int),
    ("run", "out"): ("out_dir", str),
    ("run", "checkpoint"): ("checkpoint", str),
    ("run", "threshold"): ("threshold", float),
    ("run", "beta_sweep"): ("beta_sweep", _parse_bool),
    ("run", "betas"): ("betas", _parse_floats),
    ("run", "kappas"): ("kappas", _parse_floats),
    ("run", "stability_samples"): ("stability_samples", int),
    ("run", "ifr"): ("ifr", _parse_floats),
}

_SECTIONS = tuple(dict.fromkeys(section for section, _ in _KEYS))


def parse_config_text(text: str, origin: str = "<string>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None,
                                       inline_comment_prefixes=("#",))
    try:
        parser.read_string(text, source=origin)
    except configparser.Error as err:
        raise ConfigError(f"{origin}: {err}") from err
    values = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"{origin}: unknown section [{section}]")
        for key, raw in parser.items(section):
            spec = _KEYS.get((section, key))
            if spec is None:
                raise ConfigError(f"{origin}: unknown key {section}.{key}")
            attr, convert = spec
            try:
                values[attr] = convert(raw)
            except ValueError as err:
                raise ConfigError(
                    f"{origin}: bad value for {section}.{key}: {err}") from err
    return RunConfig(**values)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    return parse_config_text(text, origin=str(path))


def preset_names() -> list[str]:
    files = resources.files("stochep") / "presets"
    return sorted(p.name[:-4] for p in files.iterdir()
                  if p.name.endswith(".ini"))


def find_config(name_or_path: str) -> RunConfig:
    """A filesystem path, or the bare name of a shipped preset."""
    if Path(name_or_path).is_file():
        return load_config(name_or_path)
    preset = resources.files("stochep") / "presets" / f"{name_or_path}.ini"
    if preset.is_file():
        return parse_config_text(preset.read_text(),
                                 origin=f"preset:{name_or_path}")
    raise ConfigError(
        f"no config file at {name_or_path!r} and no preset of that name "
        f"(presets: {', '.join(preset_names())})")


def override(cfg: RunConfig, **changes) -> RunConfig:
    """Replace fields (CLI flags beat file values), revalidating."""
    changes = {k: v for k, v in changes.items() if v is not None}
    return dataclasses.replace(cfg, **changes)
