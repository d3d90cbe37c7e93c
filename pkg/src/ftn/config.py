"""Experiment configuration: presets, INI-style files and overrides.

Files are ``key = value`` lines under section headers. Every key must be
known; a typo is a :class:`~ftn.errors.ConfigError`, never a silent default.

Example::

    [experiment]
    name = mnist-shuffled
    variant = ftn-slow

    [run]
    scale = desk
    seeds = 0, 1, 2
"""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass
from pathlib import Path

from .configurer import VARIANTS
from .errors import ConfigError

EXPERIMENTS = ("synthetic-clf", "synthetic-reg", "mnist-shuffled", "permuted-mnist")


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str = "synthetic-clf"
    variant: str = "ftn-slow"
    n_tasks: int = 3
    # architecture
    D: int = 32
    L: int = 8
    d_inner: int = 8
    k: int = 128
    dropout_p: float = 0.2
    lr: float = 3e-4
    # scales the hidden/head init bound; sqrt(3) makes those tanh layers variance-preserving
    init_gain: float = 1.0
    # schedule
    epochs: int = 1
    steps_per_epoch: int = 1000
    batch_train: int = 256
    batch_recfg: int = 256
    batch_eval: int = 4096
    support_size: int = 256
    # configurer
    reconfig_S: int = 1
    reconfig_lr: float = 1.0
    schedule: str = "per-batch"
    # ewc
    ewc_lambda: float = 400.0
    fisher_batches: int = 50
    fisher_batch_size: int = 256
    # run
    seeds: tuple = tuple(range(8))
    scale: str = "full"
    data_dir: str = "data/mnist"
    out_dir: str = "runs"
    workers: int = 1

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; choose from {', '.join(EXPERIMENTS)}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        if self.schedule not in ("per-batch", "per-epoch"):
            raise ConfigError(f"schedule must be per-batch or per-epoch, got {self.schedule!r}")
        if self.scale not in ("full", "desk"):
            raise ConfigError(f"scale must be full or desk, got {self.scale!r}")
        for name in ("n_tasks", "D", "L", "d_inner", "k", "epochs", "steps_per_epoch", "batch_train",
                     "batch_recfg", "batch_eval", "support_size", "reconfig_S", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.k > self.D * self.D:
            raise ConfigError(f"k={self.k} exceeds H={self.D * self.D}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError("dropout_p must lie in [0, 1)")
        if self.init_gain <= 0:
            raise ConfigError("init_gain must be > 0")
        if self.ewc_lambda < 0:
            raise ConfigError("ewc_lambda must be >= 0")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.experiment.startswith("synthetic") and self.n_tasks > 3:
            raise ConfigError("the synthetic benchmark has exactly 3 latent blocks (n_tasks <= 3)")

    @property
    def H(self) -> int:
        return self.D * self.D

    @property
    def d_in(self) -> int:
        return 2 if self.experiment.startswith("synthetic") else 784

    @property
    def d_out(self) -> int:
        return {"synthetic-clf": 2, "synthetic-reg": 1}.get(self.experiment, 10)

    @property
    def is_regression(self) -> bool:
        return self.experiment == "synthetic-reg"

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["seeds"] = list(self.seeds)
        return d

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


# full-scale defaults per experiment
PRESETS = {
    "synthetic-clf": dict(n_tasks=3, epochs=1, steps_per_epoch=1000, reconfig_S=1, reconfig_lr=1.0,
                          schedule="per-batch"),
    "synthetic-reg": dict(n_tasks=3, epochs=1, steps_per_epoch=1000, reconfig_S=10, reconfig_lr=0.2,
                          schedule="per-batch"),
    "mnist-shuffled": dict(n_tasks=5, epochs=5, steps_per_epoch=400, reconfig_S=20, reconfig_lr=0.2,
                           schedule="per-epoch"),
    "permuted-mnist": dict(n_tasks=10, epochs=3, steps_per_epoch=400, reconfig_S=10, reconfig_lr=0.3,
                           schedule="per-epoch"),
}
ALIASES = {"exp1-clf": "synthetic-clf", "exp1-reg": "synthetic-reg", "exp2": "mnist-shuffled",
           "exp3": "permuted-mnist"}

DESK = {
    "synthetic-clf": dict(steps_per_epoch=250),
    "synthetic-reg": dict(steps_per_epoch=250),
    "mnist-shuffled": dict(n_tasks=3, epochs=2, steps_per_epoch=200),
    "permuted-mnist": dict(n_tasks=4, epochs=1, steps_per_epoch=200),
}
DESK_COMMON = dict(D=16, k=32, seeds=(0, 1, 2))


def preset(experiment: str, scale: str = "full", **overrides) -> ExperimentConfig:
    experiment = ALIASES.get(experiment, experiment)
    if experiment not in PRESETS:
        raise ConfigError(f"unknown experiment {experiment!r}")
    values = dict(PRESETS[experiment], experiment=experiment, scale=scale)
    if scale == "desk":
        values.update(DESK_COMMON)
        values.update(DESK[experiment])
    values.update(overrides)
    return ExperimentConfig(**values)


# config-file key -> (field, parser)
def _seeds(text: str) -> tuple:
    out = []
    for part in text.replace(",", " ").split():
        if "-" in part:
            lo, hi = part.split("-")
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    return tuple(out)


_SECTIONS = {
    "experiment": {"name": ("experiment", str), "variant": ("variant", str), "n_tasks": ("n_tasks", int)},
    "model": {"D": ("D", int), "L": ("L", int), "d_inner": ("d_inner", int), "k": ("k", int),
              "dropout_p": ("dropout_p", float), "lr": ("lr", float),
              "init_gain": ("init_gain", float)},
    "schedule": {"epochs": ("epochs", int), "steps_per_epoch": ("steps_per_epoch", int),
                 "batch_train": ("batch_train", int), "batch_recfg": ("batch_recfg", int),
                 "batch_eval": ("batch_eval", int), "support_size": ("support_size", int)},
    "configurer": {"reconfig_S": ("reconfig_S", int), "reconfig_lr": ("reconfig_lr", float),
                   "schedule": ("schedule", str)},
    "ewc": {"lambda": ("ewc_lambda", float), "fisher_batches": ("fisher_batches", int),
            "fisher_batch_size": ("fisher_batch_size", int)},
    "run": {"seeds": ("seeds", _seeds), "scale": ("scale", str), "data_dir": ("data_dir", str),
            "out_dir": ("out_dir", str), "workers": ("workers", int)},
}


def _lookup(section: str, key: str):
    if section not in _SECTIONS:
        raise ConfigError(f"unknown section [{section}]; known: {', '.join(_SECTIONS)}")
    if key not in _SECTIONS[section]:
        raise ConfigError(f"unknown key {key!r} in [{section}]; known: {', '.join(_SECTIONS[section])}")
    return _SECTIONS[section][key]


def parse_assignments(pairs: dict[tuple[str, str], str]) -> dict:
    out = {}
    for (section, key), raw in pairs.items():
        name, conv = _lookup(section, key)
        try:
            out[name] = conv(raw.strip())
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}") from exc
    return out


def read_config_text(text: str, source: str = "<config>") -> dict[tuple[str, str], str]:
    cp = configparser.ConfigParser(interpolation=None, strict=True)
    cp.optionxform = str  # keep D and friends case-sensitive
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    if cp.defaults():
        raise ConfigError(f"{source}: keys outside a section are not allowed")
    return {(s, k): v for s in cp.sections() for k, v in cp.items(s)}


def load_config(path=None, overrides: dict | None = None, sets=(), text: str | None = None) -> ExperimentConfig:
    """Resolve a config: experiment preset, file keys, desk scaling, then command-line values.

    ``sets`` holds ``section.key=value`` strings from the command line;
    ``overrides`` holds already-typed field values. With ``scale = desk`` the
    desk sizes replace whatever the file says for those keys, so a full-scale
    file can be shrunk with ``--preset desk``.
    """
    pairs = {}
    if path is not None:
        text = Path(path).read_text()
        source = str(path)
    else:
        source = "<config>"
    if text is not None:
        pairs.update(read_config_text(text, source))
    file_values = parse_assignments(pairs)
    cli_pairs = {}
    for item in sets:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        lhs, value = item.split("=", 1)
        section, key = lhs.strip().split(".", 1)
        cli_pairs[(section, key)] = value
    cli_values = parse_assignments(cli_pairs)
    cli_values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    values = {**file_values, **cli_values}
    if "data_dir" not in values and os.environ.get("FTN_DATA_DIR"):
        values["data_dir"] = os.environ["FTN_DATA_DIR"]
    name = values.pop("experiment", None)
    if name is None:
        raise ConfigError("config must name an experiment ([experiment] name = ...)")
    experiment = ALIASES.get(name, name)
    if experiment not in PRESETS:
        raise ConfigError(f"unknown experiment {name!r}; choose from {', '.join(EXPERIMENTS)}")
    scale = values.pop("scale", "full")
    if scale == "desk":
        desk_keys = set(DESK_COMMON) | set(DESK[experiment])
        values = {k: v for k, v in values.items() if k not in desk_keys or k in cli_values}
    return preset(experiment, scale, **values)


def format_config(cfg: ExperimentConfig) -> str:
    """Render a config back into the file format (round-trips through load_config)."""
    d = cfg.to_dict()
    lines = []
    for section, keys in _SECTIONS.items():
        lines.append(f"[{section}]")
        for key, (name, _) in keys.items():
            value = d[name]
            if name == "seeds":
                value = ", ".join(str(s) for s in value)
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)
