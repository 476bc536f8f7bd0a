"""Experiment configuration.

The config file is INI-style (read with :mod:`configparser`)::

    [experiment]
    seed = 0

    [schedule]
    T = 200
    family = linear
    beta_start = 5e-4
    beta_end = 0.1
    sigma_choice = beta_tilde

    [denoiser]
    hidden = 128, 128
    embed_dim = 16
    n_freq = 4            # d_tok is derived as 4 * n_freq

    [training]
    dataset = ring
    steps = 20000
    batch = 128
    lr = 2e-3
    lr_final = 1e-4
    null_condition_rate = 0.3
    ema = 0.999

    [norm]
    lambda = 4
    alpha = 0.5

    [viewport]
    D = 256
    min_coverage = 0.2

    [scene]
    object_points = 400
    center = 12, 4
    size = 4.5, 1.9, 1.6
    yaw = 0.3

Every section and key is optional; anything not listed above is rejected.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, replace

from .denoiser import DATASETS, DenoiserConfig, TrainConfig
from .diffusion import SIGMA_CHOICES, NoiseSchedule, make_linear_schedule
from .errors import ConfigError
from .scenes import SceneConfig


@dataclass(frozen=True)
class ScheduleConfig:
    T: int = 200
    family: str = "linear"
    beta_start: float = 5e-4
    beta_end: float = 0.1
    sigma_choice: str = "beta_tilde"

    def build(self) -> NoiseSchedule:
        return make_linear_schedule(self.T, self.beta_start, self.beta_end)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    hidden: tuple[int, ...] = (128, 128)
    embed_dim: int = 16
    n_freq: int = 4
    training: TrainConfig = field(default_factory=TrainConfig)
    norm_lambda: float = 4.0
    norm_alpha: float = 0.5
    D: int = 256
    min_coverage: float = 0.2
    scene: SceneConfig = field(default_factory=SceneConfig)

    def denoiser(self) -> DenoiserConfig:
        return DenoiserConfig(hidden=self.hidden, embed_dim=self.embed_dim,
                              d_tok=4 * self.n_freq, T=self.schedule.T)

    def with_seed(self, seed: int | None) -> "ExperimentConfig":
        return self if seed is None else replace(self, seed=seed)


def _floats(text, n=None):
    vals = tuple(float(v) for v in text.split(","))
    if n is not None and len(vals) != n:
        raise ValueError(f"expected {n} comma-separated numbers")
    return vals


_KEYS = {
    "experiment": {"seed": int},
    "schedule": {"T": int, "family": str, "beta_start": float, "beta_end": float,
                 "sigma_choice": str},
    "denoiser": {"hidden": lambda v: tuple(int(x) for x in v.split(",")),
                 "embed_dim": int, "n_freq": int},
    "training": {"dataset": str, "steps": int, "batch": int, "lr": float, "lr_final": float,
                 "null_condition_rate": float, "ema": float},
    "norm": {"lambda": float, "alpha": float},
    "viewport": {"D": int, "min_coverage": float},
    "scene": {"object_points": int, "center": lambda v: _floats(v, 2),
              "size": lambda v: _floats(v, 3), "yaw": float, "density": float},
}


def parse_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.optionxform = str  # keep key case (T, D)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None

    values: dict[str, dict] = {}
    for section in cp.sections():
        if section not in _KEYS:
            raise ConfigError(f"unknown section [{section}]; allowed: {', '.join(_KEYS)}")
        values[section] = {}
        for key, raw in cp.items(section):
            conv = _KEYS[section].get(key)
            if conv is None:
                raise ConfigError(f"unknown key '{key}' in [{section}]; "
                                  f"allowed: {', '.join(_KEYS[section])}")
            try:
                values[section][key] = conv(raw.strip())
            except ValueError as exc:
                raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}") from None
    return _build(values)


def _build(v: dict) -> ExperimentConfig:
    sch = v.get("schedule", {})
    schedule = ScheduleConfig(**sch)
    if schedule.family != "linear":
        raise ConfigError(f"[schedule] family must be 'linear', got {schedule.family!r}")
    if schedule.sigma_choice not in SIGMA_CHOICES:
        raise ConfigError(f"[schedule] sigma_choice must be one of {SIGMA_CHOICES}")
    if schedule.T < 1:
        raise ConfigError("[schedule] T must be >= 1")
    if not (0 < schedule.beta_start < 1 and 0 < schedule.beta_end < 1):
        raise ConfigError("[schedule] betas must lie in (0, 1)")
    if schedule.beta_end < schedule.beta_start:
        raise ConfigError("[schedule] beta_end < beta_start gives a non-monotone schedule")

    den = v.get("denoiser", {})
    hidden = den.get("hidden", (128, 128))
    if not hidden or min(hidden) < 1:
        raise ConfigError("[denoiser] hidden sizes must be positive integers")
    embed_dim = den.get("embed_dim", 16)
    if embed_dim < 2 or embed_dim % 2:
        raise ConfigError("[denoiser] embed_dim must be a positive even number")
    n_freq = den.get("n_freq", 4)
    if n_freq < 1:
        raise ConfigError("[denoiser] n_freq must be >= 1")

    tr = v.get("training", {})
    if tr.get("dataset", "ring") not in DATASETS:
        raise ConfigError(f"[training] dataset must be one of {sorted(DATASETS)}")
    training = TrainConfig(n_freq=n_freq, **tr)  # TrainConfig validates its own ranges

    norm = v.get("norm", {})
    lam, alpha = norm.get("lambda", 4.0), norm.get("alpha", 0.5)
    if lam <= 0:
        raise ConfigError("[norm] lambda must be positive")
    if not 0 < alpha < 1:
        raise ConfigError("[norm] alpha must lie in (0, 1)")

    vp = v.get("viewport", {})
    D, cov = vp.get("D", 256), vp.get("min_coverage", 0.2)
    if D < 32 or D % 32:
        raise ConfigError("[viewport] D must be a positive multiple of 32")
    if not 0 < cov <= 1:
        raise ConfigError("[viewport] min_coverage must lie in (0, 1]")

    sc = v.get("scene", {})
    scene = SceneConfig(**sc)
    if scene.object_points < 0:
        raise ConfigError("[scene] object_points must be >= 0")
    if min(scene.size) <= 0:
        raise ConfigError("[scene] size entries must be positive")
    if not 0 < scene.density <= 1:
        raise ConfigError("[scene] density must lie in (0, 1]")

    return ExperimentConfig(seed=v.get("experiment", {}).get("seed", 0), schedule=schedule,
                            hidden=hidden, embed_dim=embed_dim, n_freq=n_freq,
                            training=training, norm_lambda=lam, norm_alpha=alpha, D=D,
                            min_coverage=cov, scene=scene)


def load_config(path) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
