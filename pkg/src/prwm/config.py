"""Flat ``key = value`` experiment configuration: schema, parsing, echo."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable

from .controller import ControllerConfig
from .envs import TASK_REGISTRY
from .rollouts import RolloutConfig
from .vae import VaeConfig
from .world_model import MTrainConfig, ModelConfig

SEED_ENV = "PRWM_SEED"
REQUIRED = ("tasks", "outdir")
REHEARSAL_MODES = ("on", "off", "both")
LATENT_MODES = ("sample", "mean")


class ConfigError(ValueError):
    pass


def _doc(text: str, **kw):
    return field(metadata={"doc": text}, **kw)


@dataclass
class ExperimentConfig:
    tasks: tuple[str, ...] = _doc("task names, trained in schedule order; the first is pinned", default=())
    outdir: str = _doc("experiment output directory", default="")
    seed: int = _doc("family seed (V, random rollouts, test sets); defaults to $PRWM_SEED or 0", default=0)
    seeds: tuple[int, ...] = _doc("replication seeds; empty means seed+1 .. seed+n_reps", default=())
    n_reps: int = _doc("replications for the replicate command", default=1)
    rehearsal: str = _doc("on | off | both (both runs the paired conditions)", default="both")
    rollout_dir: str = _doc("where rollout files go; empty means <run dir>/rollouts", default="")

    frame_height: int = _doc("observation height", default=32)
    frame_width: int = _doc("observation width", default=32)
    channels: int = _doc("observation channels", default=1)
    frame_skip: int = _doc("emulator ticks per agent step", default=4)
    max_episode_steps: int = _doc("hard episode cap in agent steps", default=1000)

    latent_dim: int = _doc("L, latent size", default=8)
    conv_stack: tuple[int, ...] = _doc("encoder channels per 4x4 stride-2 conv", default=(16, 32))
    vae_lr: float = _doc("V learning rate", default=1e-3)
    vae_batch: int = _doc("V minibatch", default=32)
    vae_patience: int = _doc("early-stopping patience in epochs", default=5)
    vae_min_delta: float = _doc("minimum test-loss improvement", default=1e-4)
    vae_beta: float = _doc("KL weight relative to the summed-pixel ELBO", default=0.25)
    vae_epoch_samples: int = _doc("frames drawn per V epoch", default=10000)
    vae_max_epochs: int = _doc("V epoch cap", default=30)
    vae_test_frames: int = _doc("held-out frames scored per V epoch", default=2000)
    latent_mode: str = _doc("sample | mean: how frames become stored latents", default="sample")

    mdn_mixtures: int = _doc("G, Gaussians per latent dimension", default=5)
    lstm_hidden: int = _doc("H, LSTM width", default=64)
    m_lr: float = _doc("M learning rate", default=1e-3)
    m_batches_per_epoch: int = _doc("M minibatches per epoch", default=100)
    m_batch: int = _doc("sequences per M minibatch", default=16)
    m_seq_len: int = _doc("M training window length", default=32)

    c_hidden: int = _doc("C hidden width", default=512)
    c_lr: float = _doc("C learning rate", default=1e-3)
    tau: float = _doc("distillation temperature", default=0.01)
    gamma: float = _doc("discount", default=0.99)
    horizon: int = _doc("A2C n-step horizon", default=5)
    value_coef: float = _doc("critic loss weight", default=0.5)
    entropy_coef: float = _doc("entropy bonus weight", default=0.01)
    n_steps_per_exposure: int = _doc("real frames of C training per exposure", default=20000)
    distill_window: int = _doc("K, frames per real/distill alternation", default=2000)
    distill_batch: int = _doc("distillation minibatch", default=64)

    rollouts: int = _doc("N, real rollouts per collection", default=100)
    sim_rollouts: int = _doc("simulated rollouts per snapshot", default=100)
    tmax: int = _doc("rollout length cap", default=300)
    tmin: int = _doc("short real rollouts are resampled", default=100)
    sim_temperature: float = _doc("M sampling temperature for dreams", default=1.0)

    exposures: int = _doc("exposures per task", default=3)
    total_epochs: int = _doc("M epochs per task over all exposures", default=30)
    min_epochs: int = _doc("minimum epochs per exposure", default=3)
    knn_k: int = _doc("neighbours for task attribution", default=5)
    knn_samples: int = _doc("pseudo-latents classified per snapshot", default=1000)
    reward_window: int = _doc("frames per median-reward window", default=5000)

    # -- derived module configs --------------------------------------------

    @property
    def frame_shape(self) -> tuple[int, int, int]:
        return (self.frame_height, self.frame_width, self.channels)

    @property
    def env_kwargs(self) -> dict:
        return {"frame_shape": self.frame_shape, "frame_skip": self.frame_skip, "max_steps": self.max_episode_steps}

    def vae_config(self) -> VaeConfig:
        npix = self.frame_height * self.frame_width * self.channels
        return VaeConfig(self.frame_shape, self.latent_dim, tuple(self.conv_stack), self.vae_lr, self.vae_batch,
                         self.vae_patience, self.vae_min_delta, self.vae_beta / npix, self.vae_epoch_samples,
                         self.vae_max_epochs)

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.latent_dim, self.mdn_mixtures, self.lstm_hidden)

    def m_train_config(self) -> MTrainConfig:
        return MTrainConfig(self.m_lr, self.m_batches_per_epoch, self.m_batch, self.m_seq_len)

    def controller_config(self) -> ControllerConfig:
        return ControllerConfig(self.c_hidden, self.c_lr, self.tau, self.gamma, self.horizon, self.value_coef,
                                self.entropy_coef, self.n_steps_per_exposure, self.distill_window,
                                self.distill_batch)

    def rollout_config(self) -> RolloutConfig:
        return RolloutConfig(self.rollouts, self.tmax, self.tmin)

    def replication_seeds(self) -> list[int]:
        if self.seeds:
            if len(self.seeds) < self.n_reps:
                raise ConfigError(f"seeds lists {len(self.seeds)} entries but n_reps={self.n_reps}")
            return list(self.seeds[:self.n_reps])
        return [self.seed + 1 + i for i in range(self.n_reps)]

    def conditions(self) -> list[bool]:
        return {"on": [True], "off": [False], "both": [True, False]}[self.rehearsal]


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------


def _parse_bool(s: str) -> bool:
    low = s.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_list(item):
    def parse(s: str):
        parts = [p.strip() for p in s.split(",")]
        return tuple(item(p) for p in parts if p)
    return parse


_PARSERS = {
    "int": int,
    "float": float,
    "str": str,
    "bool": _parse_bool,
    "tuple[str, ...]": _parse_list(str),
    "tuple[int, ...]": _parse_list(int),
}

SCHEMA = {f.name: f for f in fields(ExperimentConfig)}


def _coerce(key: str, raw: str):
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    kind = SCHEMA[key].type
    try:
        return _PARSERS[kind](raw.strip())
    except ValueError as exc:
        raise ConfigError(f"{key}: expected {kind}, got {raw.strip()!r}") from exc


def parse_lines(lines: Iterable[str], source: str = "<config>") -> dict:
    values = {}
    for lineno, line in enumerate(lines, 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in text.split("=", 1))
        values[key] = _coerce(key, raw)
    return values


def parse_overrides(overrides: Iterable[str]) -> dict:
    values = {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        values[key.strip()] = _coerce(key.strip(), raw)
    return values


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    for key in REQUIRED:
        if not getattr(cfg, key):
            raise ConfigError(f"missing required key {key!r}")
    if cfg.rehearsal not in REHEARSAL_MODES:
        raise ConfigError(f"rehearsal must be one of {REHEARSAL_MODES}")
    if cfg.latent_mode not in LATENT_MODES:
        raise ConfigError(f"latent_mode must be one of {LATENT_MODES}")
    if len(set(cfg.tasks)) != len(cfg.tasks):
        raise ConfigError("duplicate task names")
    unknown = [t for t in cfg.tasks if t not in TASK_REGISTRY]
    if unknown:
        raise ConfigError(f"unknown task(s) {', '.join(unknown)}; known: {', '.join(sorted(TASK_REGISTRY))}")
    if cfg.total_epochs < cfg.exposures * cfg.min_epochs:
        raise ConfigError("total_epochs < exposures * min_epochs")
    if cfg.n_reps < 1:
        raise ConfigError("n_reps must be >= 1")
    for name in ("latent_dim", "mdn_mixtures", "lstm_hidden", "c_hidden", "rollouts", "sim_rollouts", "tmax",
                 "m_batch", "m_seq_len", "horizon", "knn_k", "reward_window", "frame_skip", "exposures"):
        if getattr(cfg, name) < 1:
            raise ConfigError(f"{name} must be positive")
    if cfg.tau <= 0:
        raise ConfigError("tau must be positive")
    return cfg


def parse_config(path: str | Path | None = None, overrides: Iterable[str] = ()) -> ExperimentConfig:
    """defaults <- file <- overrides, then validation."""
    values: dict = {}
    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None:
        values["seed"] = _coerce("seed", env_seed)
    if path is not None:
        p = Path(path)
        values.update(parse_lines(p.read_text(encoding="utf-8").splitlines(), str(p)))
    values.update(parse_overrides(overrides))
    return validate(ExperimentConfig(**values))


def _format_value(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(_format_value(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def format_config(cfg: ExperimentConfig) -> str:
    lines = ["# resolved configuration"]
    for f in fields(cfg):
        lines.append(f"{f.name} = {_format_value(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"


def write_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(format_config(cfg), encoding="utf-8")


def replace(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    return validate(dataclasses.replace(cfg, **changes))
