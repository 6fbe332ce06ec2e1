"""Continual training loop: exposure schedules, the per-exposure
collect / train M / train C / snapshot / dream cycle, checkpoints and resume.
"""

from __future__ import annotations

import logging
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import numerics as nx
from .config import ExperimentConfig, format_config
from .controller import init_c_params, make_distill_optimizer, train_c_exposure
from .envs import Env
from .metrics import CONDITION_NAMES, MetricsLog, knn_task_attribution
from .rollouts import (Rollout, RolloutSet, collect_policy_rollouts, episode_seed,
                       generate_sim_rollouts, load_rollouts, random_episodes, rollout_filename, save_rollouts,
                       split_index)
from .vae import VAE, train_vae
from .world_model import evaluate_m, init_m_params, train_m_epoch

log = logging.getLogger(__name__)


class ScheduleError(ValueError):
    pass


# ---------------------------------------------------------------------------
# exposure schedule
# ---------------------------------------------------------------------------


@dataclass
class ExposureSchedule:
    entries: list[tuple[int, int]]
    exposures_per_task: int = 3
    total_epochs_per_task: int = 30

    @property
    def total_epochs(self) -> int:
        return sum(n for _, n in self.entries)

    def epoch_offsets(self) -> list[int]:
        out, cursor = [], 0
        for _, n in self.entries:
            out.append(cursor)
            cursor += n
        return out


def _durations(rng: np.random.Generator, exposures: int, remaining: int, min_epochs: int) -> list[int]:
    out = []
    for left in range(exposures, 1, -1):
        d = int(rng.integers(min_epochs, remaining // left + 1))
        out.append(d)
        remaining -= d
    out.append(remaining)
    return out


def sample_exposure_schedule(num_tasks: int, rng: np.random.Generator, exposures: int = 3, total: int = 30,
                             min_epochs: int = 3, first_epochs: int | None = None) -> ExposureSchedule:
    """Random exposure order; entry 0 is always (task 0, ``first_epochs``).

    Durations are drawn per task in sequence, each uniform on
    [min_epochs, remaining // exposures_left]; the last exposure takes the rest.
    """
    if num_tasks < 1 or exposures < 1 or min_epochs < 1:
        raise ScheduleError("need at least one task, exposure and epoch")
    if total < exposures * min_epochs:
        raise ScheduleError(f"total {total} < exposures {exposures} x min_epochs {min_epochs}")
    if first_epochs is None:
        first_epochs = total // exposures
    if exposures == 1:
        first_epochs = total
    rest = total - first_epochs
    if first_epochs < min_epochs or (exposures > 1 and rest < (exposures - 1) * min_epochs):
        raise ScheduleError(f"pinned first exposure of {first_epochs} epochs is infeasible")
    head = (0, first_epochs)
    entries = []
    if exposures > 1:
        entries += [(0, d) for d in _durations(rng, exposures - 1, rest, min_epochs)]
    for task in range(1, num_tasks):
        entries += [(task, d) for d in _durations(rng, exposures, total, min_epochs)]
    order = rng.permutation(len(entries))
    return ExposureSchedule([head] + [entries[i] for i in order], exposures, total)


def schedule_for(cfg: ExperimentConfig, seed: int) -> ExposureSchedule:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 31]))
    return sample_exposure_schedule(len(cfg.tasks), rng, cfg.exposures, cfg.total_epochs, cfg.min_epochs)


# ---------------------------------------------------------------------------
# shared family data: V plus random-policy rollouts and held-out test sets
# ---------------------------------------------------------------------------

FAMILY_KEYS = ("seed", "tasks", "frame_height", "frame_width", "channels", "frame_skip", "max_episode_steps",
               "latent_dim", "conv_stack", "vae_lr", "vae_batch", "vae_patience", "vae_min_delta", "vae_beta",
               "vae_epoch_samples", "vae_max_epochs", "vae_test_frames", "latent_mode", "rollouts", "tmax", "tmin")


@dataclass
class Family:
    vae: VAE
    train: list[list[Rollout]]
    test: list[list[Rollout]]
    vae_history: list[float] = field(default_factory=list)

    def reference_latents(self) -> tuple[np.ndarray, np.ndarray]:
        zs, labels = [], []
        for task, ros in enumerate(self.test):
            for ro in ros:
                zs.append(ro.z)
                labels.append(np.full(len(ro.z), task))
        return np.concatenate(zs), np.concatenate(labels)


def latent_fn_for(vae: VAE, mode: str) -> Callable[[np.ndarray, np.random.Generator], np.ndarray]:
    if mode == "mean":
        return lambda frames, rng: vae.encode_mean(frames)
    return vae.encode_sample


def _fingerprint(cfg: ExperimentConfig) -> str:
    sub = ExperimentConfig(**{k: getattr(cfg, k) for k in FAMILY_KEYS})
    return "\n".join(line for line in format_config(sub).splitlines() if line.split(" = ")[0] in FAMILY_KEYS)


def family_paths(cfg: ExperimentConfig) -> dict[str, Path]:
    d = Path(cfg.outdir) / "family"
    return {"dir": d, "vae": d / "vae.prwm", "fingerprint": d / "family.txt",
            **{f"{split}{k}": d / f"family_task{k}_{split}.prrl"
               for k in range(len(cfg.tasks)) for split in ("train", "test")}}


def _load_family(cfg: ExperimentConfig, paths: dict[str, Path]) -> Family | None:
    if not paths["fingerprint"].exists() or paths["fingerprint"].read_text() != _fingerprint(cfg):
        return None
    try:
        vae = VAE(cfg.vae_config(), params=nx.load_params(paths["vae"]))
        train = [load_rollouts(paths[f"train{k}"]).rollouts for k in range(len(cfg.tasks))]
        test = [load_rollouts(paths[f"test{k}"]).rollouts for k in range(len(cfg.tasks))]
    except (OSError, ValueError):
        return None
    return Family(vae, train, test)


def family_vae_seed(cfg: ExperimentConfig) -> int:
    return episode_seed(cfg.seed, 101)


def family_episodes(cfg: ExperimentConfig) -> list[list[tuple]]:
    """Random-policy episodes (frames, actions, rewards, dones) per task; deterministic in cfg.seed."""
    rcfg = cfg.rollout_config()
    episodes = []
    for k, name in enumerate(cfg.tasks):
        env = Env(name, **cfg.env_kwargs)
        eps = [(f.astype(np.float32), a, r, d) for f, a, r, d in random_episodes(env, k, rcfg, cfg.seed)]
        episodes.append(eps)
        log.info("family: %d random episodes of %s (mean length %.0f)", len(eps), name,
                 np.mean([len(e[1]) for e in eps]))
    return episodes


def _vae_frames(cfg: ExperimentConfig, episodes, n_train):
    """All training-split frames, plus a seeded subsample of the test split for early stopping."""
    train_frames = np.concatenate([e[0] for k, eps in enumerate(episodes) for e in eps[:n_train[k]]])
    test_frames = np.concatenate([e[0] for k, eps in enumerate(episodes) for e in eps[n_train[k]:]])
    pick = np.random.default_rng(np.random.SeedSequence([cfg.seed, 41]))
    if len(test_frames) > cfg.vae_test_frames:
        test_frames = test_frames[np.sort(pick.choice(len(test_frames), cfg.vae_test_frames, replace=False))]
    return train_frames, test_frames


def family_vae_frames(cfg: ExperimentConfig) -> tuple[np.ndarray, np.ndarray]:
    """Regenerate the exact (train, test) frame sets V was fitted on."""
    episodes = family_episodes(cfg)
    return _vae_frames(cfg, episodes, [split_index(len(eps)) for eps in episodes])


def prepare_family(cfg: ExperimentConfig, force: bool = False) -> Family:
    """Train V on random-policy frames of every task and encode the rollouts.

    The result is cached under <outdir>/family and reused while the relevant
    configuration keys are unchanged.
    """
    paths = family_paths(cfg)
    if not force:
        fam = _load_family(cfg, paths)
        if fam is not None:
            return fam
    paths["dir"].mkdir(parents=True, exist_ok=True)
    episodes = family_episodes(cfg)
    n_train = [split_index(len(eps)) for eps in episodes]
    train_frames, test_frames = _vae_frames(cfg, episodes, n_train)
    log.info("family: training V on %d frames", len(train_frames))
    result = train_vae(train_frames, test_frames, cfg.vae_config(), seed=family_vae_seed(cfg))
    del train_frames
    vae = result.vae
    latent_fn = latent_fn_for(vae, cfg.latent_mode)
    train, test = [], []
    for k, eps in enumerate(episodes):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, k, 7]))
        ros = [Rollout(latent_fn(f, rng), a, r, d, "real", k) for f, a, r, d in eps]
        train.append(ros[:n_train[k]])
        test.append(ros[n_train[k]:])
        save_rollouts(RolloutSet(train[-1], "real", cfg.latent_dim), paths[f"train{k}"])
        save_rollouts(RolloutSet(test[-1], "real", cfg.latent_dim), paths[f"test{k}"])
    nx.save_params(vae.params, paths["vae"])
    paths["fingerprint"].write_text(_fingerprint(cfg))
    return Family(vae, train, test, result.history)


# ---------------------------------------------------------------------------
# one run: a single condition of a single replication
# ---------------------------------------------------------------------------


def run_name(rep: int, rehearsal: bool) -> str:
    return f"rep{rep:02d}_{CONDITION_NAMES[rehearsal]}"


def run_dir_for(cfg: ExperimentConfig, rep: int, rehearsal: bool) -> Path:
    return Path(cfg.outdir) / run_name(rep, rehearsal)


def rollout_dir_for(cfg: ExperimentConfig, rep: int, rehearsal: bool) -> Path:
    if cfg.rollout_dir:
        return Path(cfg.rollout_dir) / run_name(rep, rehearsal)
    return run_dir_for(cfg, rep, rehearsal) / "rollouts"


@dataclass
class RunState:
    m_params: nx.ParamSet
    c_params: nx.ParamSet
    m_opt: nx.Adam
    c_opt: nx.Adam
    d_opt: nx.Adam

    def tensors(self) -> dict[str, np.ndarray]:
        out = {f"m.{k}": v for k, v in self.m_params.params.items()}
        out.update({f"c.{k}": v for k, v in self.c_params.params.items()})
        out.update(self.m_opt.state_tensors("m_opt"))
        out.update(self.c_opt.state_tensors("c_opt"))
        out.update(self.d_opt.state_tensors("d_opt"))
        return out

    def load(self, tensors: dict[str, np.ndarray]) -> None:
        for ps, prefix in ((self.m_params, "m."), (self.c_params, "c.")):
            for k in ps.names():
                ps.params[k][...] = tensors[prefix + k]
        self.m_opt.load_state_tensors(tensors, "m_opt")
        self.c_opt.load_state_tensors(tensors, "c_opt")
        self.d_opt.load_state_tensors(tensors, "d_opt")


def _fresh_state(cfg: ExperimentConfig, seed: int) -> RunState:
    mcfg = cfg.model_config()
    m_params = init_m_params(mcfg, episode_seed(seed, 21))
    c_params = init_c_params(mcfg.latent_dim + mcfg.hidden, cfg.controller_config(), episode_seed(seed, 22))
    return RunState(m_params, c_params, nx.Adam(m_params, lr=cfg.m_lr), nx.Adam(c_params, lr=cfg.c_lr),
                    make_distill_optimizer(c_params, cfg.c_lr))


def checkpoint_path(run_dir: Path, entry: int) -> Path:
    return run_dir / "checkpoints" / f"exposure_{entry:03d}.prwm"


def latest_checkpoint(run_dir: Path) -> int | None:
    """Index of the last exposure with both its checkpoint and its log on disk."""
    best = None
    for p in (run_dir / "checkpoints").glob("exposure_*.prwm"):
        e = int(p.stem.split("_")[1])
        if p.with_suffix(".json").exists() and (best is None or e > best):
            best = e
    return best


def is_complete(run_dir: Path) -> bool:
    return (run_dir / "log.json").exists()


class Interrupted(RuntimeError):
    """Raised by ``stop_after`` to emulate a crash right after a checkpoint."""


def run_continual_experiment(cfg: ExperimentConfig, family: Family, rep: int, seed: int, rehearsal: bool,
                             schedule: ExposureSchedule | None = None, stop_after: int | None = None) -> MetricsLog:
    """Run every schedule entry for one condition, resuming from the last checkpoint if any."""
    schedule = schedule or schedule_for(cfg, seed)
    mcfg, tcfg, ccfg, rcfg = cfg.model_config(), cfg.m_train_config(), cfg.controller_config(), cfg.rollout_config()
    run_dir = run_dir_for(cfg, rep, rehearsal)
    ro_dir = rollout_dir_for(cfg, rep, rehearsal)
    (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    ro_dir.mkdir(parents=True, exist_ok=True)
    name = run_name(rep, rehearsal)
    (run_dir / "seeds.txt").write_text(f"family_seed = {cfg.seed}\nrun_seed = {seed}\nrep = {rep}\n"
                                       f"rehearsal = {'on' if rehearsal else 'off'}\n")
    (run_dir / "config.txt").write_text(format_config(cfg))
    latent_fn = latent_fn_for(family.vae, cfg.latent_mode)
    ref_z, ref_task = family.reference_latents()
    n_tasks = len(cfg.tasks)

    state = _fresh_state(cfg, seed)
    mlog = MetricsLog(CONDITION_NAMES[rehearsal], rep, seed, list(cfg.tasks), list(schedule.entries),
                      reward_window=cfg.reward_window)
    sim: RolloutSet | None = None
    start = 0
    resume = latest_checkpoint(run_dir)
    if resume is not None:
        ckpt = checkpoint_path(run_dir, resume)
        state.load(nx.load_tensors(ckpt))
        mlog = MetricsLog.load(ckpt.with_suffix(".json"))
        if mlog.schedule != list(schedule.entries):
            raise RuntimeError(f"{run_dir}: checkpoint belongs to a different schedule")
        sim = load_rollouts(ro_dir / rollout_filename(name, resume, "simulated"))
        start = resume + 1
        log.info("%s: resuming after exposure %d", name, resume)

    offsets = schedule.epoch_offsets()
    for e in range(start, len(schedule.entries)):
        task, n_epochs = schedule.entries[e]
        if e == 0:
            real = family.train[task]
        else:
            collected = collect_policy_rollouts(cfg.tasks[task], task, cfg.env_kwargs, latent_fn, state.m_params,
                                                mcfg, state.c_params, rcfg, episode_seed(seed, e, 3))
            save_rollouts(collected, ro_dir / rollout_filename(name, e, "real"))
            real = collected.split(0.9)[0]
        use_sim = rehearsal and e > 0 and sim is not None
        m_rng = np.random.default_rng(np.random.SeedSequence([seed, e, 1]))
        for k in range(n_epochs):
            epoch = offsets[e] + k
            stats = train_m_epoch(real, sim.rollouts if use_sim else None, state.m_params, state.m_opt,
                                  mcfg, tcfg, m_rng)
            mlog.batch_rows.append((epoch, stats.real_batches, stats.sim_batches))
            losses = []
            for j in range(n_tasks):
                loss = evaluate_m(family.test[j], state.m_params, mcfg, tcfg.seq_len)
                if not np.isfinite(loss):
                    raise FloatingPointError(f"{name}: non-finite test loss at epoch {epoch}")
                mlog.loss_rows.append((epoch, task, j, loss))
                losses.append(loss)
            log.info("%s epoch %d [%s] train %.4f test %s", name, epoch, cfg.tasks[task], stats.loss,
                     " ".join(f"{x:.4f}" for x in losses))

        c_rng = np.random.default_rng(np.random.SeedSequence([seed, e, 2]))
        env = Env(cfg.tasks[task], **cfg.env_kwargs)
        rewards = train_c_exposure(env, lambda f: latent_fn(f[None], c_rng)[0], state.m_params, mcfg.hidden,
                                   state.c_params, state.c_opt, state.d_opt if use_sim else None,
                                   sim.rollouts if use_sim else None, ccfg, c_rng, episode_seed(seed, e, 5))
        base = e * ccfg.n_steps_per_exposure
        mlog.reward_events += [(base + f, task, r) for f, r in
                               zip(rewards.episode_end_frames, rewards.episode_returns)]
        log.info("%s exposure %d [%s]: %d episodes, median return %s, %d distilled frames", name, e,
                 cfg.tasks[task], len(rewards.episode_returns),
                 f"{np.median(rewards.episode_returns):.2f}" if rewards.episode_returns else "n/a",
                 rewards.distilled_frames)

        m_star, c_star = state.m_params.copy(), state.c_params.copy()
        sim = generate_sim_rollouts(m_star, mcfg, c_star, cfg.sim_rollouts, cfg.tmax, episode_seed(seed, e, 4),
                                    cfg.sim_temperature)
        save_rollouts(sim, ro_dir / rollout_filename(name, e, "simulated"))
        mlog.attribution.append((e, _attribution(sim, ref_z, ref_task, cfg, n_tasks, seed, e).tolist()))

        ckpt = checkpoint_path(run_dir, e)
        nx.save_tensors(state.tensors(), ckpt)
        mlog.save(ckpt.with_suffix(".json"))
        if stop_after is not None and e >= stop_after:
            raise Interrupted(f"{name}: stopped after exposure {e}")

    mlog.save(run_dir / "log.json")
    return mlog


def _attribution(sim: RolloutSet, ref_z, ref_task, cfg: ExperimentConfig, n_tasks: int, seed: int, e: int):
    pz = np.concatenate([ro.z for ro in sim])
    rng = np.random.default_rng(np.random.SeedSequence([seed, e, 6]))
    if len(pz) > cfg.knn_samples:
        pz = pz[np.sort(rng.choice(len(pz), cfg.knn_samples, replace=False))]
    return knn_task_attribution(pz, ref_z, ref_task, cfg.knn_k, n_tasks)


# ---------------------------------------------------------------------------
# replications
# ---------------------------------------------------------------------------


def reset_run(cfg: ExperimentConfig, rep: int, rehearsal: bool) -> None:
    for d in (run_dir_for(cfg, rep, rehearsal), rollout_dir_for(cfg, rep, rehearsal)):
        if d.exists():
            shutil.rmtree(d)


def run_replications(cfg: ExperimentConfig, family: Family, n_reps: int | None = None,
                     force: bool = False) -> list[MetricsLog]:
    """Paired conditions per replication: same schedule and seeds, differing only in rehearsal."""
    seeds = cfg.replication_seeds() if n_reps is None else cfg.replication_seeds()[:n_reps]
    logs = []
    for rep, seed in enumerate(seeds):
        schedule = schedule_for(cfg, seed)
        for rehearsal in cfg.conditions():
            run_dir = run_dir_for(cfg, rep, rehearsal)
            if force:
                reset_run(cfg, rep, rehearsal)
            elif is_complete(run_dir):
                logs.append(MetricsLog.load(run_dir / "log.json"))
                continue
            logs.append(run_continual_experiment(cfg, family, rep, seed, rehearsal, schedule))
    return logs


def load_logs(outdir: str | Path) -> list[MetricsLog]:
    return [MetricsLog.load(p) for p in sorted(Path(outdir).glob("rep*_*/log.json"))]
