"""Command-line entry point.

    prwm <command> CONFIG [key=value ...] [--force] [--rollout-dir DIR]

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
Progress goes to stderr; machine-readable output only to files.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import numerics as nx
from .config import ConfigError, ExperimentConfig, format_config, parse_config
from .continual import (checkpoint_path, is_complete, latest_checkpoint, latent_fn_for, load_logs,
                        prepare_family, reset_run, run_continual_experiment, run_dir_for, run_replications,
                        schedule_for)
from .controller import init_c_params
from .envs import Env
from .metrics import write_report
from .rollouts import (RolloutConfig, collect_policy_rollouts, collect_random_rollouts, episode_seed,
                       generate_sim_rollouts, save_rollouts)
from .world_model import evaluate_m, init_m_params

log = logging.getLogger("prwm")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
COMMANDS = ("train-vae", "run", "replicate", "eval", "gen-rollouts", "report")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="prwm", description="Continual world-model training with pseudo-rehearsal.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("config", help="flat key = value config file")
    p.add_argument("overrides", nargs="*", metavar="key=value", help="config overrides")
    p.add_argument("--force", action="store_true", help="discard existing results instead of refusing")
    p.add_argument("--rollout-dir", help="directory for rollout files (overrides rollout_dir)")
    p.add_argument("--n-reps", type=int, help="replications for the replicate command")
    p.add_argument("--kind", choices=("real", "simulated"), default="real", help="gen-rollouts: rollout kind")
    p.add_argument("--task", help="gen-rollouts: task name for real rollouts")
    p.add_argument("--checkpoint", help="gen-rollouts/eval: exposure checkpoint to load M and C from")
    p.add_argument("--out", help="gen-rollouts: output .prrl path")
    p.add_argument("-q", "--quiet", action="store_true", help="only warnings on stderr")
    return p


def _resolve(args) -> ExperimentConfig:
    if not Path(args.config).is_file():
        raise UsageError(f"config file {args.config} not found")
    overrides = list(args.overrides)
    if args.rollout_dir:
        overrides.append(f"rollout_dir={args.rollout_dir}")
    if args.command == "replicate" and args.n_reps is not None:
        overrides.append(f"n_reps={args.n_reps}")
    return parse_config(args.config, overrides)


def _echo_config(cfg: ExperimentConfig, force: bool) -> None:
    out = Path(cfg.outdir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.txt"
    text = format_config(cfg)
    if path.exists() and path.read_text(encoding="utf-8") != text and not force:
        raise UsageError(f"{out} holds results for a different configuration; use --force to overwrite")
    path.write_text(text, encoding="utf-8")


def _runs(cfg: ExperimentConfig, n_reps: int):
    return [(rep, seed, rh) for rep, seed in enumerate(cfg.replication_seeds()[:n_reps]) for rh in cfg.conditions()]


def cmd_train_vae(cfg, args) -> None:
    fam = prepare_family(cfg, force=args.force)
    log.info("V ready: %d parameters, test losses %s", fam.vae.params.num_params(),
             " ".join(f"{x:.5f}" for x in fam.vae_history) or "(cached)")


def _experiment(cfg, args, n_reps: int) -> None:
    runs = _runs(cfg, n_reps)
    if not args.force and all(is_complete(run_dir_for(cfg, rep, rh)) for rep, _, rh in runs):
        raise UsageError(f"{cfg.outdir}: experiment already complete; use --force to rerun")
    fam = prepare_family(cfg)
    if n_reps == 1:
        rep, seed = 0, cfg.replication_seeds()[0]
        schedule = schedule_for(cfg, seed)
        for rh in cfg.conditions():
            if args.force:
                reset_run(cfg, rep, rh)
            elif is_complete(run_dir_for(cfg, rep, rh)):
                continue
            run_continual_experiment(cfg, fam, rep, seed, rh, schedule)
    else:
        run_replications(cfg, fam, n_reps, force=args.force)
    write_report(load_logs(cfg.outdir), cfg.outdir)


def cmd_run(cfg, args) -> None:
    _experiment(cfg, args, 1)


def cmd_replicate(cfg, args) -> None:
    _experiment(cfg, args, cfg.n_reps)


def _load_checkpoint(cfg, path):
    tensors = nx.load_tensors(path)
    mcfg = cfg.model_config()
    m = init_m_params(mcfg, 0)
    c = init_c_params(mcfg.latent_dim + mcfg.hidden, cfg.controller_config(), 0)
    for ps, prefix in ((m, "m."), (c, "c.")):
        for k in ps.names():
            if prefix + k not in tensors:
                raise nx.CheckpointError(f"{path}: missing tensor {prefix + k}")
            ps.params[k][...] = tensors[prefix + k]
    return m, c


def cmd_eval(cfg, args) -> None:
    """Score checkpoints on every task's held-out rollouts into eval.csv."""
    fam = prepare_family(cfg)
    mcfg = cfg.model_config()
    targets = []
    if args.checkpoint:
        targets.append(("checkpoint", Path(args.checkpoint)))
    else:
        for rep, _, rh in _runs(cfg, cfg.n_reps):
            run_dir = run_dir_for(cfg, rep, rh)
            last = latest_checkpoint(run_dir)
            if last is not None:
                targets += [(run_dir.name, checkpoint_path(run_dir, e)) for e in range(last + 1)]
    if not targets:
        raise UsageError("no checkpoints to evaluate")
    rows = ["run,checkpoint,task,loss"]
    for name, path in targets:
        m, _ = _load_checkpoint(cfg, path)
        for j, task in enumerate(cfg.tasks):
            loss = evaluate_m(fam.test[j], m, mcfg, cfg.m_seq_len)
            rows.append(f"{name},{path.stem},{task},{loss!r}")
        log.info("evaluated %s", path)
    (Path(cfg.outdir) / "eval.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")


def cmd_gen_rollouts(cfg, args) -> None:
    if not args.out:
        raise UsageError("gen-rollouts needs --out")
    seed = cfg.seed
    mcfg = cfg.model_config()
    if args.kind == "simulated":
        if not args.checkpoint:
            raise UsageError("simulated rollouts need --checkpoint")
        m, c = _load_checkpoint(cfg, args.checkpoint)
        rset = generate_sim_rollouts(m, mcfg, c, cfg.sim_rollouts, cfg.tmax, episode_seed(seed, 4),
                                     cfg.sim_temperature)
    else:
        if not args.task or args.task not in cfg.tasks:
            raise UsageError(f"--task must be one of {', '.join(cfg.tasks)}")
        task_id = cfg.tasks.index(args.task)
        fam = prepare_family(cfg)
        latent_fn = latent_fn_for(fam.vae, cfg.latent_mode)
        rcfg = RolloutConfig(cfg.rollouts, cfg.tmax, cfg.tmin)
        if args.checkpoint:
            m, c = _load_checkpoint(cfg, args.checkpoint)
            rset = collect_policy_rollouts(args.task, task_id, cfg.env_kwargs, latent_fn, m, mcfg, c, rcfg,
                                           episode_seed(seed, 3))
        else:
            rset = collect_random_rollouts(Env(args.task, **cfg.env_kwargs), task_id, latent_fn, rcfg, seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_rollouts(rset, out)
    log.info("wrote %d %s rollouts to %s", len(rset), rset.kind, out)


def cmd_report(cfg, args) -> None:
    logs = load_logs(cfg.outdir)
    if not logs:
        raise UsageError(f"no run logs under {cfg.outdir}")
    for name, path in write_report(logs, cfg.outdir).items():
        log.info("wrote %s", path)


HANDLERS = {"train-vae": cmd_train_vae, "run": cmd_run, "replicate": cmd_replicate, "eval": cmd_eval,
            "gen-rollouts": cmd_gen_rollouts, "report": cmd_report}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"prwm: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:   # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, stream=sys.stderr,
                        format="%(asctime)s %(name)s: %(message)s", force=True)
    try:
        cfg = _resolve(args)
        _echo_config(cfg, args.force)
        HANDLERS[args.command](cfg, args)
    except (UsageError, ConfigError) as exc:
        print(f"prwm: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, RuntimeError, ArithmeticError) as exc:
        print(f"prwm: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
