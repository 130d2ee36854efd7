"""Command-line entry point: ``armplan {train,eval,plan,bench,export-traj}``."""

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

log = logging.getLogger("armplan")


def _parser():
    p = argparse.ArgumentParser(prog="armplan", description="Manipulator motion-planning workbench")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a PPO policy")
    t.add_argument("--config", required=True, help="training config JSON")
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int, help="override total_steps")
    t.add_argument("--init", help="start from this checkpoint instead of a fresh network")
    t.add_argument("--out", required=True, help="output directory (checkpoint, curve.csv, episodes.csv)")

    e = sub.add_parser("eval", help="roll a trained policy on an experiment")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--experiment", type=int, required=True)
    e.add_argument("--trials", type=int, default=30)
    e.add_argument("--out", help="write per-trial CSV here")

    pl = sub.add_parser("plan", help="plan one trial and dump its trajectory")
    pl.add_argument("--planner", required=True, choices=["rrt", "birrt", "drl"])
    pl.add_argument("--experiment", type=int, required=True)
    pl.add_argument("--seed", type=int, default=0)
    pl.add_argument("--checkpoint", help="required for --planner drl")
    pl.add_argument("--out", help="trajectory JSON-lines file (default: plan_<planner>_exp<N>_s<seed>.jsonl)")

    b = sub.add_parser("bench", help="run a benchmark suite")
    b.add_argument("--config", help="suite config JSON (default: bundled full suite)")
    b.add_argument("--out", required=True, help="report directory")
    b.add_argument("--trials", type=int, help="override trials per cell")
    b.add_argument("--experiments", help="comma-separated subset, e.g. 1,4")
    b.add_argument("--planners", help="comma-separated subset of drl,rrt,birrt")

    x = sub.add_parser("export-traj", help="convert a JSON-lines episode log to per-step CSV")
    x.add_argument("log", help="episode or trajectory log (.jsonl)")
    x.add_argument("--out", required=True)
    return p


def cmd_train(args):
    from .ppo import TrainConfig, train
    cfg = TrainConfig.load(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.steps is not None:
        cfg = replace(cfg, total_steps=args.steps)

    def progress(row):
        log.info("iter %d  steps %d  reward %.2f  success %.3f  rho %.4f", row["iteration"],
                 row["env_steps"], row["mean_reward"], row["success_rate"], row["rho_tilde"])

    params = None
    if args.init:
        from .policy import load_checkpoint
        if not Path(args.init).is_file():
            raise OSError(f"checkpoint not found: {args.init}")
        params = load_checkpoint(args.init, expected_spec=cfg.network)
    train(cfg, out_dir=args.out, params=params, progress=progress)
    print(Path(args.out) / "policy.ckpt")
    return 0


def cmd_eval(args):
    from .bench import TRIAL_FIELDS, load_experiment, run_trial
    exp = load_experiment(args.experiment)
    rows = [run_trial(exp, "drl", seed, checkpoint=args.checkpoint).as_row()
            for seed in range(args.trials)]
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.DictWriter(fh, TRIAL_FIELDS)
            w.writeheader()
            w.writerows(rows)
    ok = sum(r["success"] for r in rows)
    print(f"experiment {args.experiment}: {ok}/{len(rows)} successful")
    return 0


def cmd_plan(args):
    from .bench import load_experiment, run_trial
    if args.planner == "drl" and not args.checkpoint:
        raise UsageError("--planner drl needs --checkpoint")
    exp = load_experiment(args.experiment)
    out = args.out or f"plan_{args.planner}_exp{args.experiment}_s{args.seed}.jsonl"
    rec = run_trial(exp, args.planner, args.seed, checkpoint=args.checkpoint, trajectory_path=out)
    print(json.dumps(rec.as_row()))
    return 0


def cmd_bench(args):
    from .bench import SuiteConfig, run_suite
    cfg = SuiteConfig.load(args.config) if args.config else SuiteConfig()
    if args.trials:
        cfg = replace(cfg, trials=args.trials)
    if args.experiments:
        cfg = replace(cfg, experiments=tuple(int(v) for v in args.experiments.split(",")))
    if args.planners:
        cfg = replace(cfg, planners=tuple(args.planners.split(",")))
    report = run_suite(cfg, out_dir=args.out)
    print(report["text"])
    return 0


def cmd_export(args):
    from .bench import export_trajectory
    n = export_trajectory(args.log, args.out)
    print(f"wrote {n} rows to {args.out}")
    return 0


class UsageError(Exception):
    pass


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "plan": cmd_plan, "bench": cmd_bench,
            "export-traj": cmd_export}


def main(argv=None):
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    logging.basicConfig(level=logging.INFO if args.verbose or args.command == "train"
                        else logging.WARNING, format="%(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"armplan: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError) as exc:
        print(f"armplan: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
