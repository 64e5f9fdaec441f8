"""Command-line interface.

Exit statuses: 0 success, 1 usage error, 2 data or version error,
3 numerical divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from permsort.env import MAX_LENGTH, MIN_LENGTH, EnvConfig, apply_swap, inversion_count, is_sorted
from permsort.errors import CheckpointVersionError, ContractViolation
from permsort.model import ModelConfig, act_greedy, load_checkpoint
from permsort.ppo import PPOConfig
from permsort.probe import ProbeConfig, accuracy_from_actions, evaluate, evaluation_set

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _length(text: str) -> int:
    v = int(text)
    if not MIN_LENGTH <= v <= MAX_LENGTH:
        raise argparse.ArgumentTypeError(f"length must be in [{MIN_LENGTH}, {MAX_LENGTH}]")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="permsort", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train one agent into a run directory")
    p.add_argument("--length", type=_length, required=True)
    p.add_argument("--embed-dim", type=int, required=True)
    p.add_argument("--timesteps", type=_positive, default=1_000_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--layers", type=int, choices=(1, 2), default=1)
    p.add_argument("--max-steps", type=_positive, default=1000)
    p.add_argument("--update-epochs", type=_positive, default=4)
    p.add_argument("--no-probe", action="store_true", help="skip probing the final checkpoint")
    p.add_argument("--no-plots", action="store_true")
    p.add_argument("--force", action="store_true", help="overwrite an existing run directory")

    p = sub.add_parser("eval", help="greedy rollouts from every start state")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--max-steps", type=_positive, default=1000)

    p = sub.add_parser("probe", help="run interpretability probes on a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--weight-source", choices=("post", "pre"), default="post")
    p.add_argument("--format", choices=("json", "text"), default="text")
    p.add_argument("--out", type=Path, help="output directory (default: the run directory)")
    p.add_argument("--no-plots", action="store_true")

    p = sub.add_parser("sweep", help="train and probe every cell of a sweep file")
    p.add_argument("spec", type=Path)
    p.add_argument("--workers", type=_positive)

    p = sub.add_parser("report", help="aggregate completed runs")
    p.add_argument("runs_dir", type=Path)
    p.add_argument("--out", type=Path, help="output directory (default: RUNS_DIR/report)")
    p.add_argument("--min-accuracy", type=float, default=0.99,
                   help="accuracy threshold for the high-accuracy population")
    p.add_argument("--no-plots", action="store_true")
    return parser


def cmd_train(args) -> int:
    from permsort.runs import train_run

    out: Path = args.out
    if (out / "manifest").exists() and not args.force:
        raise UsageError(f"{out} already holds a run; pass --force to overwrite")
    model_cfg = ModelConfig(args.length, args.embed_dim, args.layers)
    ppo_cfg = PPOConfig(total_timesteps=args.timesteps, seed=args.seed, update_epochs=args.update_epochs)
    env_cfg = EnvConfig(args.length, args.max_steps, args.seed)
    train_run(out, ppo_cfg, model_cfg, env_cfg, probe=not args.no_probe, plots=not args.no_plots)
    print(out)
    return EXIT_OK


def greedy_rollout(params, start, max_steps: int) -> tuple[bool, int]:
    p, steps = tuple(int(t) for t in start), 0
    while not is_sorted(p) and steps < max_steps:
        p = apply_swap(p, act_greedy(params, p))
        steps += 1
    return is_sorted(p), steps


def cmd_eval(args) -> int:
    from permsort.runs import resolve_checkpoint

    params, manifest = load_checkpoint(resolve_checkpoint(args.checkpoint))
    n = int(manifest["length"])
    perms = evaluation_set(n)
    ev = evaluate(params, perms)
    starts = [p for p in perms if not is_sorted(p)]
    solved = optimal = 0
    steps = []
    for p in starts:
        ok, k = greedy_rollout(params, p, args.max_steps)
        solved += ok
        optimal += ok and k == inversion_count(p)
        steps.append(k)
    result = {
        "accuracy": accuracy_from_actions(ev.perms, ev.actions),
        "solved_fraction": solved / len(starts),
        "optimal_fraction": optimal / len(starts),
        "mean_steps": float(np.mean(steps)),
        "n_starts": len(starts),
    }
    print(json.dumps(result, indent=2))
    return EXIT_OK


def cmd_probe(args) -> int:
    from permsort.runs import probe_checkpoint

    report = probe_checkpoint(args.checkpoint, args.out, ProbeConfig(weight_source=args.weight_source),
                              plots=not args.no_plots)
    if args.format == "json":
        print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    else:
        rates = "  ".join(f"top{k}={v:.3f}" for k, v in report.top_k_hit_rates.items())
        print(f"accuracy                 {report.accuracy:.4f}")
        print(f"non-inversion proportion {report.non_inversion_proportion:.4f}")
        print(f"swap rule ({report.sign_convention}) {rates}")
        print(f"greedy trap rate         {report.greedy_trap_rate:.4f}")
        print(f"permutations evaluated   {report.n_permutations_evaluated}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    from permsort.sweep import SweepSpec, run_sweep

    if not args.spec.is_file():
        raise UsageError(f"sweep file {args.spec} not found")
    spec = SweepSpec.load(args.spec)
    if args.workers:
        spec = SweepSpec.from_dict({**spec.__dict__, "workers": args.workers}, environ={})
    status = run_sweep(spec)
    failed = [k for k, v in status.items() if v == "failed"]
    for k, v in sorted(status.items()):
        print(f"{v:9s} {k}")
    return EXIT_DATA if failed else EXIT_OK


def cmd_report(args) -> int:
    from permsort.report import aggregate, discover, write_report

    if not args.runs_dir.is_dir():
        raise FileNotFoundError(f"{args.runs_dir} is not a directory")
    rep = aggregate(discover(args.runs_dir), args.min_accuracy)
    out = args.out or args.runs_dir / "report"
    paths = write_report(rep, out, plots=not args.no_plots)
    for p in paths.values():
        print(p)
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "probe": cmd_probe, "sweep": cmd_sweep, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    from permsort.report import NothingToReport

    try:
        return COMMANDS[args.command](args)
    except (UsageError, ContractViolation) as exc:
        print(f"permsort {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointVersionError, NothingToReport, FileNotFoundError) as exc:
        print(f"permsort {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"permsort {args.command}: numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
