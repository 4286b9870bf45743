import logging
from argparse import Namespace
from itertools import permutations
from typing import Dict, List

from src.commands.common import epsilon_tag, manifest_from_args, output_dir, require, resolve_input
from src.repository import reports
from src.repository.datasets import load_dataset
from src.schemas import optimizer_spec
from src.services import plots
from src.services.harness import RunTrace, build_oracle, build_trace, run_seeds, speedup

logger = logging.getLogger(__name__)


def register(subparsers, parents) -> None:
    parser = subparsers.add_parser("replay", parents=parents,
                                   help="Replay the optimizers against a dataset with simulated cost")
    parser.set_defaults(handler=cmd_replay)


def pairwise_speedups(traces: List[RunTrace]) -> Dict[str, float]:
    """Speedup of every ordered pair of optimizers reported in the same mode."""
    return {f"{a.label} vs {b.label} ({a.mode})": speedup(a, b)
            for a, b in permutations(traces, 2) if a.mode == b.mode}


def cmd_replay(args: Namespace) -> int:
    """
    Replay every configured optimizer over the seed list and write per-seed traces,
    aggregates, the summary with pairwise speedups and the trace plots.

    :param args: Namespace: Parsed command line
    :return: Exit code
    """
    manifest = manifest_from_args(args)
    section = require(manifest.replay, "replay")
    epsilon = args.epsilon if args.epsilon is not None else section.epsilon
    seeds = args.seed_list or section.seeds
    ds = load_dataset(resolve_input(section.dataset, args), manifest.space)
    oracle = build_oracle(ds, epsilon, manifest.space)
    modes = ["observed", "recommendation"] if section.mode == "both" else [section.mode]
    out = output_dir(args)

    traces: List[RunTrace] = []
    for label in section.optimizers:
        spec = optimizer_spec(label, section.hyperband_eta, section.init_design_size)
        states, failed = run_seeds(spec, oracle, seeds, section.budget, section.alpha_weight, args.jobs)
        for mode in modes:
            trace = build_trace(spec, states, failed, oracle, section.budget, mode, section.alpha_weight)
            reports.write_run(trace, out)
            traces.append(trace)
            logger.info("%s (%s): final mean objective %.4f over %d seeds", label, mode, trace.final_mean,
                        len(trace.seeds))

    speedups = pairwise_speedups(traces)
    reports.write_json(reports.replay_summary(traces, speedups, section.budget, epsilon), out / "summary.json")
    if section.plots:
        for mode in modes:
            plots.trace_plot([t for t in traces if t.mode == mode], out / f"traces_{mode}_{epsilon_tag(epsilon)}.svg")
    logger.info("Replay outputs written to %s", out)
    return 0
