import logging
from argparse import Namespace

from src.commands.common import manifest_from_args, output_dir, require
from src.repository import reports
from src.schemas import optimizer_spec
from src.services.optimizers import Objective, run_optimizer
from src.services.toymodel import make_toy_dataset
from src.services.training import TrainingEvaluator

logger = logging.getLogger(__name__)


def register(subparsers, parents) -> None:
    parser = subparsers.add_parser("tune", parents=parents,
                                   help="Tune a live toy objective with one optimizer")
    parser.set_defaults(handler=cmd_tune)


def cmd_tune(args: Namespace) -> int:
    """
    Run one optimizer against live training and report the best configuration.

    The reported configuration is the best full-fidelity observation; when the
    optimizer never trained at full fidelity its last recommendation is trained
    once more at full fidelity (outside the budget) to score it.

    :param args: Namespace: Parsed command line
    :return: Exit code
    """
    manifest = manifest_from_args(args)
    section = require(manifest.tune, "tune")
    epsilon = args.epsilon if args.epsilon is not None else section.epsilon
    seed = args.seed_list[0] if args.seed_list else section.seed
    spec = optimizer_spec(section.optimizer, section.hyperband_eta, section.init_design_size)

    evaluator = TrainingEvaluator(make_toy_dataset(manifest.data), epsilon, seed=section.train_seed,
                                  model_spec=manifest.model, cost=section.cost)
    objective = Objective(evaluator, section.alpha_weight)
    state = run_optimizer(spec, manifest.space, objective, section.budget, seed)

    if state.incumbent is not None:
        best = state.incumbent
        config, value, std_error, adv_error = best.config, best.value, best.std_error, best.adv_error
    else:
        config = state.recommendations[-1][1]
        value, std_error, adv_error, _ = objective(config, state.grid.full)
        logger.info("No full-fidelity observation within budget, recommendation scored separately")

    out = output_dir(args)
    reports.write_json({
        "optimizer": spec.label,
        "seed": seed,
        "epsilon": epsilon,
        "config": reports.config_dict(config),
        "fidelity": {"epochs": state.grid.epochs_max, "attack_iters": state.grid.iters_max},
        "objective": value,
        "std_error": std_error,
        "adv_error": adv_error,
        "evaluations": len(state.history),
        "spent_s": state.elapsed,
    }, out / "best_config.json")
    reports.write_history(state, out / "tune_history.csv")
    logger.info("Best objective %.4f after %d evaluations (%.1f s)", value, len(state.history), state.elapsed)
    return 0
