import logging
from argparse import Namespace

from src.commands.common import manifest_from_args, output_dir
from src.services.toymodel import make_toy_dataset
from src.services.training import grid_sweep

logger = logging.getLogger(__name__)


def register(subparsers, parents) -> None:
    parser = subparsers.add_parser("sweep", parents=parents,
                                   help="Train and evaluate every (config, fidelity, epsilon, seed) cell")
    parser.set_defaults(handler=cmd_sweep)


def cmd_sweep(args: Namespace) -> int:
    """
    Generate a tabular dataset with the toy two-phase trainer.

    :param args: Namespace: Parsed command line
    :return: Exit code
    """
    manifest = manifest_from_args(args)
    space = manifest.space
    if args.epsilon is not None:
        space = space.copy(update={"epsilons": [args.epsilon]})
    seeds = args.seed_list or manifest.sweep.seeds
    output = output_dir(args) / manifest.sweep.output
    data = make_toy_dataset(manifest.data)
    dataset = grid_sweep(space, data, seeds, model_spec=manifest.model, output=output, jobs=args.jobs,
                         cost=manifest.sweep.cost, resume=manifest.sweep.resume)
    logger.info("Dataset of %d records written to %s", len(dataset), output)
    return 0
