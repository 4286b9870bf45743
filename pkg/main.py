import argparse
import logging
import sys
from logging.config import fileConfig
from pathlib import Path
from typing import List, Optional

from src.commands import analyze, replay, sweep, tune
from src.conf.config import settings
from src.exceptions import RobustHptError
from src.schemas import RunManifest, parse_epsilon

logger = logging.getLogger("src.main")

COMMANDS = (sweep, analyze, replay, tune)


def epsilon_arg(text: str) -> float:
    try:
        return parse_epsilon(text)
    except ValueError as err:
        raise argparse.ArgumentTypeError(str(err))


def build_parser() -> argparse.ArgumentParser:
    """
    Command line with one subcommand per workflow step. The help epilog lists
    every key a manifest may set.

    :return: The parser
    """
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--manifest", required=True, help="Key-value manifest (section.key=value lines)")
    common.add_argument("--out", default=None, help="Output directory (default: the manifest's directory)")
    common.add_argument("--jobs", type=int, default=settings.jobs, help="Worker processes")
    common.add_argument("--seed-list", type=int, nargs="+", default=None, help="Override the manifest seeds")
    common.add_argument("--epsilon", type=epsilon_arg, default=None,
                        help="Override the perturbation bound, e.g. 8/255 or 0.03")

    epilog = "manifest keys:\n  " + "\n  ".join(RunManifest.manifest_keys())
    parser = argparse.ArgumentParser(prog="robust-hpt", epilog=epilog,
                                     formatter_class=argparse.RawDescriptionHelpFormatter,
                                     description="Multi-fidelity tuning of adversarially trained models")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for command in COMMANDS:
        command.register(subparsers, [common])
    return parser


def setup_logging(out_dir: Path) -> None:
    config = Path(settings.log_config)
    if not config.is_absolute():
        config = Path(__file__).resolve().parent / config
    fileConfig(config, defaults={"logfile": str(out_dir / settings.log_file)}, disable_existing_loggers=False)
    logging.getLogger("src").setLevel(settings.log_level)


def main(argv: Optional[List[str]] = None) -> int:
    """
    Entry point: 0 on success, 2 on input, configuration or coverage errors, 1 otherwise.
    """
    args = build_parser().parse_args(argv)
    out_dir = Path(args.out) if args.out else Path(args.manifest).resolve().parent
    out_dir.mkdir(parents=True, exist_ok=True)
    setup_logging(out_dir)
    try:
        return args.handler(args)
    except RobustHptError as err:
        logger.error("%s: %s", type(err).__name__, err.detail)
        return err.exit_code
    except Exception:
        logger.exception("Internal error in %s", args.command)
        return 1


if __name__ == "__main__":
    sys.exit(main())
