import math
from argparse import Namespace
from pathlib import Path

from src.conf.manifest import load_manifest
from src.exceptions import ConfigurationError
from src.schemas import RunManifest


def manifest_from_args(args: Namespace) -> RunManifest:
    return load_manifest(args.manifest)


def output_dir(args: Namespace) -> Path:
    """The --out directory, or the manifest's own directory; created if needed."""
    out = Path(args.out) if args.out else Path(args.manifest).resolve().parent
    out.mkdir(parents=True, exist_ok=True)
    return out


def resolve_input(path: str, args: Namespace) -> Path:
    """Relative input paths are taken relative to the manifest file."""
    resolved = Path(path)
    if not resolved.is_absolute():
        resolved = Path(args.manifest).resolve().parent / resolved
    if not resolved.is_file():
        raise ConfigurationError(f"Input file '{resolved}' not found")
    return resolved


def require(section, name: str):
    if section is None:
        raise ConfigurationError(f"The manifest has no '{name}' section")
    return section


def epsilon_tag(epsilon: float) -> str:
    """File name tag of a bound: ``8of255`` for 8/255, the plain value otherwise."""
    scaled = epsilon * 255
    if math.isclose(scaled, round(scaled), abs_tol=1e-9):
        return f"{round(scaled)}of255"
    return f"{epsilon:g}"
