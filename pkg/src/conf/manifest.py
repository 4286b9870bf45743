import logging
from pathlib import Path
from typing import Dict, Union

from dotenv import dotenv_values
from pydantic import ValidationError

from src.exceptions import ConfigurationError
from src.schemas import RunManifest

logger = logging.getLogger(__name__)


def parse_manifest(values: Dict[str, str]) -> RunManifest:
    """
    Validate flat ``section.key = value`` pairs into a RunManifest.

    :param values: Dict[str, str]: Raw key-value pairs
    :return: The validated manifest
    :raises ConfigurationError: on unknown sections or keys and on invalid values
    """
    sections = RunManifest.sections()
    grouped: Dict[str, Dict[str, str]] = {}
    for key, value in values.items():
        section, dot, name = key.partition(".")
        if not dot or not name:
            raise ConfigurationError(f"Manifest key '{key}' must look like section.key")
        if section not in sections:
            raise ConfigurationError(f"Unknown manifest section '{section}' (key '{key}'); "
                                     f"expected one of {', '.join(sections)}")
        if value is None:
            raise ConfigurationError(f"Manifest key '{key}' has no value")
        grouped.setdefault(section, {})[name] = value
    try:
        return RunManifest.parse_obj(grouped)
    except ValidationError as err:
        raise ConfigurationError(f"Invalid manifest:\n{err}")


def load_manifest(path: Union[str, Path]) -> RunManifest:
    """
    Read a manifest file: ``section.key=value`` lines, ``#`` comments, comma
    separated lists.

    :param path: Union[str, Path]: Manifest file
    :return: The validated manifest
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"Manifest '{path}' not found")
    manifest = parse_manifest(dotenv_values(path, interpolate=False))
    logger.debug("Loaded manifest %s", path)
    return manifest
