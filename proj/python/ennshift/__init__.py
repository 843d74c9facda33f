"""Epistemic neural networks (epinets and ensembles) on synthetic shift suites."""

import json

from . import _core
from ._core import (
    EnnshiftError,
    Model,
    accuracy,
    aupr,
    corrupt,
    corruptions,
    ece,
    failure_rate,
    generate_dataset,
    load_model,
    mce,
    sha256_hex,
)

__all__ = [
    "EnnshiftError",
    "Model",
    "Pipeline",
    "accuracy",
    "aupr",
    "checkpoint_metadata",
    "corrupt",
    "corruptions",
    "default_config",
    "ece",
    "failure_rate",
    "generate_dataset",
    "load_model",
    "mce",
    "resolve_config",
    "sha256_hex",
]


def default_config():
    return json.loads(_core.default_config())


def resolve_config(config):
    """Fill defaults and validate; raises EnnshiftError("config_error: ...")."""
    return json.loads(_core.resolve_config(json.dumps(config)))


def checkpoint_metadata(path):
    return json.loads(_core.checkpoint_metadata(path))


class Pipeline(_core.Pipeline):
    def __init__(self, config, out, jobs=1):
        super().__init__(json.dumps(config), str(out), jobs)
