"""Python front end for the native detector-adaptation core."""

import json

from . import _acia
from ._acia import (
    HarnessError,
    average_precision,
    comparison_plot,
    imbalance_profile,
    iou,
    pca_project,
    report_plots,
)

__all__ = [
    "HarnessError",
    "ablation_suite",
    "average_precision",
    "comparison_plot",
    "default_config",
    "generate_benchmark",
    "imbalance_profile",
    "iou",
    "pca_project",
    "report_plots",
    "resolve_config",
    "run_experiment",
    "save_benchmark",
    "suite_table",
]


def _text(config):
    if config is None:
        return _acia.default_config()
    return config if isinstance(config, str) else json.dumps(config)


def default_config():
    return json.loads(_acia.default_config())


def resolve_config(config=None, overrides=()):
    """Full config after defaults and key=value overrides, as a dict."""
    return json.loads(_acia.resolve_config(_text(config), list(overrides)))


def generate_benchmark(config=None):
    return _acia.generate_benchmark(_text(config))


def save_benchmark(config, out_dir):
    _acia.save_benchmark(_text(config), str(out_dir))


def run_experiment(config=None, out_dir=""):
    return _acia.run_experiment(_text(config), str(out_dir))


def ablation_suite(config, out_dir, seeds=(0, 1, 2), sections=()):
    return _acia.ablation_suite(_text(config), str(out_dir), list(seeds), list(sections))


def suite_table(out_dir):
    return _acia.suite_table(str(out_dir))
