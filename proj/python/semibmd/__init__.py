"""Semiparametric benchmark dose analysis: monotone spline fits, BMD and BMDLs."""

import json

from ._core import (
    FittedModel,
    KnotVector,
    SemibmdError,
    basis_derivative,
    c_const,
    compute_bmdls,
    de_boor,
    estimate_bmd,
    eval_basis,
    fit,
    make_knots,
    make_uniform_knots,
    penalty_matrix,
    posterior_sample,
    simulate_dataset,
    true_bmd,
)
from . import _core


def analyze(x, y, z=None, **options):
    """Fit, BMD and the three lower limits; returns the report as a dict."""
    return json.loads(_core.analyze_json(x, y, z, **options))


def run_study(config):
    """Coverage and timing study from a config dict; returns the summary dict."""
    return json.loads(_core.run_study_json(json.dumps(config)))


__all__ = [
    "FittedModel",
    "KnotVector",
    "SemibmdError",
    "analyze",
    "basis_derivative",
    "c_const",
    "compute_bmdls",
    "de_boor",
    "estimate_bmd",
    "eval_basis",
    "fit",
    "make_knots",
    "make_uniform_knots",
    "penalty_matrix",
    "posterior_sample",
    "run_study",
    "simulate_dataset",
    "true_bmd",
]
