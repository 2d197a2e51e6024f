"""Python bindings for the lsdr label-shift library."""

import json

import numpy as np

from . import _lsdr
from ._lsdr import DomainError, FormatError, Model, coverage_band, config_hash, tv_distance

__all__ = [
    "DomainError",
    "FormatError",
    "Model",
    "config_hash",
    "coverage_band",
    "estimate",
    "estimate_prior",
    "generate",
    "train",
    "tv_distance",
]


def generate(classes, dim, **kwargs):
    """Synthetic labeled/unlabeled split; unlabeled rows carry label -1."""
    out = _lsdr.generate(classes, dim, **kwargs)
    out["labels"] = np.asarray(out["labels"], dtype=np.int64)
    out["hidden_labels"] = np.asarray(out["hidden_labels"], dtype=np.int64)
    out["mixture"] = json.loads(out["mixture"])
    return out


def estimate_prior(kind, posteriors, propensity, labels, clip_floor=1e-3):
    return json.loads(
        _lsdr.estimate_prior(kind, np.asarray(posteriors, dtype=float),
                             np.asarray(propensity, dtype=float), list(labels), clip_floor))


def train(method, num_classes, features, labels, config=None, stage2_config=None):
    """Trains one of: supervised, mle, em, simpro, dr-risk, two-stage, batch-update.

    config and stage2_config are dicts with TrainConfig keys; unknown keys raise.
    """
    return _lsdr.train(method, num_classes, np.asarray(features, dtype=float), list(labels),
                       json.dumps(config) if config else "",
                       json.dumps(stage2_config) if stage2_config else "")


def estimate(model, kind, features, labels):
    return json.loads(model.estimate(kind, np.asarray(features, dtype=float), list(labels)))
