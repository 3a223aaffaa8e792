"""Evaluation, fairness statistics, and communication / compute accounting."""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, InputError
from .model import ClientModel, forward, supervised_loss

FLOAT_BITS = 32
METHODS = ("sfmtl", "fedavg", "fedu", "local")


def evaluate_client(model: ClientModel, x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """(accuracy, mean cross-entropy) on one test set."""
    _, logits, _ = forward(model, x)
    return float((logits.argmax(axis=1) == y).mean()), supervised_loss(logits, y)


def evaluate(models: Sequence[ClientModel], test_sets: Sequence[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    """Per-client accuracy; clients with an empty test set get NaN and a warning."""
    acc = np.full(len(models), np.nan)
    for k, (model, (x, y)) in enumerate(zip(models, test_sets)):
        if len(y) == 0:
            warnings.warn(f"client {k} has an empty test set; excluded from evaluation")
            continue
        acc[k] = evaluate_client(model, x, y)[0]
    return acc


@dataclass(frozen=True)
class FairnessReport:
    mean: float
    std: float
    worst_10: float
    worst_20: float

    def as_dict(self) -> dict:
        return asdict(self)


def worst_fraction_mean(sorted_acc: np.ndarray, fraction: float) -> float:
    count = max(1, math.ceil(fraction * len(sorted_acc) - 1e-9))
    return float(sorted_acc[:count].mean())


def fairness_stats(accuracies) -> FairnessReport:
    acc = np.asarray(accuracies, dtype=float)
    acc = acc[~np.isnan(acc)]
    if acc.size == 0:
        raise InputError("fairness statistics need at least one accuracy")
    s = np.sort(acc)
    return FairnessReport(
        mean=float(acc.mean()),
        std=float(acc.std()),
        worst_10=worst_fraction_mean(s, 0.10),
        worst_20=worst_fraction_mean(s, 0.20),
    )


@dataclass(frozen=True)
class ModelDims:
    d_h: int
    n_classes: int
    n_params: int  # full model, extractor plus head

    @classmethod
    def of(cls, model: ClientModel) -> ModelDims:
        return cls(model.d_h, model.n_classes, model.parameter_count())

    @property
    def head_floats(self) -> int:
        return self.d_h * self.n_classes + self.n_classes


def comm_floats(method: str, dims: ModelDims, anchor_classes: int = 0) -> int:
    """Floats in one message of ``method`` (anchor + head for sfmtl, full model otherwise)."""
    if method == "sfmtl":
        return anchor_classes * dims.d_h + dims.head_floats
    if method in ("fedavg", "fedu"):
        return dims.n_params
    if method == "local":
        return 0
    raise ConfigurationError(f"unknown method {method!r}; expected one of {METHODS}")


def comm_cost(method: str, dims: ModelDims, up_classes: int = 0, down_classes: int = 0) -> tuple[int, int]:
    """(uplink bits, downlink bits) for one participating client in one round."""
    return (
        FLOAT_BITS * comm_floats(method, dims, up_classes),
        FLOAT_BITS * comm_floats(method, dims, down_classes),
    )


def flops_estimate(layer_dims: Sequence[tuple[int, int]], samples: int, local_rounds: int) -> float:
    """Rough training cost: 2 FLOPs per multiply-add, backward counted as twice forward."""
    mac = sum(d_in * d_out for d_in, d_out in layer_dims)
    return 2.0 * mac * 3.0 * samples * local_rounds
