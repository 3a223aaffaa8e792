import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sfmtl.errors import ConfigurationError, InputError
from sfmtl.metrics import (
    FLOAT_BITS,
    ModelDims,
    comm_cost,
    comm_floats,
    evaluate,
    evaluate_client,
    fairness_stats,
    flops_estimate,
)
from sfmtl.model import ClientModel


def test_fairness_hand_case():
    r = fairness_stats([0.1 * i for i in range(1, 11)])
    assert r.worst_10 == pytest.approx(0.1, abs=1e-15)
    assert r.worst_20 == pytest.approx(0.15, abs=1e-15)
    assert r.mean == pytest.approx(0.55, abs=1e-15)
    assert r.std == pytest.approx(math.sqrt(sum((0.1 * i - 0.55) ** 2 for i in range(1, 11)) / 10), abs=1e-15)


def test_fairness_constant_and_small_vectors():
    r = fairness_stats([0.7] * 7)
    assert (r.mean, r.std, r.worst_10, r.worst_20) == pytest.approx((0.7, 0.0, 0.7, 0.7))
    # ceil(0.1 * 12) = 2 and ceil(0.2 * 12) = 3 lowest entries
    acc = [0.0, 0.3, 0.6] + [1.0] * 9
    r = fairness_stats(acc)
    assert r.worst_10 == pytest.approx(0.15)
    assert r.worst_20 == pytest.approx(0.3)
    with pytest.raises(InputError):
        fairness_stats([])
    assert fairness_stats([0.5, float("nan")]).mean == 0.5


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=50))
def test_fairness_monotone(acc):
    r = fairness_stats(acc)
    assert r.worst_10 <= r.worst_20 + 1e-12 <= r.mean + 2e-12
    assert min(acc) - 1e-12 <= r.worst_10


def test_comm_floats_reference_dims():
    dims = ModelDims(d_h=512, n_classes=10, n_params=200_000)
    assert comm_floats("sfmtl", dims, 2) == 6154
    assert comm_cost("sfmtl", dims, 2, 2) == (196_928, 196_928)
    assert comm_cost("fedavg", dims) == (FLOAT_BITS * 200_000,) * 2
    assert comm_cost("local", dims) == (0, 0)
    with pytest.raises(ConfigurationError):
        comm_floats("bogus", dims)


def test_flops_estimate():
    assert flops_estimate([(7, 3)], 1, 1) == 6 * 7 * 3
    assert flops_estimate([(4, 4), (4, 2)], 10, 2) == 2 * 24 * 3 * 10 * 2
    assert flops_estimate([(4, 4)], 11, 1) > flops_estimate([(4, 4)], 10, 1)


def identity_model():
    return ClientModel([(np.eye(3), np.zeros(3))], np.eye(3), np.zeros(3))


def test_evaluate_client_cases():
    x = np.eye(3) * 5
    acc, loss = evaluate_client(identity_model(), x, np.array([0, 1, 1]))
    assert acc == pytest.approx(2 / 3)
    assert loss > 0


def test_evaluate_flags_empty_test_set():
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        acc = evaluate(
            [identity_model(), identity_model()],
            [(np.eye(3), np.arange(3)), (np.zeros((0, 3)), np.zeros(0, dtype=int))],
        )
    assert acc[0] == 1.0 and np.isnan(acc[1])
    assert any("empty test set" in str(w.message) for w in caught)
