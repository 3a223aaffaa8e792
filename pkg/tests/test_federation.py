import warnings

import numpy as np
import pytest

from sfmtl.data import ClientData, FederatedDataset, gen_planted_groups
from sfmtl.errors import ConfigurationError, StabilityWarning
from sfmtl.federation import (
    ClientState,
    FederationConfig,
    aggregate_anchors,
    fedu_weights,
    init_federation,
    regularize_heads,
    run_fedavg_round,
    run_fedu_round,
    run_local_round,
    run_round,
    sample_clients,
)
from sfmtl.model import FeatureAnchorSet


def small_planted(seed=0, groups=2, per_group=2, samples=40):
    return gen_planted_groups(groups, per_group, samples, 4, np.random.default_rng(seed))


def fingerprint(state):
    return [np.concatenate([p.ravel() for p in c.model.parameters()]) for c in state.clients]


def test_sample_clients_inclusion_frequency():
    counts = np.zeros(30)
    for t in range(10_000):
        for k in sample_clients(30, 0.5, np.random.default_rng([3, t])):
            counts[k] += 1
    assert ((counts / 10_000 >= 0.45) & (counts / 10_000 <= 0.55)).all()


def test_sample_clients_rules():
    assert sample_clients(5, 1.0, np.random.default_rng(0)) == [0, 1, 2, 3, 4]
    assert len(sample_clients(10, 0.01, np.random.default_rng(0))) == 2
    a = sample_clients(20, 0.3, np.random.default_rng(4))
    assert a == sample_clients(20, 0.3, np.random.default_rng(4)) == sorted(a)
    with pytest.raises(ConfigurationError):
        sample_clients(1, 1.0, np.random.default_rng(0))


def test_aggregate_anchors_cases():
    a = FeatureAnchorSet({0: np.array([1.0]), 1: np.array([5.0])}, 0)
    b = FeatureAnchorSet({0: np.array([3.0])}, 1)
    agg = aggregate_anchors([(a, 1), (b, 1)])
    assert agg[0].tolist() == [2.0] and agg[1].tolist() == [5.0]
    agg = aggregate_anchors([(a, 1), (b, 3)])
    assert agg[0].tolist() == [2.5]
    only = aggregate_anchors([(a, 7)])
    assert all(np.array_equal(only[c], a[c]) for c in a.classes)


def test_regularize_heads_cases():
    out = regularize_heads([np.array([0.0]), np.array([2.0])], np.array([[0, 1.0], [1.0, 0]]), 1.0, 0.5)
    assert [o.tolist() for o in out] == [[1.0], [1.0]]
    same = [np.ones((3, 2))] * 3
    for o in regularize_heads(same, np.ones((3, 3)), 1.0, 0.2):
        np.testing.assert_array_equal(o, np.ones((3, 2)))
    lone = np.arange(4.0)
    assert regularize_heads([lone], np.zeros((1, 1)), 5.0, 5.0)[0] is lone


@pytest.mark.parametrize("seed", range(10))
def test_regularize_heads_preserves_mean_and_contracts(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 6))
    heads = [rng.standard_normal((3, 2)) for _ in range(n)]
    a = np.triu(rng.uniform(0, 1, (n, n)), 1)
    a = a + a.T
    step = 0.9 / a.sum(axis=1).max()
    out = regularize_heads(heads, a, 1.0, step)
    np.testing.assert_allclose(np.mean(out, axis=0), np.mean(heads, axis=0), atol=1e-12)
    spread = lambda hs: sum(np.sum((h - np.mean(hs, axis=0)) ** 2) for h in hs)
    assert spread(out) <= spread(heads) + 1e-12


def test_regularize_heads_warns_on_large_step():
    with pytest.warns(StabilityWarning):
        regularize_heads([np.zeros(1), np.ones(1)], np.array([[0, 1.0], [1.0, 0]]), 2.0, 1.0)


def test_two_identical_clients_form_one_community():
    ds = small_planted(groups=1, per_group=1)
    twin = FederatedDataset([ds.clients[0], ds.clients[0]], ds.n_classes, ds.meta)
    state = init_federation(twin, FederationConfig(local_rounds=1), seed=0)
    new, outcome = run_round(state)
    assert outcome.graph.adjacency[0, 1] == pytest.approx(1.0)
    assert outcome.partition.labels.tolist() == [0, 0]
    a, b = fingerprint(new)
    np.testing.assert_allclose(a, b, atol=1e-12)  # batch order differs, so only rounding may differ


def test_zero_graph_without_anchor_loss_equals_local_training():
    ds = small_planted()
    cfg = FederationConfig(lam=0.0, zero_graph=True, local_rounds=2)
    s1 = init_federation(ds, cfg, seed=5)
    s2 = init_federation(ds, cfg, seed=5)
    for _ in range(3):
        s1, o1 = run_round(s1)
        s2, o2 = run_local_round(s2)
    for a, b in zip(fingerprint(s1), fingerprint(s2)):
        np.testing.assert_array_equal(a, b)
    assert [r.accuracy for r in o1.records] == [r.accuracy for r in o2.records]


@pytest.mark.parametrize("round_fn", [run_round, run_fedu_round, run_local_round])
def test_unsampled_clients_untouched(round_fn):
    ds = small_planted(groups=3, per_group=2)
    state = init_federation(ds, FederationConfig(sample_fraction=0.5, local_rounds=1), seed=1)
    new, outcome = round_fn(state)
    for k in range(state.K):
        if k not in outcome.sampled:
            assert new.clients[k] is state.clients[k]
    assert new.round == state.round + 1


def test_fedavg_single_client_and_weighting():
    ds = small_planted(groups=1, per_group=2)
    cfg = FederationConfig(learning_rate=0.0, local_rounds=1)
    state = init_federation(ds, cfg, seed=0)
    new, _ = run_fedavg_round(state)
    for p, q in zip(new.global_model.parameters(), state.clients[0].model.parameters()):
        np.testing.assert_allclose(p, q, atol=1e-15)
    # unequal sample counts: the average is weighted by training set size
    c0, c1 = ds.clients
    cut = ClientData(c1.train_x[:10], c1.train_y[:10], c1.test_x, c1.test_y, c1.classes)
    skewed = init_federation(FederatedDataset([c0, cut], ds.n_classes), FederationConfig(local_rounds=1), seed=0)
    new, _ = run_fedavg_round(skewed)
    trained = [new.clients[k].model.parameters() for k in range(2)]
    w0 = c0.n_train / (c0.n_train + 10)
    for g, a, b in zip(new.global_model.parameters(), *trained):
        np.testing.assert_allclose(g, w0 * a + (1 - w0) * b, atol=1e-12)


def test_fedu_two_clients_meet_halfway():
    ds = small_planted(groups=1, per_group=2)
    cfg = FederationConfig(lam=1.0, tau_override=0.5, local_rounds=1)
    state = init_federation(ds, cfg, seed=2)
    assert fedu_weights(2, 2).tolist() == [[0, 1], [1, 0]]
    with warnings.catch_warnings():
        warnings.simplefilter("error", StabilityWarning)
        new, _ = run_fedu_round(state)
    a, b = fingerprint(new)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_threaded_training_matches_serial():
    ds = small_planted(groups=2, per_group=3)
    serial = init_federation(ds, FederationConfig(local_rounds=1), seed=3)
    threaded = init_federation(ds, FederationConfig(local_rounds=1, workers=4), seed=3)
    for _ in range(2):
        serial, _ = run_round(serial)
        threaded, _ = run_round(threaded)
    for a, b in zip(fingerprint(serial), fingerprint(threaded)):
        np.testing.assert_array_equal(a, b)


def test_failed_client_is_left_unchanged():
    ds = small_planted()
    ds.clients[1].train_x[0, 0] = np.nan
    state = init_federation(ds, FederationConfig(local_rounds=1), seed=0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        new, outcome = run_round(state)
    assert outcome.failed == [1]
    assert 1 not in outcome.partition.nodes
    for k in outcome.failed:
        assert new.clients[k] is state.clients[k]


def test_community_anchor_broadcast_and_comm_bits():
    ds = small_planted(groups=2, per_group=2, samples=60)
    state = init_federation(ds, FederationConfig(local_rounds=3), seed=4)
    for _ in range(5):
        state, outcome = run_round(state)
    d_h, C = 16, ds.n_classes
    for r in outcome.records:
        assert r.bits_up == 32 * (2 * d_h + d_h * C + C)
    for members in outcome.partition.communities().values():
        for c in set().union(*(state.clients[k].anchors.classes for k in members)):
            owners = [k for k in members if c in state.clients[k].anchors]
            for k in owners[1:]:
                np.testing.assert_array_equal(state.clients[k].anchors[c], state.clients[owners[0]].anchors[c])
