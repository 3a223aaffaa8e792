"""Round loop for the community-restricted method and its baselines.

Each round function takes a ``FederationState`` and returns a new one plus
a ``RoundOutcome``. Clients that are not sampled keep the very same
objects, so they are bitwise unchanged. The server's reply to round ``t``
participants (community anchor, regularized head) is applied before the
round returns, which is what they would start round ``t + 1`` from.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .community import Partition, louvain
from .data import ClientData, FederatedDataset
from .errors import ConfigurationError, NumericalError, StabilityWarning
from .graph import GraphConfig, SimilarityGraph, build_graph
from .metrics import ModelDims, comm_cost, evaluate_client, flops_estimate
from .model import ClientModel, FeatureAnchorSet, LocalTrainConfig, init_model, local_train

# independent RNG streams per (seed, round)
_SAMPLE, _LOUVAIN, _TRAIN, _INIT = 0, 1, 2, 3


@dataclass(frozen=True)
class FederationConfig:
    lam: float = 1.0
    alpha: float = 0.49
    learning_rate: float = 0.05
    local_rounds: int = 5
    batch_size: int = 32
    sample_fraction: float = 1.0
    tau_override: float | None = None
    anchors_learnable: bool = True
    zero_graph: bool = False  # force every edge to 0 (reduction / ablation runs)
    workers: int = 1

    def __post_init__(self):
        if not 0 <= self.learning_rate < np.inf:
            raise ConfigurationError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not self.lam >= 0:
            raise ConfigurationError(f"lam must be >= 0, got {self.lam}")
        if not 0 < self.sample_fraction <= 1:
            raise ConfigurationError(f"sample_fraction must lie in (0, 1], got {self.sample_fraction}")
        if self.workers < 1:
            raise ConfigurationError("workers must be >= 1")
        GraphConfig(self.alpha)

    @property
    def tau(self) -> float:
        if self.tau_override is not None:
            return self.tau_override
        return self.learning_rate * self.local_rounds

    def train_config(self, lam: float | None = None) -> LocalTrainConfig:
        return LocalTrainConfig(
            learning_rate=self.learning_rate,
            local_rounds=self.local_rounds,
            batch_size=self.batch_size,
            lam=self.lam if lam is None else lam,
            anchors_learnable=self.anchors_learnable,
        )


@dataclass
class ClientState:
    model: ClientModel
    anchors: FeatureAnchorSet
    data: ClientData

    @property
    def n_samples(self) -> int:
        return self.data.n_train


@dataclass
class FederationState:
    clients: list[ClientState]
    config: FederationConfig
    seed: int
    n_classes: int
    round: int = 0
    global_model: ClientModel | None = None  # FedAvg only

    @property
    def K(self) -> int:
        return len(self.clients)

    def model_for(self, k: int) -> ClientModel:
        """The model client ``k`` would predict with right now."""
        return self.global_model if self.global_model is not None else self.clients[k].model


@dataclass
class ClientRound:
    client: int
    accuracy: float
    loss: float
    bits_up: int
    bits_down: int
    community: int = -1


@dataclass
class RoundOutcome:
    round: int
    sampled: list[int]
    records: list[ClientRound]
    partition: Partition | None = None
    graph: SimilarityGraph | None = None
    failed: list[int] = field(default_factory=list)
    flops: float = 0.0

    @property
    def bits_up(self) -> int:
        return sum(r.bits_up for r in self.records)

    @property
    def bits_down(self) -> int:
        return sum(r.bits_down for r in self.records)


def init_federation(
    dataset: FederatedDataset,
    config: FederationConfig,
    seed: int,
    hidden: Sequence[int] = (32,),
    d_h: int = 16,
) -> FederationState:
    """All clients start from one shared model draw; anchors h^(0) ~ N(0, I) are
    drawn once per class and handed to every client owning that class."""
    rng = np.random.default_rng([seed, _INIT])
    model = init_model([dataset.input_dim, *hidden, d_h], dataset.n_classes, rng)
    class_anchors = {c: rng.standard_normal(d_h) for c in range(dataset.n_classes)}
    clients = []
    for k, data in enumerate(dataset.clients):
        anchors = FeatureAnchorSet({c: class_anchors[c].copy() for c in data.classes}, owner=k)
        clients.append(ClientState(model.copy(), anchors, data))
    return FederationState(clients, config, seed, dataset.n_classes)


def sample_clients(K: int, fraction: float, rng: np.random.Generator) -> list[int]:
    if K < 2:
        raise ConfigurationError(f"need at least 2 clients, got {K}")
    if not 0 < fraction <= 1:
        raise ConfigurationError(f"fraction must lie in (0, 1], got {fraction}")
    size = min(K, max(2, int(round(fraction * K))))
    return sorted(int(k) for k in rng.choice(K, size=size, replace=False))


def aggregate_anchors(members: Sequence[tuple[FeatureAnchorSet, int]]) -> FeatureAnchorSet:
    """Sample-weighted anchor average per class over the members that own the class."""
    if not members:
        raise ValueError("empty community")
    classes = sorted(set().union(*(set(a.anchors) for a, _ in members)))
    out = {}
    for c in classes:
        owners = [(a[c], n) for a, n in members if c in a]
        total = float(sum(n for _, n in owners))
        out[c] = sum((n / total) * h for h, n in owners)
    return FeatureAnchorSet(out, owner=None)


def regularize_heads(heads: Sequence[np.ndarray], weights: np.ndarray, lam: float, tau: float) -> list[np.ndarray]:
    """Simultaneous Laplacian step: every head moves toward its weighted neighbours.

    ``weights`` is the community's symmetric similarity block (diagonal ignored).
    Works for any parameter arrays of a common shape.
    """
    a = np.array(weights, dtype=float)
    np.fill_diagonal(a, 0.0)
    step = lam * tau
    if len(heads) > 1 and step * a.sum(axis=1).max() >= 1.0:
        warnings.warn(
            f"lambda*tau*degree = {step * a.sum(axis=1).max():.3g} >= 1; head update may overshoot",
            StabilityWarning,
            stacklevel=2,
        )
    out = []
    for k, head in enumerate(heads):
        pull = np.zeros_like(head)
        for l, other in enumerate(heads):
            if l != k and a[k, l] != 0:
                pull += a[k, l] * (head - other)
        out.append(head - step * pull if len(heads) > 1 else head)
    return out


def _client_rng(state: FederationState, k: int) -> np.random.Generator:
    return np.random.default_rng([state.seed, state.round, _TRAIN, k])


def _round_rng(state: FederationState, stream: int) -> np.random.Generator:
    return np.random.default_rng([state.seed, state.round, stream])


def _train_sampled(state, sampled, start_models, use_anchors, lam):
    """Train sampled clients (possibly in threads); failures come back as None."""
    cfg = state.config.train_config(lam)

    def job(k):
        c = state.clients[k]
        try:
            return local_train(
                start_models[k], c.anchors if use_anchors else None, c.data.train_x, c.data.train_y, cfg, _client_rng(state, k)
            )
        except NumericalError:
            return None

    if state.config.workers > 1 and len(sampled) > 1:
        with ThreadPoolExecutor(max_workers=state.config.workers) as pool:
            results = list(pool.map(job, sampled))
    else:
        results = [job(k) for k in sampled]
    return dict(zip(sampled, results))


def _flops(state: FederationState, trained: Sequence[int]) -> float:
    cfg = state.config
    return sum(
        flops_estimate(state.clients[k].model.layer_dims(), state.clients[k].n_samples, cfg.local_rounds) for k in trained
    )


def _record(state, k, model, bits_up, bits_down, community=-1) -> ClientRound:
    data = state.clients[k].data
    acc, loss = evaluate_client(model, data.test_x, data.test_y)
    return ClientRound(k, acc, loss, bits_up, bits_down, community)


def _advance(state: FederationState, clients: list[ClientState], **changes) -> FederationState:
    return replace(state, clients=clients, round=state.round + 1, **changes)


def run_round(state: FederationState) -> tuple[FederationState, RoundOutcome]:
    """One round of community-restricted anchor/head collaboration."""
    cfg = state.config
    sampled = sample_clients(state.K, cfg.sample_fraction, _round_rng(state, _SAMPLE))
    results = _train_sampled(state, sampled, {k: state.clients[k].model for k in sampled}, True, cfg.lam)
    failed = [k for k in sampled if results[k] is None]
    active = [k for k in sampled if results[k] is not None]

    uploads = {k: (results[k][0], results[k][1]) for k in active}
    if cfg.zero_graph:
        graph = SimilarityGraph.empty(active)
    else:
        graph = build_graph([(k, uploads[k][0].head, uploads[k][1]) for k in active], GraphConfig(cfg.alpha))
    partition = louvain(graph, _round_rng(state, _LOUVAIN))

    clients = list(state.clients)
    index = {k: i for i, k in enumerate(active)}
    community_of = partition.assignment
    records = []
    comm_classes = {}
    for cid, members in partition.communities().items():
        comm_anchor = aggregate_anchors([(uploads[k][1], state.clients[k].n_samples) for k in members])
        comm_classes[cid] = len(comm_anchor)
        rows = [index[k] for k in members]
        block = graph.adjacency[np.ix_(rows, rows)]
        heads = [np.vstack([uploads[k][0].head_w, uploads[k][0].head_b]) for k in members]
        new_heads = regularize_heads(heads, block, cfg.lam, cfg.tau)
        for k, head in zip(members, new_heads):
            trained, own = uploads[k]
            model = ClientModel(trained.extractor, head[:-1], head[-1])
            anchors = own.copy()
            for c in own.classes:
                if c in comm_anchor:
                    anchors.anchors[c] = comm_anchor[c].copy()
            clients[k] = ClientState(model, anchors, state.clients[k].data)
    dims = ModelDims.of(state.clients[0].model)
    for k in active:
        up, down = comm_cost("sfmtl", dims, len(uploads[k][1]), comm_classes[community_of[k]])
        records.append(_record(state, k, clients[k].model, up, down, community_of[k]))
    outcome = RoundOutcome(state.round, sampled, records, partition, graph, failed, _flops(state, active))
    return _advance(state, clients), outcome


def _flat(model: ClientModel) -> list[np.ndarray]:
    return model.parameters()


def run_fedavg_round(state: FederationState) -> tuple[FederationState, RoundOutcome]:
    """Sampled clients start from the global model, train on cross-entropy, and are averaged by sample count."""
    cfg = state.config
    sampled = sample_clients(state.K, cfg.sample_fraction, _round_rng(state, _SAMPLE))
    global_model = state.global_model if state.global_model is not None else state.clients[0].model
    results = _train_sampled(state, sampled, {k: global_model for k in sampled}, False, 0.0)
    failed = [k for k in sampled if results[k] is None]
    active = [k for k in sampled if results[k] is not None]

    clients = list(state.clients)
    new_global = global_model
    if active:
        m = float(sum(state.clients[k].n_samples for k in active))
        params = [np.zeros_like(p) for p in global_model.parameters()]
        for k in active:
            weight = state.clients[k].n_samples / m
            for acc, p in zip(params, _flat(results[k][0])):
                acc += weight * p
        new_global = global_model.with_parameters(params)
        for k in active:
            clients[k] = ClientState(results[k][0], state.clients[k].anchors, state.clients[k].data)
    dims = ModelDims.of(global_model)
    up, down = comm_cost("fedavg", dims)
    records = [_record(state, k, new_global, up, down) for k in active]
    outcome = RoundOutcome(state.round, sampled, records, failed=failed, flops=_flops(state, active))
    return _advance(state, clients, global_model=new_global), outcome


def fedu_weights(n: int, K: int) -> np.ndarray:
    a = np.full((n, n), 1.0 / (K - 1))
    np.fill_diagonal(a, 0.0)
    return a


def run_fedu_round(state: FederationState) -> tuple[FederationState, RoundOutcome]:
    """Laplacian regularization over full models with uniform weights 1/(K-1)."""
    cfg = state.config
    sampled = sample_clients(state.K, cfg.sample_fraction, _round_rng(state, _SAMPLE))
    results = _train_sampled(state, sampled, {k: state.clients[k].model for k in sampled}, False, 0.0)
    failed = [k for k in sampled if results[k] is None]
    active = [k for k in sampled if results[k] is not None]

    clients = list(state.clients)
    weights = fedu_weights(len(active), state.K)
    trained = [results[k][0] for k in active]
    n_arrays = len(trained[0].parameters()) if trained else 0
    per_array = [
        regularize_heads([m.parameters()[i] for m in trained], weights, cfg.lam, cfg.tau) for i in range(n_arrays)
    ]
    for j, k in enumerate(active):
        model = trained[j].with_parameters([per_array[i][j] for i in range(n_arrays)])
        clients[k] = ClientState(model, state.clients[k].anchors, state.clients[k].data)
    dims = ModelDims.of(state.clients[0].model)
    up, down = comm_cost("fedu", dims)
    records = [_record(state, k, clients[k].model, up, down) for k in active]
    graph = SimilarityGraph(active, weights) if active else None
    outcome = RoundOutcome(state.round, sampled, records, graph=graph, failed=failed, flops=_flops(state, active))
    return _advance(state, clients), outcome


def run_local_round(state: FederationState) -> tuple[FederationState, RoundOutcome]:
    """Independent training on cross-entropy; nothing is exchanged."""
    cfg = state.config
    sampled = sample_clients(state.K, cfg.sample_fraction, _round_rng(state, _SAMPLE))
    results = _train_sampled(state, sampled, {k: state.clients[k].model for k in sampled}, False, 0.0)
    failed = [k for k in sampled if results[k] is None]
    active = [k for k in sampled if results[k] is not None]
    clients = list(state.clients)
    for k in active:
        clients[k] = ClientState(results[k][0], state.clients[k].anchors, state.clients[k].data)
    records = [_record(state, k, clients[k].model, 0, 0) for k in active]
    outcome = RoundOutcome(state.round, sampled, records, failed=failed, flops=_flops(state, active))
    return _advance(state, clients), outcome


ROUND_FUNCTIONS = {
    "sfmtl": run_round,
    "fedavg": run_fedavg_round,
    "fedu": run_fedu_round,
    "local": run_local_round,
}
