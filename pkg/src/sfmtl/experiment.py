"""Experiment driver: config handling, the round loop, and artifact export."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .community import Partition, adjusted_rand_index
from .data import FederatedDataset, gen_label_shift, gen_planted_groups, load_dataset, load_idx, partition_rotated_masked
from .errors import ConfigurationError
from .federation import ROUND_FUNCTIONS, FederationConfig, FederationState, RoundOutcome, init_federation
from .graph import write_edge_list
from .metrics import METHODS, evaluate, fairness_stats

log = logging.getLogger(__name__)

DATASETS = ("planted", "label_shift", "rotated_mnist", "bundle")
ROUND_COLUMNS = ("round", "client", "accuracy", "loss", "bits_up", "bits_down", "community")
_DATA_STREAM = 1000  # keeps the data draw apart from the federation streams


@dataclass
class RunConfig:
    method: str = "sfmtl"
    dataset: str = "planted"
    n_clients: int = 12
    n_groups: int = 3  # planted only
    classes_per_client: int = 2
    samples_per_client: int = 100
    input_dim: int = 10
    n_classes: int = 10  # label_shift and rotated_mnist
    separation: float = 6.0
    group_offset: float = 1.0
    images: str | None = None  # rotated_mnist IDX files
    labels: str | None = None
    data_dir: str | None = None  # bundle written by gen-data
    rounds: int = 50
    local_rounds: int = 5
    learning_rate: float = 0.05
    lam: float = 1.0
    alpha: float = 0.49
    sample_fraction: float = 1.0
    batch_size: int = 32
    seed: int = 0
    out: str = "runs/sfmtl"
    anchors_learnable: bool = True
    tau_override: float | None = None
    hidden_dim: int = 32
    feature_dim: int = 16
    snapshot_every: int = 50
    workers: int = 1
    zero_graph: bool = False
    figures: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigurationError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.dataset not in DATASETS:
            raise ConfigurationError(f"dataset must be one of {DATASETS}, got {self.dataset!r}")
        if not self.learning_rate > 0:
            raise ConfigurationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not self.lam >= 0:
            raise ConfigurationError(f"lam must be >= 0, got {self.lam}")
        if not 0 <= self.alpha <= 1:
            raise ConfigurationError(f"alpha must lie in [0, 1], got {self.alpha}")
        for name in ("rounds", "local_rounds", "batch_size", "snapshot_every", "workers", "hidden_dim", "feature_dim"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.n_clients < 2:
            raise ConfigurationError(f"n_clients must be >= 2, got {self.n_clients}")
        if self.dataset == "planted" and self.n_clients % self.n_groups:
            raise ConfigurationError(f"n_clients={self.n_clients} is not a multiple of n_groups={self.n_groups}")
        if self.dataset == "rotated_mnist" and not (self.images and self.labels):
            raise ConfigurationError("rotated_mnist needs 'images' and 'labels' IDX paths")
        if self.dataset == "bundle" and not self.data_dir:
            raise ConfigurationError("bundle dataset needs 'data_dir'")

    def federation_config(self) -> FederationConfig:
        return FederationConfig(
            lam=self.lam,
            alpha=self.alpha,
            learning_rate=self.learning_rate,
            local_rounds=self.local_rounds,
            batch_size=self.batch_size,
            sample_fraction=self.sample_fraction,
            tau_override=self.tau_override,
            anchors_learnable=self.anchors_learnable,
            zero_graph=self.zero_graph,
            workers=self.workers,
        )

    def replace(self, **changes) -> RunConfig:
        return dataclasses.replace(self, **changes)


def load_config(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Flat JSON file, then non-None overrides on top."""
    values: dict[str, Any] = {}
    if path is not None:
        try:
            values = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from None
        if not isinstance(values, dict):
            raise ConfigurationError(f"{path}: expected a flat JSON object")
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
    try:
        return RunConfig(**values)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from None


def build_dataset(config: RunConfig) -> FederatedDataset:
    rng = np.random.default_rng([config.seed, _DATA_STREAM])
    if config.dataset == "planted":
        return gen_planted_groups(
            config.n_groups,
            config.n_clients // config.n_groups,
            config.samples_per_client,
            config.input_dim,
            rng,
            classes_per_client=config.classes_per_client,
            separation=config.separation,
            group_offset=config.group_offset,
        )
    if config.dataset == "label_shift":
        return gen_label_shift(
            config.n_clients,
            config.classes_per_client,
            config.samples_per_client,
            config.input_dim,
            rng,
            n_classes=config.n_classes,
            separation=config.separation,
        )
    if config.dataset == "bundle":
        return load_dataset(config.data_dir)
    images, labels = load_idx(config.images, config.labels)
    return partition_rotated_masked(
        images, labels, config.n_clients, rng, n_classes=config.n_classes, samples_per_client=config.samples_per_client
    )


def _check_writable(out: Path) -> None:
    try:
        out.mkdir(parents=True, exist_ok=True)
        with tempfile.TemporaryFile(dir=out):
            pass
    except OSError as exc:
        raise OSError(f"output directory {out} is not writable: {exc}") from exc


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def _write_anchors(state: FederationState, path: Path, clients) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        d_h = state.clients[0].model.d_h
        w.writerow(["client", "class", *(f"v{i}" for i in range(d_h))])
        for k in clients:
            anchors = state.clients[k].anchors
            for c in anchors.classes:
                w.writerow([k, c, *(_fmt(v) for v in anchors[c])])


def _snapshot(state: FederationState, outcome: RoundOutcome, out: Path, method: str) -> None:
    t = outcome.round
    if outcome.graph is not None:
        with open(out / f"graph_round{t:04d}.csv", "w", newline="") as fh:
            write_edge_list(outcome.graph, fh, t)
    if method == "sfmtl":
        _write_anchors(state, out / f"anchors_round{t:04d}.csv", range(state.K))


def final_accuracies(state: FederationState) -> np.ndarray:
    return evaluate(
        [state.model_for(k) for k in range(state.K)],
        [(c.data.test_x, c.data.test_y) for c in state.clients],
    )


def run_experiment(config: RunConfig) -> Path:
    """Run ``config.rounds`` rounds and write every artifact under ``config.out``."""
    config.validate()
    out = Path(config.out)
    _check_writable(out)
    dataset = build_dataset(config)
    state = init_federation(dataset, config.federation_config(), config.seed, (config.hidden_dim,), config.feature_dim)
    step = ROUND_FUNCTIONS[config.method]

    history = []  # (round, mean acc, bits up, bits down)
    failures = []
    total_flops = 0.0
    last_partition: Partition | None = None
    last_outcome: RoundOutcome | None = None
    with open(out / "rounds.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ROUND_COLUMNS)
        for t in range(config.rounds):
            state, outcome = step(state)
            for r in outcome.records:
                writer.writerow([outcome.round, r.client, _fmt(r.accuracy), _fmt(r.loss), r.bits_up, r.bits_down, r.community])
            failures.extend({"round": outcome.round, "client": k} for k in outcome.failed)
            total_flops += outcome.flops
            acc = [r.accuracy for r in outcome.records]
            history.append((outcome.round, float(np.mean(acc)) if acc else float("nan"), outcome.bits_up, outcome.bits_down))
            if outcome.partition is not None:
                last_partition = outcome.partition
            last_outcome = outcome
            if (t + 1) % config.snapshot_every == 0 or t == config.rounds - 1:
                _snapshot(state, outcome, out, config.method)
            log.debug("round %d mean acc %.4f", outcome.round, history[-1][1])

    accuracies = final_accuracies(state)
    report = fairness_stats(accuracies)
    summary: dict[str, Any] = {
        "method": config.method,
        "rounds": config.rounds,
        "fairness": report.as_dict(),
        "final_accuracy": [None if np.isnan(a) else float(a) for a in accuracies],
        "bits_up": int(sum(h[2] for h in history)),
        "bits_down": int(sum(h[3] for h in history)),
        "flops": total_flops,
        "failures": failures,
        "mean_accuracy_by_round": [h[1] for h in history],
    }
    if last_partition is not None:
        summary["partition"] = {str(k): c for k, c in last_partition.assignment.items()}
        groups = dataset.meta.get("groups")
        if groups is not None and len(last_partition.nodes) == len(groups):
            truth = Partition(list(range(len(groups))), groups)
            ordered = Partition(last_partition.nodes, last_partition.labels)
            summary["ari_vs_planted"] = adjusted_rand_index(ordered, truth)
    _write_json(out / "summary.json", summary)
    manifest = {
        "config": asdict(config),
        "dataset": {k: v for k, v in dataset.meta.items() if k != "means"},
        "n_train": [c.n_train for c in dataset.clients],
        "model": {"layers": state.clients[0].model.layer_dims(), "d_h": config.feature_dim},
    }
    _write_json(out / "manifest.json", manifest)

    if config.figures:
        from . import plotting

        rounds = [h[0] for h in history]
        plotting.accuracy_curve(rounds, [h[1] for h in history], out / "figures" / "accuracy.png", config.method)
        plotting.cumulative_bits(rounds, [h[2] for h in history], [h[3] for h in history], out / "figures" / "bits.png")
        if last_outcome is not None and last_outcome.graph is not None:
            g = last_outcome.graph
            labels = last_outcome.partition.labels if last_outcome.partition is not None else None
            plotting.adjacency_heatmap(g.nodes, g.adjacency, out / "figures" / "graph.png", labels)
    return out


def _write_json(path: Path, payload) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True, default=_json_default)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text + "\n")
    os.replace(tmp, path)


def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


def run_comparison(config: RunConfig, methods=METHODS) -> dict[str, dict]:
    """Run several methods on the same data and seed, one subdirectory each."""
    root = Path(config.out)
    _check_writable(root)
    summaries = {}
    for method in methods:
        sub = config.replace(method=method, out=str(root / method))
        run_experiment(sub)
        summaries[method] = json.loads((root / method / "summary.json").read_text())
    with open(root / "comparison.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "mean", "std", "worst_10", "worst_20", "bits_up", "bits_down", "flops"])
        for method, s in summaries.items():
            f = s["fairness"]
            w.writerow([method, _fmt(f["mean"]), _fmt(f["std"]), _fmt(f["worst_10"]), _fmt(f["worst_20"]),
                        s["bits_up"], s["bits_down"], _fmt(s["flops"])])
    if config.figures:
        from . import plotting

        curves = {m: (list(range(len(s["mean_accuracy_by_round"]))), s["mean_accuracy_by_round"]) for m, s in summaries.items()}
        plotting.method_comparison(curves, root / "figures" / "comparison.png")
    return summaries
