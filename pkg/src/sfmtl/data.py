"""Federated datasets: Gaussian label-shift blobs, planted client groups,
IDX (MNIST) ingestion, and rotated/masked covariate-shift partitions."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, FormatError, InputError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
ROTATIONS = (0, 90, 180, 270)
MASK_SIZE = 2
TRAIN_FRACTION = 0.8


@dataclass
class ClientData:
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    classes: tuple[int, ...]
    transform: dict = field(default_factory=dict)

    @property
    def n_train(self) -> int:
        return len(self.train_y)


@dataclass
class FederatedDataset:
    clients: list[ClientData]
    n_classes: int
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.clients)

    @property
    def input_dim(self) -> int:
        return self.clients[0].train_x.shape[1]


def _split_per_class(x: np.ndarray, y: np.ndarray, rng: np.random.Generator):
    """Stratified 80/20 split; every class keeps at least one test sample."""
    train, test = [], []
    for c in np.unique(y):
        idx = rng.permutation(np.flatnonzero(y == c))
        if len(idx) < 2:
            raise ConfigurationError(f"class {c} has {len(idx)} sample(s); need 2 for a train/test split")
        n_test = max(1, int(round((1 - TRAIN_FRACTION) * len(idx))))
        test.append(idx[:n_test])
        train.append(idx[n_test:])
    train = np.concatenate(train)
    test = np.concatenate(test)
    return x[train], y[train], x[test], y[test]


def _class_counts(total: int, n: int) -> list[int]:
    base, extra = divmod(total, n)
    return [base + (i < extra) for i in range(n)]


def blob_means(n_classes: int, input_dim: int, separation: float, rng: np.random.Generator) -> np.ndarray:
    """Class means with pairwise distance ``separation`` (a rotated simplex) when
    ``input_dim >= n_classes``, otherwise random directions at radius ``separation``."""
    if input_dim >= n_classes:
        q, _ = np.linalg.qr(rng.standard_normal((input_dim, n_classes)))
        return (separation / np.sqrt(2.0)) * q.T
    dirs = rng.standard_normal((n_classes, input_dim))
    return separation * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def _sample_client(means, classes, n_samples, rng) -> tuple[np.ndarray, np.ndarray]:
    xs, ys = [], []
    for c, count in zip(classes, _class_counts(n_samples, len(classes))):
        xs.append(means[c] + rng.standard_normal((count, means.shape[1])))
        ys.append(np.full(count, c))
    return np.concatenate(xs), np.concatenate(ys)


def gen_label_shift(
    K: int,
    classes_per_client: int,
    samples_per_client: int,
    input_dim: int,
    rng: np.random.Generator,
    *,
    n_classes: int = 10,
    separation: float = 6.0,
) -> FederatedDataset:
    """Unit-covariance Gaussian blobs; each client sees ``classes_per_client`` classes.

    Classes are dealt round-robin from a shuffled class list, so every class
    is used once ``K * classes_per_client >= n_classes``.
    """
    if K < 1 or input_dim < 1 or not 1 <= classes_per_client <= n_classes:
        raise ConfigurationError(
            f"invalid sizes: K={K}, classes_per_client={classes_per_client}, n_classes={n_classes}, input_dim={input_dim}"
        )
    if samples_per_client < 2 * classes_per_client:
        raise ConfigurationError(f"samples_per_client={samples_per_client} leaves a class without test data")
    means = blob_means(n_classes, input_dim, separation, rng)
    order = rng.permutation(n_classes)
    clients = []
    for k in range(K):
        classes = tuple(sorted(int(order[(k * classes_per_client + j) % n_classes]) for j in range(classes_per_client)))
        x, y = _sample_client(means, classes, samples_per_client, rng)
        clients.append(ClientData(*_split_per_class(x, y, rng), classes=classes))
    meta = {
        "kind": "label_shift",
        "separation": separation,
        "means": means.tolist(),
        "class_sets": [list(c.classes) for c in clients],
    }
    return FederatedDataset(clients, n_classes, meta)


def gen_planted_groups(
    n_groups: int,
    clients_per_group: int,
    samples_per_client: int,
    input_dim: int,
    rng: np.random.Generator,
    *,
    classes_per_client: int = 2,
    separation: float = 6.0,
    group_offset: float = 1.0,
) -> FederatedDataset:
    """Clients in a group hold the same classes; groups hold disjoint classes.

    Class ``j`` of every group sits near the same base mean (shifted by a
    random vector of norm ``group_offset``), so a model pooled over groups
    must separate heavily overlapping blobs while each group's own task
    stays easy. Client ``k`` belongs to group ``k // clients_per_group``.
    """
    if n_groups < 1 or clients_per_group < 1 or classes_per_client < 1:
        raise ConfigurationError("need at least one group, client and class")
    if samples_per_client < 2 * classes_per_client:
        raise ConfigurationError(f"samples_per_client={samples_per_client} leaves a class without test data")
    n_classes = n_groups * classes_per_client
    base = blob_means(classes_per_client, input_dim, separation, rng)
    means = np.empty((n_classes, input_dim))
    for g in range(n_groups):
        shift = rng.standard_normal(input_dim)
        shift *= group_offset / np.linalg.norm(shift)
        means[g * classes_per_client : (g + 1) * classes_per_client] = base + shift
    clients = []
    for k in range(n_groups * clients_per_group):
        g = k // clients_per_group
        classes = tuple(range(g * classes_per_client, (g + 1) * classes_per_client))
        x, y = _sample_client(means, classes, samples_per_client, rng)
        clients.append(ClientData(*_split_per_class(x, y, rng), classes=classes, transform={"group": g}))
    meta = {
        "kind": "planted",
        "separation": separation,
        "group_offset": group_offset,
        "groups": [k // clients_per_group for k in range(len(clients))],
        "means": means.tolist(),
        "class_sets": [list(c.classes) for c in clients],
    }
    return FederatedDataset(clients, n_classes, meta)


def _read_idx(path: str | Path, magic: int) -> tuple[np.ndarray, tuple[int, ...]]:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated header at offset 0 ({len(raw)} bytes)")
    (found,) = struct.unpack_from(">I", raw, 0)
    if found != magic:
        raise FormatError(f"{path}: bad magic 0x{found:08x} at offset 0, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated dimension header at offset {len(raw)}, need {header} bytes")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    expected = header + int(np.prod(dims))
    if len(raw) < expected:
        raise FormatError(f"{path}: truncated data at offset {len(raw)}, expected {expected} bytes")
    if len(raw) > expected:
        raise FormatError(f"{path}: {len(raw) - expected} trailing bytes after offset {expected}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header), dims


def load_idx(images_path: str | Path, labels_path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Read an IDX image/label file pair; pixels are scaled to [0, 1]."""
    pixels, (n_img, rows, cols) = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels, (n_lab,) = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if n_img != n_lab:
        raise FormatError(f"{labels_path}: {n_lab} labels at offset 4 but {images_path} holds {n_img} images")
    images = pixels.reshape(n_img, rows, cols).astype(float) / 255.0
    return images, labels.astype(int)


def write_idx(path: str | Path, array: np.ndarray) -> None:
    """Write a uint8 array in IDX format (images: 3-D, labels: 1-D)."""
    a = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | a.ndim
    Path(path).write_bytes(struct.pack(f">I{a.ndim}I", magic, *a.shape) + a.tobytes())


def rotate_mask(image: np.ndarray, angle: int, mask_pos: tuple[int, int]) -> np.ndarray:
    """Rotate clockwise by a multiple of 90 degrees, then zero a 2x2 block."""
    if angle not in ROTATIONS:
        raise InputError(f"angle must be one of {ROTATIONS}, got {angle}")
    out = np.rot90(np.asarray(image), k=-(angle // 90)).copy()
    r, c = mask_pos
    if r < 0 or c < 0 or r + MASK_SIZE > out.shape[0] or c + MASK_SIZE > out.shape[1]:
        raise InputError(f"mask at {mask_pos} does not fit a {out.shape} image")
    out[r : r + MASK_SIZE, c : c + MASK_SIZE] = 0
    return out


def partition_rotated_masked(
    images: np.ndarray,
    labels: np.ndarray,
    K: int,
    rng: np.random.Generator,
    *,
    n_classes: int = 10,
    samples_per_client: int | None = None,
) -> FederatedDataset:
    """Disjoint stratified shards; clients ``k`` in quarter ``q`` get rotation ``90*q``
    and a client-specific mask position. Inputs are flattened images."""
    if K < 4 or K % 4:
        raise ConfigurationError(f"K={K} must be a positive multiple of 4 (one rotation per quarter)")
    images = np.asarray(images)
    labels = np.asarray(labels)
    h, w = images.shape[1:]
    if h != w:
        raise ConfigurationError(f"square images required for 90-degree rotations, got {h}x{w}")
    per_class = [rng.permutation(np.flatnonzero(labels == c)) for c in range(n_classes)]
    take = min(len(p) for p in per_class) // K
    if samples_per_client is not None:
        take = min(take, max(1, samples_per_client // n_classes))
    if take < 2:
        raise ConfigurationError(f"not enough samples: {take} per class per client with K={K}")
    group_size = K // 4
    clients = []
    for k in range(K):
        idx = np.concatenate([p[k * take : (k + 1) * take] for p in per_class])
        angle = ROTATIONS[k // group_size]
        pos = (int(rng.integers(0, h - MASK_SIZE + 1)), int(rng.integers(0, w - MASK_SIZE + 1)))
        x = np.stack([rotate_mask(images[i], angle, pos).ravel() for i in idx]).astype(float)
        y = labels[idx]
        transform = {"rotation": angle, "mask_pos": list(pos), "indices": idx.tolist()}
        clients.append(ClientData(*_split_per_class(x, y, rng), classes=tuple(range(n_classes)), transform=transform))
    meta = {"kind": "rotated_masked", "image_shape": [h, w]}
    return FederatedDataset(clients, n_classes, meta)


def export_dataset(dataset: FederatedDataset, out_dir: str | Path, seed: int | None = None) -> Path:
    """Write ``clients.npz`` plus a JSON manifest (seed, transforms, class sets)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    arrays = {}
    for k, c in enumerate(dataset.clients):
        arrays.update(
            {f"c{k}_train_x": c.train_x, f"c{k}_train_y": c.train_y, f"c{k}_test_x": c.test_x, f"c{k}_test_y": c.test_y}
        )
    np.savez(out / "clients.npz", **arrays)
    manifest = {
        "seed": seed,
        "n_clients": len(dataset),
        "n_classes": dataset.n_classes,
        "input_dim": dataset.input_dim,
        "clients": [
            {
                "classes": list(c.classes),
                "n_train": int(len(c.train_y)),
                "n_test": int(len(c.test_y)),
                "transform": {k: v for k, v in c.transform.items() if k != "indices"},
            }
            for c in dataset.clients
        ],
        "meta": {k: v for k, v in dataset.meta.items() if k != "means"},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def load_dataset(bundle_dir: str | Path) -> FederatedDataset:
    bundle = Path(bundle_dir)
    manifest = json.loads((bundle / "manifest.json").read_text())
    arrays = np.load(bundle / "clients.npz")
    clients = []
    for k, entry in enumerate(manifest["clients"]):
        clients.append(
            ClientData(
                arrays[f"c{k}_train_x"],
                arrays[f"c{k}_train_y"],
                arrays[f"c{k}_test_x"],
                arrays[f"c{k}_test_y"],
                classes=tuple(entry["classes"]),
                transform=entry["transform"],
            )
        )
    return FederatedDataset(clients, manifest["n_classes"], manifest["meta"])
