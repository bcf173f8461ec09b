"""Synthetic datasets and the partition schemes used by the simulator.

Partitions are exact: labeled and unlabeled index sets are disjoint, and
client allocations never overlap. A client handle built for the
labels-at-server scenario physically holds no labels, and every labeled
access on any handle is counted so experiments can prove label hygiene.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, LabelAccessError

log = logging.getLogger(__name__)

SPLIT_FRACTIONS = (0.90, 0.05, 0.05)  # train / valid / test
STREAM_ROUNDS_PER_STEP = 10

LABELS_AT_CLIENT = "labels_at_client"
LABELS_AT_SERVER = "labels_at_server"
SCENARIOS = (LABELS_AT_CLIENT, LABELS_AT_SERVER)


@dataclass(frozen=True)
class Dataset:
    """Feature matrix, integer class labels, and a train/valid/test tag per row."""

    features: np.ndarray
    labels: np.ndarray
    split: np.ndarray

    def __post_init__(self):
        n = self.features.shape[0]
        if self.labels.shape[0] != n or self.split.shape[0] != n:
            raise ValueError("features, labels and split tags must align")

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def indices_of(self, split: str) -> np.ndarray:
        return np.nonzero(self.split == split)[0]


@dataclass(frozen=True)
class PartitionPlan:
    """Per-client labeled/unlabeled index allocation over the train split."""

    mode: str
    labeled: tuple[np.ndarray, ...]
    unlabeled: tuple[np.ndarray, ...]
    labels_per_class: int
    stream_chunks: Optional[tuple[tuple[np.ndarray, ...], ...]] = None
    n_stream_steps: int = 1
    rounds_per_step: int = STREAM_ROUNDS_PER_STEP
    class_proportions: Optional[np.ndarray] = None

    @property
    def n_clients(self) -> int:
        return len(self.labeled)


def make_blobs(
    n_classes: int, dim: int, n_per_class: int, spread: float, seed: int
) -> Dataset:
    """Gaussian cluster per class with a stratified 90/5/5 split."""
    if n_classes < 2:
        raise ConfigError("need at least 2 classes")
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((n_classes, dim))
    features = []
    labels = []
    splits = []
    for c in range(n_classes):
        pts = centers[c] + spread * rng.standard_normal((n_per_class, dim))
        features.append(pts)
        labels.append(np.full(n_per_class, c, dtype=np.int64))
        n_train = int(round(SPLIT_FRACTIONS[0] * n_per_class))
        n_valid = int(round(SPLIT_FRACTIONS[1] * n_per_class))
        tags = np.array(["train"] * n_per_class, dtype=object)
        tags[n_train : n_train + n_valid] = "valid"
        tags[n_train + n_valid :] = "test"
        splits.append(tags)
    order = rng.permutation(n_classes * n_per_class)
    return Dataset(
        features=np.concatenate(features)[order],
        labels=np.concatenate(labels)[order],
        split=np.concatenate(splits)[order],
    )


def _labeled_allocation(ds: Dataset, k: int, lpc: int, rng: np.random.Generator):
    """Disjoint per-client labeled picks (lpc per class) plus the leftover pool."""
    train_idx = ds.indices_of("train")
    per_client: list[list[np.ndarray]] = [[] for _ in range(k)]
    taken = []
    for c in range(ds.n_classes):
        pool = train_idx[ds.labels[train_idx] == c]
        if pool.size < k * lpc:
            raise ConfigError(
                f"class {c} has {pool.size} train instances, "
                f"need {k * lpc} for {k} clients x {lpc} labels"
            )
        pool = rng.permutation(pool)
        for a in range(k):
            per_client[a].append(pool[a * lpc : (a + 1) * lpc])
        taken.append(pool[: k * lpc])
    labeled = tuple(np.sort(np.concatenate(parts)) for parts in per_client)
    taken_set = np.concatenate(taken)
    unlabeled_pool = np.setdiff1d(train_idx, taken_set)
    return labeled, unlabeled_pool


def split_iid(ds: Dataset, k: int, lpc: int, seed: int) -> PartitionPlan:
    """Even allocation: lpc labels per class per client, unlabeled pool split evenly."""
    if k < 1:
        raise ConfigError("need at least one client")
    rng = np.random.default_rng(seed)
    labeled, pool = _labeled_allocation(ds, k, lpc, rng)
    shuffled = rng.permutation(pool)
    unlabeled = tuple(np.sort(chunk) for chunk in np.array_split(shuffled, k))
    return PartitionPlan(mode="iid", labeled=labeled, unlabeled=unlabeled, labels_per_class=lpc)


def split_noniid(
    ds: Dataset, k: int, lpc: int, seed: int, alpha: float = 0.5
) -> PartitionPlan:
    """Class-imbalanced allocation from symmetric Dirichlet(alpha) proportions.

    The labeled allocation stays identical to the IID scheme; only the
    unlabeled pool is skewed. Per class, instances go to clients by
    largest-remainder shares of the drawn proportions, so totals are
    conserved exactly and nothing is allocated twice.
    """
    if alpha <= 0:
        raise ConfigError("alpha must be positive")
    rng = np.random.default_rng(seed)
    labeled, pool = _labeled_allocation(ds, k, lpc, rng)
    props = rng.dirichlet(np.full(ds.n_classes, alpha), size=k)  # client x class
    buckets: list[list[np.ndarray]] = [[] for _ in range(k)]
    for c in range(ds.n_classes):
        class_pool = rng.permutation(pool[ds.labels[pool] == c])
        weights = props[:, c]
        total = weights.sum()
        if total == 0:
            weights = np.full(k, 1.0 / k)
            total = 1.0
        exact = class_pool.size * weights / total
        counts = np.floor(exact).astype(int)
        shortfall = class_pool.size - counts.sum()
        if shortfall:
            order = np.argsort(-(exact - counts), kind="stable")
            counts[order[:shortfall]] += 1
            log.debug(
                "class %d: %d leftover instances assigned by largest remainder",
                c,
                shortfall,
            )
        start = 0
        for a in range(k):
            buckets[a].append(class_pool[start : start + counts[a]])
            start += counts[a]
    unlabeled = tuple(np.sort(np.concatenate(parts)) for parts in buckets)
    return PartitionPlan(
        mode="noniid",
        labeled=labeled,
        unlabeled=unlabeled,
        labels_per_class=lpc,
        class_proportions=props,
    )


def split_streaming(plan: PartitionPlan, n_steps: int) -> PartitionPlan:
    """Divide each client's unlabeled indices into ordered near-equal chunks."""
    if n_steps < 1:
        raise ConfigError("need at least one stream step")
    chunks = tuple(
        tuple(np.asarray(c) for c in np.array_split(idx, n_steps))
        for idx in plan.unlabeled
    )
    return PartitionPlan(
        mode="streaming",
        labeled=plan.labeled,
        unlabeled=plan.unlabeled,
        labels_per_class=plan.labels_per_class,
        stream_chunks=chunks,
        n_stream_steps=n_steps,
        rounds_per_step=plan.rounds_per_step,
        class_proportions=plan.class_proportions,
    )


def stream_step_for_round(plan: PartitionPlan, round_no: int) -> int:
    """Which stream chunk is visible at a 1-based round number."""
    step = (round_no - 1) // plan.rounds_per_step
    return min(step, plan.n_stream_steps - 1)


class ClientDataHandle:
    """One client's view of its data.

    In the labels-at-server scenario the handle is constructed without any
    label array, so no accessor can leak one. `label_reads` counts every
    successful labeled access for hygiene audits.
    """

    def __init__(
        self,
        unlabeled_features: np.ndarray,
        labeled_features: Optional[np.ndarray] = None,
        labels: Optional[np.ndarray] = None,
        stream_chunks: Optional[tuple[np.ndarray, ...]] = None,
    ):
        if (labeled_features is None) != (labels is None):
            raise ValueError("labeled features and labels must come together")
        self._unlabeled = unlabeled_features
        self._labeled = labeled_features
        self._labels = labels
        self._chunks = stream_chunks
        self.label_reads = 0

    @property
    def has_labels(self) -> bool:
        return self._labels is not None

    @property
    def n_labeled(self) -> int:
        return 0 if self._labeled is None else self._labeled.shape[0]

    @property
    def n_unlabeled(self) -> int:
        return self._unlabeled.shape[0]

    def labeled_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        if self._labels is None:
            raise LabelAccessError("this handle holds no labels")
        self.label_reads += 1
        return self._labeled, self._labels

    def unlabeled_features(self, stream_step: int = 0) -> np.ndarray:
        if self._chunks is None:
            return self._unlabeled
        return self._chunks[stream_step]


def build_client_handles(
    ds: Dataset, plan: PartitionPlan, scenario: str
) -> tuple[list[ClientDataHandle], Optional[tuple[np.ndarray, np.ndarray]]]:
    """Materialize handles per scenario.

    Returns the client handles and, for labels-at-server, the pooled
    labeled set that lives at the server (None otherwise).
    """
    if scenario not in SCENARIOS:
        raise ConfigError(f"unknown scenario {scenario!r}")
    handles = []
    for a in range(plan.n_clients):
        chunks = None
        if plan.stream_chunks is not None:
            chunks = tuple(ds.features[c] for c in plan.stream_chunks[a])
        unlabeled = ds.features[plan.unlabeled[a]]
        if scenario == LABELS_AT_CLIENT:
            handles.append(
                ClientDataHandle(
                    unlabeled_features=unlabeled,
                    labeled_features=ds.features[plan.labeled[a]],
                    labels=ds.labels[plan.labeled[a]],
                    stream_chunks=chunks,
                )
            )
        else:
            handles.append(
                ClientDataHandle(unlabeled_features=unlabeled, stream_chunks=chunks)
            )
    server_pool = None
    if scenario == LABELS_AT_SERVER:
        pooled = np.concatenate(plan.labeled)
        server_pool = (ds.features[pooled], ds.labels[pooled])
    return handles, server_pool


def save_csv(ds: Dataset, path) -> None:
    """Persist as feature_0..feature_{d-1},label,split rows."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"feature_{i}" for i in range(ds.dim)] + ["label", "split"])
        for row, label, split in zip(ds.features, ds.labels, ds.split):
            writer.writerow([repr(v) for v in row] + [int(label), split])


def load_csv(path) -> Dataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        dim = len(header) - 2
        features, labels, splits = [], [], []
        for row in reader:
            features.append([float(v) for v in row[:dim]])
            labels.append(int(row[dim]))
            splits.append(row[dim + 1])
    return Dataset(
        features=np.asarray(features, dtype=np.float64),
        labels=np.asarray(labels, dtype=np.int64),
        split=np.asarray(splits, dtype=object),
    )


def save_plan(plan: PartitionPlan, path) -> None:
    payload = {
        "mode": plan.mode,
        "labels_per_class": plan.labels_per_class,
        "n_stream_steps": plan.n_stream_steps,
        "rounds_per_step": plan.rounds_per_step,
        "labeled": {str(a): idx.tolist() for a, idx in enumerate(plan.labeled)},
        "unlabeled": {str(a): idx.tolist() for a, idx in enumerate(plan.unlabeled)},
    }
    if plan.stream_chunks is not None:
        payload["stream_chunks"] = {
            str(a): [c.tolist() for c in chunks]
            for a, chunks in enumerate(plan.stream_chunks)
        }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1)


def load_plan(path) -> PartitionPlan:
    with open(path) as fh:
        payload = json.load(fh)
    k = len(payload["labeled"])
    labeled = tuple(np.asarray(payload["labeled"][str(a)], dtype=np.int64) for a in range(k))
    unlabeled = tuple(
        np.asarray(payload["unlabeled"][str(a)], dtype=np.int64) for a in range(k)
    )
    chunks = None
    if "stream_chunks" in payload:
        chunks = tuple(
            tuple(np.asarray(c, dtype=np.int64) for c in payload["stream_chunks"][str(a)])
            for a in range(k)
        )
    return PartitionPlan(
        mode=payload["mode"],
        labeled=labeled,
        unlabeled=unlabeled,
        labels_per_class=payload["labels_per_class"],
        stream_chunks=chunks,
        n_stream_steps=payload["n_stream_steps"],
        rounds_per_step=payload["rounds_per_step"],
    )
