"""Bags, bag datasets, CSV ingestion, synthetic generation and CV splits."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import Rng


def bag_label_oracle(instance_labels) -> int:
    """A bag is positive iff any of its instances is positive."""
    labels = np.asarray(instance_labels).ravel()
    if labels.size == 0:
        raise ValueError("bag has no instance labels")
    return int(np.any(labels != 0))


@dataclass
class Bag:
    id: str
    instances: np.ndarray
    label: int
    instance_labels: np.ndarray | None = None

    def __post_init__(self):
        self.instances = np.asarray(self.instances, dtype=np.float64)
        if self.instances.ndim != 2 or self.instances.shape[0] < 1:
            raise ValueError(f"bag {self.id!r}: instances must be a non-empty K x D matrix")
        if self.label not in (0, 1):
            raise ValueError(f"bag {self.id!r}: label must be 0 or 1")
        if self.instance_labels is not None:
            self.instance_labels = np.asarray(self.instance_labels, dtype=np.int64).ravel()
            if self.instance_labels.size != self.instances.shape[0]:
                raise ValueError(f"bag {self.id!r}: instance label count does not match instance count")
            if bag_label_oracle(self.instance_labels) != self.label:
                raise ValueError(f"bag {self.id!r}: bag label contradicts its instance labels")

    @property
    def size(self) -> int:
        return self.instances.shape[0]

    def subset(self, idx) -> "Bag":
        idx = np.asarray(idx, dtype=np.int64)
        inst = None if self.instance_labels is None else self.instance_labels[idx]
        # A subset may lose every witness; the bag keeps its original label.
        bag = Bag.__new__(Bag)
        bag.id, bag.instances, bag.label, bag.instance_labels = self.id, self.instances[idx], self.label, inst
        return bag

    def permuted(self, perm) -> "Bag":
        return self.subset(perm)


@dataclass
class BagDataset:
    bags: list[Bag]
    name: str = "dataset"
    feature_dim: int = field(init=False)

    def __post_init__(self):
        if not self.bags:
            raise ValueError("dataset has no bags")
        dims = {b.instances.shape[1] for b in self.bags}
        if len(dims) != 1:
            raise ValueError(f"inconsistent feature dimensions across bags: {sorted(dims)}")
        ids = [b.id for b in self.bags]
        if len(set(ids)) != len(ids):
            raise ValueError("bag ids must be unique")
        self.feature_dim = dims.pop()

    def __len__(self) -> int:
        return len(self.bags)

    def __getitem__(self, i) -> Bag:
        return self.bags[i]

    @property
    def labels(self) -> np.ndarray:
        return np.array([b.label for b in self.bags], dtype=np.int64)

    def subset(self, idx) -> "BagDataset":
        return BagDataset([self.bags[i] for i in idx], name=self.name)

    def map_features(self, fn) -> "BagDataset":
        bags = [Bag(b.id, fn(b.instances), b.label, b.instance_labels) for b in self.bags]
        return BagDataset(bags, name=self.name)


def fit_standardizer(train: BagDataset) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature mean and std over every instance of ``train`` (zero std -> 1)."""
    stacked = np.vstack([b.instances for b in train.bags])
    mu = stacked.mean(axis=0)
    sd = stacked.std(axis=0)
    sd[sd == 0] = 1.0
    return mu, sd


def standardize(dataset: BagDataset, norm: tuple[np.ndarray, np.ndarray] | None) -> BagDataset:
    if norm is None:
        return dataset
    mu, sd = norm
    return dataset.map_features(lambda x: (x - mu) / sd)


@dataclass
class SynthConfig:
    n_bags: int = 500
    feature_dim: int = 20
    mean_bag_size: float = 20.0
    bag_size_std: float = 2.0
    witness_rate: float = 0.1
    positive_fraction: float = 0.5
    # Instances are N(mean * u, cov_scale^2 I) along a fixed random unit
    # direction u per class component.
    pos_mean: float = 2.0
    neg_mean: float = 0.0
    cov_scale: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.n_bags < 1 or self.feature_dim < 1:
            raise ValueError("n_bags and feature_dim must be >= 1")
        if self.mean_bag_size < 1:
            raise ValueError("mean_bag_size must be >= 1")
        if self.bag_size_std < 0:
            raise ValueError("bag_size_std must be >= 0")
        if not 0 < self.witness_rate <= 1:
            raise ValueError("witness_rate must lie in (0, 1]")
        if not 0 <= self.positive_fraction <= 1:
            raise ValueError("positive_fraction must lie in [0, 1]")
        if self.cov_scale <= 0:
            raise ValueError("cov_scale must be > 0")


def synth_bags(config: SynthConfig, rng: Rng | None = None, stream: str = "bags") -> BagDataset:
    """Gaussian-mixture bags with known instance labels.

    Negative instances are drawn around ``neg_mean * u``, witnesses around
    ``pos_mean * u`` for a random unit direction ``u``. A positive bag of
    size K holds ``ceil(witness_rate * K)`` witnesses at random positions.
    ``u`` depends only on the seed, so another ``stream`` name yields fresh
    bags from the same distribution (e.g. a large independent test set).
    """
    config.validate()
    rng = rng if rng is not None else Rng(config.seed)
    D = config.feature_dim
    u = rng.fork("direction").normal(D)
    u /= np.linalg.norm(u)
    r = rng.fork(stream)
    n_pos = int(round(config.positive_fraction * config.n_bags))
    labels = np.array([1] * n_pos + [0] * (config.n_bags - n_pos))
    labels = labels[r.permutation(config.n_bags)]
    bags = []
    for i, y in enumerate(labels):
        K = max(1, int(np.rint(config.mean_bag_size + config.bag_size_std * r.normal())))
        inst = np.zeros(K, dtype=np.int64)
        if y == 1:
            n_wit = min(K, math.ceil(config.witness_rate * K))
            inst[r.permutation(K)[:n_wit]] = 1
        centers = np.where(inst[:, None] == 1, config.pos_mean, config.neg_mean) * u[None, :]
        x = centers + config.cov_scale * r.normal((K, D))
        bags.append(Bag(f"{stream}{i:05d}", x, int(y), inst))
    return BagDataset(bags, name="synthetic")


CSV_FIXED = ("bag_id", "instance_label", "label")


def load_bags_csv(path) -> BagDataset:
    """Read bags from a CSV with header ``bag_id,instance_label,label,f0..f{D-1}``.

    ``instance_label`` may be ``?``; rows of one bag need not be contiguous.
    Bags keep the order of their first appearance.
    """
    path = Path(path)
    groups: dict[str, dict] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if tuple(header[:3]) != CSV_FIXED or len(header) < 4:
            raise ValueError(f"{path}:1: header must start with bag_id,instance_label,label followed by features")
        n_feat = len(header) - 3
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            bag_id, inst_tok, label_tok = (c.strip() for c in row[:3])
            if label_tok not in ("0", "1"):
                raise ValueError(f"{path}:{lineno}: unknown bag label token {label_tok!r}")
            if inst_tok not in ("0", "1", "?"):
                raise ValueError(f"{path}:{lineno}: unknown instance label token {inst_tok!r}")
            try:
                feats = [float(c) for c in row[3:]]
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric feature value") from None
            if not all(math.isfinite(f) for f in feats):
                raise ValueError(f"{path}:{lineno}: non-finite feature value")
            g = groups.setdefault(bag_id, {"label": int(label_tok), "x": [], "y": [], "line": lineno})
            if g["label"] != int(label_tok):
                raise ValueError(f"{path}:{lineno}: bag {bag_id!r} has conflicting labels")
            g["x"].append(feats)
            g["y"].append(None if inst_tok == "?" else int(inst_tok))
    if not groups:
        raise ValueError(f"{path}: no data rows")
    bags = []
    for bag_id, g in groups.items():
        known = [y for y in g["y"] if y is not None]
        inst = None
        if len(known) == len(g["y"]):
            inst = np.array(known)
        elif known and any(known) and g["label"] == 0:
            raise ValueError(f"{path}:{g['line']}: negative bag {bag_id!r} contains a positive instance")
        try:
            bags.append(Bag(bag_id, np.array(g["x"]).reshape(-1, n_feat), g["label"], inst))
        except ValueError as exc:
            raise ValueError(f"{path}:{g['line']}: {exc}") from None
    return BagDataset(bags, name=path.stem)


def save_bags_csv(dataset: BagDataset, path) -> None:
    """Write ``dataset`` in the schema read by :func:`load_bags_csv`."""
    D = dataset.feature_dim
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*CSV_FIXED, *(f"f{j}" for j in range(D))])
        for b in dataset.bags:
            for k in range(b.size):
                inst = "?" if b.instance_labels is None else str(int(b.instance_labels[k]))
                w.writerow([b.id, inst, b.label, *(repr(float(v)) for v in b.instances[k])])


def kfold_split(dataset: BagDataset, k: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Stratified k-fold (train, test) index pairs, deterministic in ``seed``."""
    n = len(dataset)
    if k < 2:
        raise ValueError("k must be >= 2")
    if k > n:
        raise ValueError(f"k={k} exceeds the number of bags ({n})")
    rng = Rng(seed).fork("kfold")
    labels = dataset.labels
    fold_of = np.empty(n, dtype=np.int64)
    offset = 0
    for cls in (0, 1):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(idx.size)]
        # Continue the round-robin across classes so fold sizes stay balanced.
        fold_of[idx] = (offset + np.arange(idx.size)) % k
        offset += idx.size
    all_idx = np.arange(n)
    return [(all_idx[fold_of != f], all_idx[fold_of == f]) for f in range(k)]
