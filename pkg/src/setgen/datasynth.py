"""Synthetic concept datasets (noisy, optionally multi-modal classes) and file I/O.

Each class is a small latent mixture (one cluster per visual aspect) pushed
through a fixed random nonlinearity into the raw feature space.  Concept sets
sampled from a class can be contaminated with items from other classes to
emulate noisy, uncurated query sets.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

DATASET_FORMAT_VERSION = 1
SPLIT_NAMES = ("train", "val", "test")


class DatasetFormatError(ValueError):
    """The on-disk dataset is malformed or internally inconsistent."""


@dataclass
class SynthSpec:
    num_classes: int = 45
    items_per_class: int = 40
    clusters_per_class: int = 2       # 1..3, models polysemous concepts
    latent_dim: int = 6
    input_dim: int = 20
    noise_fraction: float = 0.2       # concept-set contamination ratio
    seed: int = 0
    split_counts: tuple = (30, 5, 10)  # train / val / test classes
    class_spread: float = 3.0          # stddev of class centers in latent space
    cluster_separation: float = 6.0    # min distance between a class's cluster means
    hidden_dim: int | None = None      # nonlinearity width, default 2 * input_dim

    def validate(self) -> None:
        if min(self.num_classes, self.items_per_class, self.latent_dim, self.input_dim) < 1:
            raise ValueError("dataset dimensions must be positive")
        if not 1 <= self.clusters_per_class <= 3:
            raise ValueError("clusters_per_class must be in 1..3")
        if not 0.0 <= self.noise_fraction < 0.5:
            raise ValueError("noise_fraction must lie in [0, 0.5)")
        if len(self.split_counts) != 3 or sum(self.split_counts) != self.num_classes:
            raise ValueError("split_counts must be three values summing to num_classes")
        if min(self.split_counts) < 0:
            raise ValueError("split_counts must be nonnegative")


@dataclass
class Dataset:
    vectors: np.ndarray            # (num_items, input_dim)
    class_ids: np.ndarray          # (num_items,)
    splits: dict                   # split name -> sorted list of class ids
    latents: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self._by_class = {}
        for c in np.unique(self.class_ids):
            self._by_class[int(c)] = np.flatnonzero(self.class_ids == c)

    @property
    def input_dim(self) -> int:
        return int(self.vectors.shape[1])

    @property
    def num_items(self) -> int:
        return int(self.vectors.shape[0])

    @property
    def classes(self) -> list:
        return sorted(self._by_class)

    def items_of_class(self, class_id: int) -> np.ndarray:
        return self._by_class[int(class_id)]

    def split_classes(self, split: str) -> list:
        return list(self.splits[split])


def _separated_means(center: np.ndarray, count: int, separation: float, rng) -> np.ndarray:
    """Cluster means around a class center with pairwise distance >= separation."""
    if count == 1:
        return center[None, :].copy()
    for _ in range(1000):
        means = center + rng.normal(0.0, separation, size=(count, len(center)))
        dists = np.linalg.norm(means[:, None, :] - means[None, :, :], axis=2)
        if dists[np.triu_indices(count, 1)].min() >= separation:
            return means
    raise RuntimeError("could not place separated cluster means")


def generate(spec: SynthSpec, *, keep_latents: bool = False) -> Dataset:
    """Sample the dataset a spec describes; byte-identical output per seed."""
    spec.validate()
    seeds = np.random.SeedSequence(spec.seed).spawn(5)
    rng_centers, rng_clusters, rng_items, rng_nonlin, rng_split = map(
        np.random.default_rng, seeds
    )
    C, per, L = spec.num_classes, spec.items_per_class, spec.latent_dim
    centers = rng_centers.normal(0.0, spec.class_spread, size=(C, L))
    latents = np.empty((C * per, L))
    class_ids = np.repeat(np.arange(C), per)
    for c in range(C):
        means = _separated_means(centers[c], spec.clusters_per_class, spec.cluster_separation, rng_clusters)
        assign = rng_items.integers(spec.clusters_per_class, size=per)
        latents[c * per : (c + 1) * per] = means[assign] + rng_items.standard_normal((per, L))

    hidden = spec.hidden_dim or 2 * spec.input_dim
    w1 = rng_nonlin.normal(0.0, np.sqrt(2.0 / L), size=(hidden, L))
    b1 = rng_nonlin.normal(0.0, 0.1, size=hidden)
    w2 = rng_nonlin.normal(0.0, np.sqrt(2.0 / hidden), size=(spec.input_dim, hidden))
    b2 = rng_nonlin.normal(0.0, 0.1, size=spec.input_dim)
    vectors = np.maximum(latents @ w1.T + b1, 0.0) @ w2.T + b2

    order = rng_split.permutation(C)
    t, v, _ = spec.split_counts
    splits = {
        "train": sorted(int(c) for c in order[:t]),
        "val": sorted(int(c) for c in order[t : t + v]),
        "test": sorted(int(c) for c in order[t + v :]),
    }
    return Dataset(vectors, class_ids, splits, latents=latents if keep_latents else None)


def round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def draw_other_class_items(dataset: Dataset, exclude_class: int, count: int, rng) -> np.ndarray:
    """Distinct items from other classes; contaminant class ids are uniform."""
    others = [c for c in dataset.classes if c != int(exclude_class)]
    if not others:
        raise ValueError("dataset has no other classes to draw from")
    picked: list[int] = []
    seen = set()
    guard = 0
    while len(picked) < count:
        c = others[int(rng.integers(len(others)))]
        items = dataset.items_of_class(c)
        item = int(items[int(rng.integers(len(items)))])
        if item not in seen:
            seen.add(item)
            picked.append(item)
        guard += 1
        if guard > 100 * count + 1000:
            raise ValueError("not enough distinct items in other classes")
    return np.asarray(picked, dtype=int)


def sample_noisy_concept_set(dataset: Dataset, class_id: int, size: int, noise_fraction: float, rng) -> np.ndarray:
    """Item indices for one concept set: round-half-up contaminated.

    ``round_half_up(noise_fraction * size)`` items come from other classes,
    the rest from ``class_id``.  Deterministic given the generator state.
    """
    if size < 1:
        raise ValueError("concept set size must be >= 1")
    n_cont = round_half_up(noise_fraction * size)
    if n_cont >= size:
        raise ValueError("contamination leaves no in-class items")
    items = dataset.items_of_class(class_id)
    if len(items) < size - n_cont:
        raise ValueError(f"class {class_id} has too few items for a set of {size}")
    in_class = rng.choice(items, size=size - n_cont, replace=False)
    if n_cont == 0:
        return np.asarray(in_class, dtype=int)
    contaminants = draw_other_class_items(dataset, class_id, n_cont, rng)
    return np.concatenate([in_class, contaminants]).astype(int)


def save_dataset(dataset: Dataset, manifest_path) -> None:
    """Manifest (JSON) plus a flat little-endian float64 vector file."""
    manifest_path = os.fspath(manifest_path)
    stem = os.path.splitext(os.path.basename(manifest_path))[0]
    vectors_name = stem + ".f64"
    doc = {
        "format_version": DATASET_FORMAT_VERSION,
        "input_dim": dataset.input_dim,
        "num_items": dataset.num_items,
        "vectors_file": vectors_name,
        "classes": [
            {"id": int(c), "items": [int(i) for i in dataset.items_of_class(c)]}
            for c in dataset.classes
        ],
        "splits": {name: [int(c) for c in dataset.splits[name]] for name in SPLIT_NAMES},
    }
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
    vec_path = os.path.join(os.path.dirname(manifest_path) or ".", vectors_name)
    with open(vec_path, "wb") as fh:
        fh.write(np.ascontiguousarray(dataset.vectors, dtype="<f8").tobytes())


def load_dataset(manifest_path) -> Dataset:
    manifest_path = os.fspath(manifest_path)
    with open(manifest_path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format_version") != DATASET_FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported dataset format version {doc.get('format_version')}")
    num_items, input_dim = int(doc["num_items"]), int(doc["input_dim"])
    vec_path = os.path.join(os.path.dirname(manifest_path) or ".", doc["vectors_file"])
    raw = np.fromfile(vec_path, dtype="<f8")
    if raw.size != num_items * input_dim:
        raise DatasetFormatError(
            f"vector file holds {raw.size} values, expected {num_items * input_dim}"
        )
    vectors = raw.reshape(num_items, input_dim)

    class_ids = np.full(num_items, -1, dtype=int)
    known_classes = set()
    for entry in doc["classes"]:
        c = int(entry["id"])
        if c in known_classes:
            raise DatasetFormatError(f"class {c} listed twice")
        known_classes.add(c)
        for i in entry["items"]:
            if not 0 <= i < num_items:
                raise DatasetFormatError(f"class {c} references item {i} out of range")
            if class_ids[i] != -1:
                raise DatasetFormatError(f"item {i} assigned to two classes")
            class_ids[i] = c
    if np.any(class_ids == -1):
        raise DatasetFormatError("some items belong to no class")

    splits_doc = doc["splits"]
    unknown = set(splits_doc) - set(SPLIT_NAMES)
    if unknown:
        raise DatasetFormatError(f"unknown split label(s): {sorted(unknown)}")
    assigned = set()
    splits = {}
    for name in SPLIT_NAMES:
        ids = [int(c) for c in splits_doc.get(name, [])]
        for c in ids:
            if c not in known_classes:
                raise DatasetFormatError(f"split {name!r} references missing class {c}")
            if c in assigned:
                raise DatasetFormatError(f"class {c} appears in two splits")
            assigned.add(c)
        splits[name] = sorted(ids)
    if assigned != known_classes:
        missing = sorted(known_classes - assigned)
        raise DatasetFormatError(f"classes missing a split assignment: {missing}")
    return Dataset(vectors, class_ids, splits)
