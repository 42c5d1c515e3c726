"""Bag data model, synthetic Gaussian-bag generator, embedding ingestion.

Bags are nested: a bag holds regions, a region holds instance vectors.
Flat consumers call :meth:`NestedBag.flatten`. Instance matrices are kept
as (L, M) float64 arrays per region; per-instance objects are only
materialised at API boundaries.

The synthetic benchmark draws scalar instances from two Gaussians.
Negative bags contain only class-0 draws; positive bags mix in a fraction
rho ~ Uniform(lo, hi) of class-1 draws (rounded down, clamped so the bag
satisfies its labeling rule). Which source distribution produced each
instance is kept as a boolean flag so instance-level supervision and
labeling rules stay available downstream.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .seeding import rng_for

CLASS0_DEFAULT = (3.0, 2.5)
CLASS1_MINOR = (-3.0, 1.0)
CLASS1_PARTIAL = (0.0, 2.0)
CLASS1_SIGNIFICANT = (2.0, 1.5)


@dataclass
class InstanceVec:
    values: np.ndarray
    instance_id: str


@dataclass
class Region:
    region_id: str
    ids: list[str]
    values: np.ndarray                 # (L, M)
    flags: np.ndarray | None = None    # per-instance source class, if known

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DataError(f"region {self.region_id}: values must be (L, M)")
        if len(self.ids) != self.values.shape[0]:
            raise DataError(f"region {self.region_id}: {len(self.ids)} ids for {self.values.shape[0]} rows")
        if self.flags is not None:
            self.flags = np.asarray(self.flags, dtype=bool)
            if self.flags.shape != (self.values.shape[0],):
                raise DataError(f"region {self.region_id}: flags misaligned")

    @property
    def n_instances(self) -> int:
        return self.values.shape[0]

    @property
    def instances(self) -> list[InstanceVec]:
        return [InstanceVec(self.values[i], self.ids[i]) for i in range(len(self.ids))]


@dataclass
class Bag:
    """Flat view of a bag: all regions concatenated in order."""

    bag_id: str
    ids: list[str]
    values: np.ndarray
    flags: np.ndarray | None
    label: int
    clinical: np.ndarray | None = None


@dataclass
class NestedBag:
    bag_id: str
    regions: list[Region]
    label: int
    clinical: np.ndarray | None = None

    @property
    def n_instances(self) -> int:
        return sum(r.n_instances for r in self.regions)

    def flatten(self) -> Bag:
        ids = [i for r in self.regions for i in r.ids]
        values = np.concatenate([r.values for r in self.regions], axis=0)
        if all(r.flags is not None for r in self.regions):
            flags = np.concatenate([r.flags for r in self.regions])
        else:
            flags = None
        return Bag(self.bag_id, ids, values, flags, self.label, self.clinical)


@dataclass
class LabelRule:
    """Bag labeling from instance flags.

    ``any``: positive iff at least one flagged instance. ``frac_gt``:
    positive iff the flagged fraction strictly exceeds ``threshold``.
    """

    kind: str = "any"
    threshold: float = 0.0

    def __post_init__(self):
        if self.kind not in ("any", "frac_gt"):
            raise ConfigError(f"unknown label rule {self.kind!r}")
        if self.kind == "frac_gt" and not (0.0 <= self.threshold < 1.0):
            raise ConfigError(f"threshold must lie in [0, 1), got {self.threshold}")

    @property
    def min_fraction(self) -> float:
        return 0.0 if self.kind == "any" else self.threshold


def label_bag(flags, rule: LabelRule) -> int:
    flags = np.asarray(flags, dtype=bool)
    if flags.size == 0:
        raise DataError("cannot label an empty bag")
    if rule.kind == "any":
        return int(flags.any())
    return int(flags.mean() > rule.threshold)


@dataclass
class SynthSpec:
    class0: tuple[float, float] = CLASS0_DEFAULT
    class1: tuple[float, float] = CLASS1_MINOR
    n_bags: int = 150
    split: tuple[int, int, int] = (90, 30, 30)
    bag_size_range: tuple[int, int] = (3000, 7000)
    positive_bag_fraction: float = 0.5
    positive_instance_fraction_range: tuple[float, float] = (0.0, 0.5)
    label_rule: LabelRule = field(default_factory=LabelRule)
    dim: int = 1
    seed: int = 0

    def validate(self) -> None:
        if self.n_bags != sum(self.split) or any(s <= 0 for s in self.split):
            raise ConfigError(f"split {self.split} must be positive and sum to n_bags={self.n_bags}")
        if self.class0[1] <= 0 or self.class1[1] <= 0:
            raise ConfigError("distribution sigmas must be positive")
        lo, hi = self.bag_size_range
        if not (0 < lo <= hi):
            raise ConfigError(f"bad bag size range {self.bag_size_range}")
        if not (0.0 < self.positive_bag_fraction <= 1.0):
            raise ConfigError(f"positive_bag_fraction must lie in (0, 1], got {self.positive_bag_fraction}")
        rlo, rhi = self.positive_instance_fraction_range
        if not (0.0 <= rlo <= rhi <= 1.0):
            raise ConfigError(f"bad instance fraction range {self.positive_instance_fraction_range}")
        if rhi <= self.label_rule.min_fraction:
            raise ConfigError(
                "degenerate spec: instance fraction range "
                f"[{rlo}, {rhi}] cannot produce a positive bag under the label rule"
            )
        if self.dim < 1:
            raise ConfigError("dim must be >= 1")


@dataclass
class Dataset:
    train: list[NestedBag]
    val: list[NestedBag]
    test: list[NestedBag]
    dim: int
    provenance: dict

    def split(self, name: str) -> list[NestedBag]:
        try:
            return {"train": self.train, "val": self.val, "test": self.test}[name]
        except KeyError:
            raise KeyError(f"unknown split {name!r}") from None

    def all_bags(self) -> list[NestedBag]:
        return self.train + self.val + self.test


def _allocate(counts_total: int, split: tuple[int, ...], n_bags: int) -> list[int]:
    """Largest-remainder allocation of a class count across splits."""
    exact = [s * counts_total / n_bags for s in split]
    base = [int(np.floor(e)) for e in exact]
    short = counts_total - sum(base)
    order = sorted(range(len(split)), key=lambda i: (-(exact[i] - base[i]), i))
    for i in order[:short]:
        base[i] += 1
    return base


def gen_synth_bags(spec: SynthSpec) -> Dataset:
    """Generate a stratified synthetic dataset; identical per (spec, seed)."""
    spec.validate()
    rng = rng_for(spec.seed, "synth")
    n_pos = int(round(spec.n_bags * spec.positive_bag_fraction))
    pos_per_split = _allocate(n_pos, spec.split, spec.n_bags)

    mu0, sd0 = spec.class0
    mu1, sd1 = spec.class1
    rlo, rhi = spec.positive_instance_fraction_range
    lo, hi = spec.bag_size_range
    width = len(str(spec.n_bags - 1))

    splits: list[list[NestedBag]] = []
    counter = 0
    for split_size, split_pos in zip(spec.split, pos_per_split):
        labels = np.array([1] * split_pos + [0] * (split_size - split_pos))
        rng.shuffle(labels)
        bags = []
        for lab in labels:
            bag_id = f"synth-{counter:0{width}d}"
            counter += 1
            size = int(rng.integers(lo, hi + 1))
            if lab == 1:
                rho = float(rng.uniform(rlo, rhi))
                m = int(np.floor(rho * size))
                # clamp so the designated-positive bag satisfies its rule
                m_min = int(np.floor(spec.label_rule.min_fraction * size)) + 1
                m = min(max(m, m_min), size)
            else:
                m = 0
            vals = np.empty((size, spec.dim))
            flags = np.zeros(size, dtype=bool)
            if m:
                vals[:m] = rng.normal(mu1, sd1, size=(m, spec.dim))
                flags[:m] = True
            vals[m:] = rng.normal(mu0, sd0, size=(size - m, spec.dim))
            perm = rng.permutation(size)
            vals, flags = vals[perm], flags[perm]
            ids = [f"{bag_id}-i{k:05d}" for k in range(size)]
            bags.append(NestedBag(bag_id, [Region("r0", ids, vals, flags)], int(lab)))
        splits.append(bags)

    provenance = {
        "kind": "synthetic",
        "class0": list(spec.class0),
        "class1": list(spec.class1),
        "n_bags": spec.n_bags,
        "split": list(spec.split),
        "bag_size_range": list(spec.bag_size_range),
        "positive_bag_fraction": spec.positive_bag_fraction,
        "positive_instance_fraction_range": [rlo, rhi],
        "label_rule": [spec.label_rule.kind, spec.label_rule.threshold],
        "dim": spec.dim,
        "seed": spec.seed,
    }
    return Dataset(splits[0], splits[1], splits[2], spec.dim, provenance)


def subsample_bag(nb: NestedBag, n_b: int | None, seed: int) -> NestedBag:
    """Uniformly sample min(n_b, L) instances per region, without replacement.

    Deterministic per (seed, bag_id); callers fold the epoch into ``seed``.
    ``n_b`` of None means keep the whole bag.
    """
    if n_b is None:
        return nb
    if n_b < 1:
        raise ValueError(f"n_b must be >= 1, got {n_b}")
    rng = rng_for(seed, "subsample", nb.bag_id)
    regions = []
    for r in nb.regions:
        if n_b >= r.n_instances:
            regions.append(r)
            continue
        idx = np.sort(rng.choice(r.n_instances, size=n_b, replace=False))
        regions.append(
            Region(
                r.region_id,
                [r.ids[i] for i in idx],
                r.values[idx],
                None if r.flags is None else r.flags[idx],
            )
        )
    return NestedBag(nb.bag_id, regions, nb.label, nb.clinical)


def split_into_regions(nb: NestedBag, seed: int, k_range: tuple[int, int] = (2, 6)) -> NestedBag:
    """Partition a bag into K ~ Uniform{k_range} contiguous chunks.

    Used to emulate tissue regions on synthetic bags before nested
    aggregation. Single chunk if the bag is too small to split.
    """
    flat = nb.flatten()
    n = len(flat.ids)
    rng = rng_for(seed, "regions", nb.bag_id)
    k = int(rng.integers(k_range[0], k_range[1] + 1))
    k = min(k, n)
    if k <= 1:
        return NestedBag(nb.bag_id, [Region("r0", flat.ids, flat.values, flat.flags)], nb.label, nb.clinical)
    cuts = np.sort(rng.choice(np.arange(1, n), size=k - 1, replace=False))
    bounds = [0, *cuts.tolist(), n]
    regions = []
    for j in range(k):
        a, b = bounds[j], bounds[j + 1]
        regions.append(
            Region(
                f"r{j}",
                flat.ids[a:b],
                flat.values[a:b],
                None if flat.flags is None else flat.flags[a:b],
            )
        )
    return NestedBag(nb.bag_id, regions, nb.label, nb.clinical)


def pooled_instances(bags: list[NestedBag]) -> tuple[np.ndarray, np.ndarray | None]:
    """Stack all instance vectors (and flags when fully available)."""
    values = np.concatenate([r.values for nb in bags for r in nb.regions], axis=0)
    parts = [r.flags for nb in bags for r in nb.regions]
    flags = np.concatenate(parts) if all(p is not None for p in parts) else None
    return values, flags


# ---------------------------------------------------------------------------
# embedding manifest ingestion
# ---------------------------------------------------------------------------


def load_embeddings(manifest_path: str | Path) -> Dataset:
    """Load a dataset from a manifest JSON plus an embedding CSV.

    Manifest keys: ``dim``, ``labels`` (bag_id -> 0/1), ``splits``
    (train/val/test id lists), ``embeddings_csv`` (path relative to the
    manifest), optional ``clinical`` (bag_id -> float vector, z-scored
    here against the train split). CSV header is
    ``bag_id[,region_id],instance_id,f0..f{M-1}``; the region column is
    optional (single implicit region). Errors cite physical CSV line
    numbers (header is line 1).
    """
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read manifest {manifest_path}: {e}") from None

    for key in ("dim", "labels", "splits", "embeddings_csv"):
        if key not in manifest:
            raise DataError(f"manifest missing key {key!r}")
    dim = manifest["dim"]
    if not isinstance(dim, int) or dim < 1:
        raise DataError(f"dim must be a positive integer, got {dim!r}")
    labels = manifest["labels"]
    for bag_id, lab in labels.items():
        if lab not in (0, 1):
            raise DataError(f"label for bag {bag_id!r} must be 0 or 1, got {lab!r}")
    splits = manifest["splits"]
    for name in ("train", "val", "test"):
        if name not in splits:
            raise DataError(f"splits missing {name!r}")
    seen: dict[str, str] = {}
    for name in ("train", "val", "test"):
        for bag_id in splits[name]:
            if bag_id in seen:
                raise DataError(f"bag {bag_id!r} assigned to both {seen[bag_id]} and {name}")
            if bag_id not in labels:
                raise DataError(f"split bag {bag_id!r} has no label")
            seen[bag_id] = name

    csv_path = manifest_path.parent / manifest["embeddings_csv"]
    bags: dict[str, dict[str, tuple[list[str], list[np.ndarray]]]] = {}
    seen_instance: dict[str, set[str]] = {}
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{csv_path}: empty embedding CSV") from None
        has_region = len(header) > 1 and header[1] == "region_id"
        meta_cols = 3 if has_region else 2
        expected = (["bag_id", "region_id", "instance_id"] if has_region else ["bag_id", "instance_id"])
        if header[:meta_cols] != expected or len(header) != meta_cols + dim:
            raise DataError(
                f"{csv_path}: header must be {','.join(expected)},f0..f{dim - 1} "
                f"({meta_cols + dim} columns), got {len(header)} columns"
            )
        for lineno, row in enumerate(reader, start=2):
            if len(row) != meta_cols + dim:
                raise DataError(f"{csv_path}: row {lineno}: expected {meta_cols + dim} fields, got {len(row)}")
            bag_id = row[0]
            region_id = row[1] if has_region else "r0"
            instance_id = row[meta_cols - 1]
            if bag_id not in labels:
                raise DataError(f"{csv_path}: row {lineno}: bag {bag_id!r} missing from manifest labels")
            if bag_id not in seen:
                raise DataError(f"{csv_path}: row {lineno}: bag {bag_id!r} not assigned to any split")
            try:
                vec = np.array([float(v) for v in row[meta_cols:]])
            except ValueError:
                raise DataError(f"{csv_path}: row {lineno}: non-numeric feature value") from None
            inst_seen = seen_instance.setdefault(bag_id, set())
            if instance_id in inst_seen:
                raise DataError(f"{csv_path}: row {lineno}: duplicate instance_id {instance_id!r} in bag {bag_id!r}")
            inst_seen.add(instance_id)
            ids, vecs = bags.setdefault(bag_id, {}).setdefault(region_id, ([], []))
            ids.append(instance_id)
            vecs.append(vec)

    missing = [b for b in seen if b not in bags]
    if missing:
        raise DataError(f"{csv_path}: no rows for split bag(s) {sorted(missing)}")

    clinical_raw = manifest.get("clinical")
    clinical: dict[str, np.ndarray] = {}
    if clinical_raw is not None:
        lengths = {len(v) for v in clinical_raw.values()}
        if len(lengths) != 1:
            raise DataError("clinical vectors must all have the same length")
        for bag_id in seen:
            if bag_id not in clinical_raw:
                raise DataError(f"bag {bag_id!r} has no clinical vector")
        train_mat = np.array([clinical_raw[b] for b in splits["train"]], dtype=np.float64)
        mean = train_mat.mean(axis=0)
        std = train_mat.std(axis=0)
        std = np.where(std > 0, std, 1.0)
        for bag_id in seen:
            raw = np.asarray(clinical_raw[bag_id], dtype=np.float64)
            clinical[bag_id] = (raw - mean) / std

    def build(bag_id: str) -> NestedBag:
        regions = [
            Region(region_id, ids, np.vstack(vecs))
            for region_id, (ids, vecs) in bags[bag_id].items()
        ]
        return NestedBag(bag_id, regions, int(labels[bag_id]), clinical.get(bag_id))

    out = {name: [build(b) for b in splits[name]] for name in ("train", "val", "test")}
    provenance = {"kind": "ingested", "manifest": str(manifest_path)}
    return Dataset(out["train"], out["val"], out["test"], dim, provenance)
