"""Payload datasets: CSV ingestion, resampling, splits, and synthetic generation.

Every record is a fixed-width vector of 1500 payload bytes normalized to
[0, 1] plus a class label.  All randomized operations take an explicit seed;
there is no ambient RNG state anywhere in this module.
"""

from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from .exceptions import DataFormatError

logger = logging.getLogger(__name__)

PAYLOAD_WIDTH = 1500

CACHE_MAGIC = b"ODXD"
CACHE_VERSION = 1


def _check_payload_matrix(features: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != PAYLOAD_WIDTH:
        raise ValueError(
            f"payload matrix must have shape (n, {PAYLOAD_WIDTH}), got {features.shape}"
        )
    if features.size and (features.min() < 0.0 or features.max() > 1.0):
        raise ValueError("payload values must lie in [0, 1]")
    return features


@dataclass(frozen=True)
class PayloadRecord:
    """One packet: 1500 normalized byte values plus its class label."""

    features: np.ndarray
    label: str
    split_tag: str | None = None

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        if features.shape != (PAYLOAD_WIDTH,):
            raise ValueError(
                f"record must hold exactly {PAYLOAD_WIDTH} values, got {features.shape}"
            )
        if features.min() < 0.0 or features.max() > 1.0:
            raise ValueError("record values must lie in [0, 1]")
        features.flags.writeable = False
        object.__setattr__(self, "features", features)


class Dataset:
    """An immutable ordered collection of payload records.

    Stores the payload matrix contiguously for numeric work; ``records``
    iterates :class:`PayloadRecord` views.  ``class_table`` is always
    consistent with the stored labels because it is derived from them.
    """

    def __init__(self, features, labels, *, split_tags=None, n_truncated: int = 0):
        features = _check_payload_matrix(features)
        labels = np.asarray(labels, dtype=object)
        if labels.ndim != 1 or len(labels) != len(features):
            raise ValueError("labels must align with the payload matrix rows")
        features.flags.writeable = False
        labels.flags.writeable = False
        self._features = features
        self._labels = labels
        self._split_tags = None
        if split_tags is not None:
            split_tags = np.asarray(split_tags, dtype=object)
            if len(split_tags) != len(features):
                raise ValueError("split_tags must align with records")
            split_tags.flags.writeable = False
            self._split_tags = split_tags
        self.n_truncated = int(n_truncated)
        self._class_table: dict[str, int] | None = None

    @classmethod
    def from_records(cls, records) -> "Dataset":
        records = list(records)
        features = np.array([r.features for r in records], dtype=np.float64)
        features = features.reshape(len(records), PAYLOAD_WIDTH)
        labels = [r.label for r in records]
        tags = [r.split_tag for r in records]
        if all(t is None for t in tags):
            tags = None
        return cls(features, labels, split_tags=tags)

    @property
    def features(self) -> np.ndarray:
        return self._features

    @property
    def labels(self) -> np.ndarray:
        return self._labels

    @property
    def class_table(self) -> dict[str, int]:
        if self._class_table is None:
            uniq, counts = np.unique(self._labels.astype(str), return_counts=True)
            self._class_table = {str(u): int(c) for u, c in zip(uniq, counts)}
        return dict(self._class_table)

    def classes(self) -> list[str]:
        return sorted(self.class_table)

    @property
    def records(self):
        for i in range(len(self)):
            tag = self._split_tags[i] if self._split_tags is not None else None
            yield PayloadRecord(self._features[i], str(self._labels[i]), tag)

    def __len__(self) -> int:
        return len(self._labels)

    def subset(self, indices, *, split_tag: str | None = None) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        tags = None
        if split_tag is not None:
            tags = np.full(len(indices), split_tag, dtype=object)
        elif self._split_tags is not None:
            tags = self._split_tags[indices]
        return Dataset(self._features[indices], self._labels[indices], split_tags=tags)

    @staticmethod
    def concat(parts) -> "Dataset":
        parts = list(parts)
        features = np.vstack([p.features for p in parts])
        labels = np.concatenate([p.labels for p in parts])
        return Dataset(features, labels)


@dataclass(frozen=True)
class SplitPlan:
    """Resampling/split recipe: benign downsample, per-class upsampling,
    training portion, and an optional class held out as unknown."""

    seed: int
    benign_downsample: float = 0.0
    upsample_classes: dict[str, float] = field(default_factory=dict)
    portion: float = 1.0
    holdout_class: str | None = None
    benign_class: str = "Benign"

    def __post_init__(self):
        if not (0.0 < self.portion <= 1.0):
            raise ValueError(f"portion must lie in (0, 1], got {self.portion}")
        if not (0.0 <= self.benign_downsample < 1.0):
            raise ValueError(
                f"benign_downsample must lie in [0, 1), got {self.benign_downsample}"
            )
        for cls, factor in self.upsample_classes.items():
            if factor < 1.0:
                raise ValueError(
                    f"upsample factor for {cls!r} must be >= 1, got {factor}"
                )


def load_csv(path) -> Dataset:
    """Load a ``payload,label`` CSV into a Dataset.

    The payload column is lowercase hex.  Payloads shorter than 1500 bytes
    are right-padded with zeros; longer ones are truncated to the first 1500
    bytes and counted in ``Dataset.n_truncated``.  Each byte is divided by
    255.  Malformed hex raises :class:`DataFormatError` with the line number.
    """
    rows: list[np.ndarray] = []
    labels: list[str] = []
    n_truncated = 0
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"payload", "label"} <= set(reader.fieldnames):
            raise DataFormatError(
                f"{path}: header must contain 'payload' and 'label' columns"
            )
        for row in reader:
            line = reader.line_num
            payload = (row["payload"] or "").strip()
            label = (row["label"] or "").strip()
            try:
                raw = bytes.fromhex(payload)
            except ValueError as exc:
                raise DataFormatError(f"{path}: line {line}: bad hex payload: {exc}") from exc
            if len(raw) > PAYLOAD_WIDTH:
                raw = raw[:PAYLOAD_WIDTH]
                n_truncated += 1
            vec = np.zeros(PAYLOAD_WIDTH, dtype=np.float64)
            if raw:
                vec[: len(raw)] = np.frombuffer(raw, dtype=np.uint8) / 255.0
            rows.append(vec)
            labels.append(label)
    if n_truncated:
        logger.warning("%s: truncated %d payloads to %d bytes", path, n_truncated, PAYLOAD_WIDTH)
    features = (
        np.array(rows) if rows else np.empty((0, PAYLOAD_WIDTH), dtype=np.float64)
    )
    return Dataset(features, labels, n_truncated=n_truncated)


def save_cache(ds: Dataset, path) -> None:
    """Write the binary record cache (magic ``ODXD``).

    Payload values are stored as raw bytes, so anything off the 1/255 grid
    is rounded to the nearest step.
    """
    raw = np.rint(ds.features * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<H", CACHE_VERSION))
        fh.write(struct.pack("<Q", len(ds)))
        for i in range(len(ds)):
            fh.write(raw[i].tobytes())
            label = str(ds.labels[i]).encode("utf-8")
            fh.write(struct.pack("<H", len(label)))
            fh.write(label)


def load_cache(path) -> Dataset:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CACHE_MAGIC:
            raise DataFormatError(f"{path}: bad magic {magic!r}, expected {CACHE_MAGIC!r}")
        (version,) = struct.unpack("<H", fh.read(2))
        if version != CACHE_VERSION:
            raise DataFormatError(f"{path}: unsupported cache version {version}")
        (count,) = struct.unpack("<Q", fh.read(8))
        features = np.empty((count, PAYLOAD_WIDTH), dtype=np.float64)
        labels = []
        for i in range(count):
            blob = fh.read(PAYLOAD_WIDTH)
            if len(blob) != PAYLOAD_WIDTH:
                raise DataFormatError(f"{path}: truncated record {i}")
            features[i] = np.frombuffer(blob, dtype=np.uint8) / 255.0
            (label_len,) = struct.unpack("<H", fh.read(2))
            labels.append(fh.read(label_len).decode("utf-8"))
    return Dataset(features, labels)


def rebalance(ds: Dataset, plan: SplitPlan) -> Dataset:
    """Apply the class-rebalancing recipe.

    The benign class keeps ``round((1 - benign_downsample) * count)`` records
    sampled without replacement; each upsampled class is replicated (with
    replacement) until its count reaches ``round(factor * count)``.
    Deterministic under ``plan.seed``.
    """
    table = ds.class_table
    if plan.benign_downsample > 0.0 and plan.benign_class not in table:
        raise ValueError(f"benign class {plan.benign_class!r} not present in dataset")
    for cls in plan.upsample_classes:
        if cls not in table:
            raise ValueError(f"upsample class {cls!r} not present in dataset")

    rng = np.random.default_rng(plan.seed)
    labels = ds.labels.astype(str)
    keep = np.ones(len(ds), dtype=bool)
    if plan.benign_downsample > 0.0:
        benign_idx = np.flatnonzero(labels == plan.benign_class)
        target = int(round((1.0 - plan.benign_downsample) * len(benign_idx)))
        kept = rng.choice(benign_idx, size=target, replace=False)
        keep[benign_idx] = False
        keep[kept] = True
    base_idx = np.flatnonzero(keep)

    extra: list[np.ndarray] = []
    for cls in sorted(plan.upsample_classes):
        factor = plan.upsample_classes[cls]
        cls_idx = np.flatnonzero(labels == cls)
        target = int(round(factor * len(cls_idx)))
        n_extra = target - len(cls_idx)
        if n_extra > 0:
            extra.append(rng.choice(cls_idx, size=n_extra, replace=True))
    indices = np.concatenate([base_idx] + extra) if extra else base_idx
    return ds.subset(indices)


def split_indices(labels, fractions, *, stratified: bool, seed: int) -> list[np.ndarray]:
    """Partition ``range(len(labels))`` into index arrays, one per fraction.

    The partition is exact: every index lands in exactly one output.  With
    ``stratified`` set, the allocation is done per class.  Output index
    arrays are sorted, so subsets keep the input's relative order.
    """
    fractions = [float(f) for f in fractions]
    if any(f <= 0.0 for f in fractions):
        raise ValueError("every fraction must be > 0")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)!r}")
    labels = np.asarray(labels)
    n = len(labels)
    rng = np.random.default_rng(seed)
    cum = np.cumsum(fractions)

    def allocate(idx: np.ndarray) -> list[np.ndarray]:
        shuffled = rng.permutation(idx)
        bounds = [int(round(c * len(idx))) for c in cum]
        bounds[-1] = len(idx)
        parts, start = [], 0
        for b in bounds:
            parts.append(shuffled[start:b])
            start = b
        return parts

    if stratified:
        pieces: list[list[np.ndarray]] = [[] for _ in fractions]
        for cls in sorted(set(labels.astype(str))):
            cls_idx = np.flatnonzero(labels.astype(str) == cls)
            for k, part in enumerate(allocate(cls_idx)):
                pieces[k].append(part)
        return [np.sort(np.concatenate(p)) if p else np.array([], dtype=np.int64) for p in pieces]
    return [np.sort(p) for p in allocate(np.arange(n))]


def split(ds: Dataset, fractions, *, stratified: bool = False, seed: int = 0,
          tags: list[str] | None = None) -> list[Dataset]:
    """Partition a dataset into parts with the given fractions (summing to 1)."""
    parts = split_indices(ds.labels, fractions, stratified=stratified, seed=seed)
    if tags is None:
        tags = [None] * len(parts)
    return [ds.subset(idx, split_tag=tag) for idx, tag in zip(parts, tags)]


def take_portion(ds: Dataset, portion: float, *, stratified: bool = True, seed: int = 0) -> Dataset:
    """Keep a stratified fraction of the dataset (1.0 keeps everything)."""
    if not (0.0 < portion <= 1.0):
        raise ValueError(f"portion must lie in (0, 1], got {portion}")
    if portion == 1.0:
        return ds
    kept, _ = split_indices(ds.labels, [portion, 1.0 - portion], stratified=stratified, seed=seed)
    return ds.subset(kept)


def holdout_unknown(ds: Dataset, cls: str) -> tuple[Dataset, Dataset]:
    """Split off every record of ``cls`` as the unknown set."""
    labels = ds.labels.astype(str)
    unknown_idx = np.flatnonzero(labels == cls)
    if len(unknown_idx) == 0:
        raise ValueError(f"holdout class {cls!r} not present in dataset")
    known_idx = np.flatnonzero(labels != cls)
    return ds.subset(known_idx), ds.subset(unknown_idx)


def synth_templates(n_classes: int, seed: int) -> np.ndarray:
    """The class template vectors used by :func:`synth_generate`."""
    rng = np.random.default_rng(seed)
    return rng.random((n_classes, PAYLOAD_WIDTH))


def synth_generate(n_classes: int, n_per_class: int, overlap: float, seed: int) -> Dataset:
    """Generate a labeled synthetic payload dataset.

    Each record is a convex mix ``(1 - overlap) * template + overlap * noise``
    with per-record uniform noise, then rounded to the 1/255 byte grid so it
    round-trips the binary cache exactly.  ``overlap=0`` gives disjoint class
    templates; as overlap approaches 1 the classes become indistinguishable.
    """
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    if n_per_class < 1:
        raise ValueError("need at least 1 record per class")
    if not (0.0 <= overlap <= 1.0):
        raise ValueError(f"overlap must lie in [0, 1], got {overlap}")
    rng = np.random.default_rng(seed)
    templates = rng.random((n_classes, PAYLOAD_WIDTH))
    blocks, labels = [], []
    for c in range(n_classes):
        noise = rng.random((n_per_class, PAYLOAD_WIDTH))
        block = (1.0 - overlap) * templates[c] + overlap * noise
        blocks.append(np.rint(block * 255.0) / 255.0)
        labels.extend([f"c{c:02d}"] * n_per_class)
    return Dataset(np.vstack(blocks), labels)


def nearest_template_labels(features: np.ndarray, templates: np.ndarray) -> np.ndarray:
    """Classify rows to the nearest class template (euclidean).  Oracle helper."""
    features = np.asarray(features, dtype=np.float64)
    d2 = ((features[:, None, :] - templates[None, :, :]) ** 2).sum(axis=2)
    return d2.argmin(axis=1)
