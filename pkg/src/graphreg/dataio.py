"""Datasets, the text dataset format, and synthetic data generation.

Dataset file layout (UTF-8, LF, ``#`` comments)::

    # graphreg-dataset v1 num_classes=<K> dim=<D>
    <id>\t<comma-separated label ids, empty if unlabeled>\t<f1>\t...\t<fD>

Feature values are written with 17 significant digits so a save/load
round trip is exact.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from graphreg.errors import InvalidArgumentError, ParseError, SchemaError
from graphreg.graph import ClickLogRecord, RecordKind
from graphreg.numerics import DTYPE

HEADER_RE = re.compile(r"#\s*graphreg-dataset\s+v1\b(.*)")


@dataclass(eq=False)
class Example:
    id: int
    features: np.ndarray
    labels: frozenset[int] = frozenset()
    split: str = "train"
    # generator-side ground truth; never serialized
    true_class: int | None = field(default=None, compare=False)

    def __post_init__(self):
        self.labels = frozenset(int(k) for k in self.labels)
        self.features = np.asarray(self.features, dtype=DTYPE)

    @property
    def is_labeled(self) -> bool:
        return bool(self.labels)

    def __eq__(self, other):
        if not isinstance(other, Example):
            return NotImplemented
        return (
            self.id == other.id
            and self.labels == other.labels
            and self.split == other.split
            and np.array_equal(self.features, other.features)
        )


@dataclass(eq=False)
class Dataset:
    examples: list[Example]
    num_classes: int

    def __post_init__(self):
        seen = set()
        dim = None
        for ex in self.examples:
            if ex.id in seen:
                raise SchemaError(f"duplicate example id {ex.id}")
            seen.add(ex.id)
            if ex.features.ndim != 1:
                raise SchemaError(f"example {ex.id}: features must be 1-D")
            if dim is None:
                dim = ex.features.shape[0]
            elif ex.features.shape[0] != dim:
                raise SchemaError(f"example {ex.id}: feature dim {ex.features.shape[0]} != {dim}")
            if any(k < 0 or k >= self.num_classes for k in ex.labels):
                raise SchemaError(f"example {ex.id}: label id outside [0, {self.num_classes})")
        self._by_id = {ex.id: ex for ex in self.examples}
        self.dim = dim or 0

    def __len__(self):
        return len(self.examples)

    def __iter__(self) -> Iterator[Example]:
        return iter(self.examples)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.num_classes == other.num_classes and self.examples == other.examples

    def __getitem__(self, example_id: int) -> Example:
        return self._by_id[example_id]

    def __contains__(self, example_id: int) -> bool:
        return example_id in self._by_id

    @property
    def labeled(self) -> list[Example]:
        return [ex for ex in self.examples if ex.is_labeled]

    @property
    def unlabeled(self) -> list[Example]:
        return [ex for ex in self.examples if not ex.is_labeled]

    def split(self, name: str) -> "Dataset":
        return Dataset([ex for ex in self.examples if ex.split == name], self.num_classes)

    def features(self, ids: Sequence[int] | None = None) -> np.ndarray:
        exs = self.examples if ids is None else [self._by_id[i] for i in ids]
        if not exs:
            return np.empty((0, self.dim), dtype=DTYPE)
        return np.stack([ex.features for ex in exs])


def _format_example(ex: Example) -> str:
    labels = ",".join(str(k) for k in sorted(ex.labels))
    feats = "\t".join(f"{x:.17g}" for x in ex.features)
    return f"{ex.id}\t{labels}\t{feats}"


def save_dataset(path, ds: Dataset) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# graphreg-dataset v1 num_classes={ds.num_classes} dim={ds.dim}\n")
        for ex in ds.examples:
            fh.write(_format_example(ex) + "\n")


def load_dataset(path, split: str = "train") -> Dataset:
    """Parse a dataset file; every example gets the given split tag."""
    path = Path(path)
    examples: list[Example] = []
    num_classes = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.startswith("#"):
                m = HEADER_RE.match(line.strip())
                if m:
                    meta = dict(kv.split("=", 1) for kv in m.group(1).split() if "=" in kv)
                    if "num_classes" in meta:
                        num_classes = int(meta["num_classes"])
                continue
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) < 3:
                raise ParseError(f"expected id, labels and features, got {len(parts)} field(s)", path, lineno)
            try:
                ex_id = int(parts[0])
                labels = frozenset(int(k) for k in parts[1].split(",") if k != "")
                feats = np.array([float(x) for x in parts[2:]], dtype=DTYPE)
            except ValueError as exc:
                raise ParseError(str(exc), path, lineno) from exc
            if not np.all(np.isfinite(feats)):
                raise ParseError("non-finite feature value", path, lineno)
            examples.append(Example(ex_id, feats, labels, split))
    if num_classes is None:
        num_classes = 1 + max((k for ex in examples for k in ex.labels), default=-1)
    return Dataset(examples, num_classes)


def generate_synthetic(
    rng: np.random.Generator,
    num_classes: int,
    per_class: int,
    dim: int,
    noise_sigma: float,
    unlabeled_fraction: float = 0.0,
    multilabel_rate: float = 0.0,
    query_per_class: int = 0,
) -> Dataset:
    """Gaussian clusters around unit-sphere class centroids.

    ``per_class`` training examples per class, of which a random
    ``unlabeled_fraction`` lose their labels, plus ``query_per_class``
    labeled held-out examples tagged ``split="query"``. A labeled example
    gains the label of the centroid nearest its own with probability
    ``multilabel_rate``.
    """
    if num_classes < 2:
        raise InvalidArgumentError("num_classes must be at least 2")
    if per_class < 1 or dim < 1:
        raise InvalidArgumentError("per_class and dim must be positive")
    if noise_sigma < 0 or query_per_class < 0:
        raise InvalidArgumentError("noise_sigma and query_per_class must be nonnegative")
    if not 0.0 <= unlabeled_fraction <= 1.0 or not 0.0 <= multilabel_rate <= 1.0:
        raise InvalidArgumentError("fractions must lie in [0, 1]")

    centroids = rng.standard_normal((num_classes, dim))
    centroids /= np.linalg.norm(centroids, axis=1, keepdims=True)
    gaps = ((centroids[:, None, :] - centroids[None, :, :]) ** 2).sum(-1)
    np.fill_diagonal(gaps, np.inf)
    runner_up = gaps.argmin(axis=1)

    n_train = num_classes * per_class
    n_unlabeled = int(round(unlabeled_fraction * n_train))
    unlabeled = set(rng.permutation(n_train)[:n_unlabeled].tolist())

    examples = []
    next_id = 0
    for split, count in (("train", per_class), ("query", query_per_class)):
        for c in range(num_classes):
            noise = rng.standard_normal((count, dim)) * noise_sigma
            extra = rng.random(count) < multilabel_rate
            for i in range(count):
                labels = {c, int(runner_up[c])} if extra[i] else {c}
                if split == "train" and next_id in unlabeled:
                    labels = set()
                examples.append(Example(next_id, centroids[c] + noise[i], frozenset(labels), split, true_class=c))
                next_id += 1
    return Dataset(examples, num_classes)


def _class_of(ex: Example) -> int:
    if ex.true_class is not None:
        return ex.true_class
    if not ex.labels:
        raise InvalidArgumentError(f"example {ex.id} has neither labels nor a known class")
    return min(ex.labels)


def _record(rng: np.random.Generator, u: int, v: int, rate: float, co_click_share: float) -> ClickLogRecord:
    if rng.random() < co_click_share:
        cu, cv = (int(c) for c in rng.integers(20, 201, size=2))
        joint = min(int(round(rate * (cu + cv) / (1.0 + rate))), cu, cv)
        return ClickLogRecord(RecordKind.CO_CLICK, u, v, joint, cu, cv)
    impressions = int(rng.integers(20, 201))
    joint = min(int(round(rate * impressions)), impressions)
    clicks_u = joint + int(rng.integers(0, 51))
    return ClickLogRecord(RecordKind.SIMILAR_IMAGE_CLICK, u, v, joint, clicks_u, impressions)


def generate_click_logs(
    dataset: Dataset,
    rng: np.random.Generator,
    intra_rate: float = 0.8,
    noise_rate: float = 0.1,
    fanout: int = 3,
    co_click_share: float = 0.5,
    intra_rate_range: tuple[float, float] = (0.05, 0.6),
    noise_rate_range: tuple[float, float] = (0.0, 0.15),
) -> list[ClickLogRecord]:
    """Simulated click logs over the training split.

    Each labeled training example considers ``fanout`` same-class partners
    and emits a record for each with probability ``intra_rate``; its rate is
    uniform on ``intra_rate_range``. Every emitted record is followed, with
    probability ``noise_rate``, by a record to a random other-class example
    whose rate is uniform on ``noise_rate_range``. Both ranges straddle the
    default 0.1 threshold. ``co_click_share`` sets the per-record mix of the
    two signal kinds.
    """
    for name, r in (("intra_rate", intra_rate), ("noise_rate", noise_rate), ("co_click_share", co_click_share)):
        if not 0.0 <= r <= 1.0:
            raise InvalidArgumentError(f"{name} must lie in [0, 1], got {r}")
    if fanout < 0:
        raise InvalidArgumentError("fanout must be nonnegative")
    train = [ex for ex in dataset if ex.split == "train"]
    by_class: dict[int, list[int]] = {}
    for ex in train:
        by_class.setdefault(_class_of(ex), []).append(ex.id)
    all_ids = np.array([ex.id for ex in train], dtype=np.int64)
    classes = {ex.id: _class_of(ex) for ex in train}

    records: list[ClickLogRecord] = []
    for ex in train:
        if not ex.is_labeled:
            continue
        c = classes[ex.id]
        mates = [i for i in by_class[c] if i != ex.id]
        if not mates:
            continue
        k = min(fanout, len(mates))
        partners = rng.choice(len(mates), size=k, replace=False)
        for j in partners:
            if rng.random() >= intra_rate:
                continue
            records.append(_record(rng, ex.id, mates[int(j)], rng.uniform(*intra_rate_range), co_click_share))
            if rng.random() < noise_rate:
                for _ in range(100):
                    other = int(all_ids[rng.integers(all_ids.size)])
                    if classes[other] != c:
                        break
                else:
                    continue
                records.append(_record(rng, ex.id, other, rng.uniform(*noise_rate_range), co_click_share))
    return records


def write_truth(path, ds: Dataset) -> None:
    """Generator ground truth (id, class), useful for diagnosing graph purity."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# id\tclass\n")
        for ex in ds:
            if ex.true_class is not None:
                fh.write(f"{ex.id}\t{ex.true_class}\n")


def merge(datasets: Iterable[Dataset]) -> Dataset:
    datasets = list(datasets)
    k = max((d.num_classes for d in datasets), default=0)
    return Dataset([ex for d in datasets for ex in d], k)
