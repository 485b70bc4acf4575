"""Embedding evaluation: kNN Top-k accuracy and triplet recall vs. margin."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from graphreg import losses
from graphreg.dataio import Dataset
from graphreg.errors import DegenerateInputError, InvalidArgumentError, ParseError
from graphreg.model import ModelParams, embed
from graphreg.numerics import DTYPE

DEFAULT_KS = (1, 5)
HEADLINE_ETA = 0.0


def default_eta_grid(start: float = -1.0, stop: float = 1.0, step: float = 0.05) -> list[float]:
    n = int(round((stop - start) / step)) + 1
    return [float(np.round(start + i * step, 10)) for i in range(n)]


@dataclass
class EmbeddedSet:
    ids: np.ndarray
    embeddings: np.ndarray
    labels: list[frozenset[int]]

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.embeddings = np.asarray(self.embeddings, dtype=DTYPE)
        self.labels = [frozenset(l) for l in self.labels]
        if self.embeddings.ndim != 2 or len(self.ids) != len(self.embeddings) or len(self.labels) != len(self.ids):
            raise InvalidArgumentError("ids, embeddings and labels must align")

    def __len__(self):
        return len(self.ids)

    @classmethod
    def from_dataset(cls, params: ModelParams, ds: Dataset, normalize: bool = True, labeled_only: bool = False):
        exs = ds.labeled if labeled_only else ds.examples
        emb = embed(params, np.stack([ex.features for ex in exs]), normalize) if exs else np.empty((0, params.config.embedding_dim))
        return cls([ex.id for ex in exs], emb, [ex.labels for ex in exs])


def pairwise_distances(a: np.ndarray, b: np.ndarray, metric: str, chunk: int = 64) -> np.ndarray:
    """Exact (len(a), len(b)) distance matrix, computed one query block at a time."""
    losses.check_metric(metric)
    out = np.empty((a.shape[0], b.shape[0]), dtype=DTYPE)
    if metric == "cosine":
        na = np.linalg.norm(a, axis=1)
        nb = np.linalg.norm(b, axis=1)
        if np.any(na == 0) or np.any(nb == 0):
            raise DegenerateInputError("cosine distance is undefined for a zero vector")
    for s in range(0, a.shape[0], chunk):
        block = a[s : s + chunk]
        if metric == "euclidean":
            out[s : s + chunk] = np.sqrt(((block[:, None, :] - b[None, :, :]) ** 2).sum(-1))
        else:
            dots = (block[:, None, :] * b[None, :, :]).sum(-1)
            out[s : s + chunk] = 1.0 - dots / (na[s : s + chunk, None] * nb[None, :])
    return out


def knn_topk(
    queries: EmbeddedSet,
    index: EmbeddedSet,
    ks: Iterable[int] = DEFAULT_KS,
    metric: str = "euclidean",
) -> dict[int, float]:
    """Fraction of queries with at least one label-sharing item among their k nearest.

    Exhaustive search; ties in distance go to the smaller index id.
    """
    ks = sorted(set(int(k) for k in ks))
    if not ks or ks[0] < 1:
        raise InvalidArgumentError("k values must be positive")
    if len(index) == 0 or len(queries) == 0:
        raise InvalidArgumentError("queries and index must be nonempty")
    if queries.embeddings.shape[1] != index.embeddings.shape[1]:
        raise InvalidArgumentError("query and index embeddings differ in dimension")
    if np.intersect1d(queries.ids, index.ids).size:
        raise InvalidArgumentError("queries must not be members of the index")
    if any(not l for l in queries.labels):
        raise InvalidArgumentError("every query needs at least one label")
    if ks[-1] > len(index):
        warnings.warn(f"k={ks[-1]} exceeds index size {len(index)}; clamping", stacklevel=2)
    kmax = min(ks[-1], len(index))

    dist = pairwise_distances(queries.embeddings, index.embeddings, metric)
    # first hit position per query, kmax if none in range
    first_hit = np.full(len(queries), kmax, dtype=np.int64)
    id_key = np.broadcast_to(index.ids, dist.shape[1:])
    for qi in range(len(queries)):
        order = np.lexsort((id_key, dist[qi]))[:kmax]
        qlabels = queries.labels[qi]
        for rank, j in enumerate(order):
            if qlabels & index.labels[j]:
                first_hit[qi] = rank
                break
    return {k: float(np.mean(first_hit < min(k, kmax))) for k in ks}


def triplet_accurate(d_ap: float, d_an: float, eta: float = HEADLINE_ETA) -> bool:
    """True iff eta + d(A, P) - d(A, N) < 0."""
    return eta + d_ap - d_an < 0


@dataclass(frozen=True)
class Triplet:
    anchor: int
    positive: int
    negative: int

    def __post_init__(self):
        if len({self.anchor, self.positive, self.negative}) != 3:
            raise InvalidArgumentError(f"triplet members must be distinct: {self}")


def triplet_distances(
    triplets: Sequence[Triplet], embeddings: Mapping[int, np.ndarray], metric: str = "euclidean"
) -> tuple[np.ndarray, np.ndarray]:
    try:
        a = np.stack([embeddings[t.anchor] for t in triplets])
        p = np.stack([embeddings[t.positive] for t in triplets])
        n = np.stack([embeddings[t.negative] for t in triplets])
    except KeyError as exc:
        raise InvalidArgumentError(f"triplet references unknown id {exc.args[0]}") from None
    return losses.distance_rows(a, p, metric), losses.distance_rows(a, n, metric)


def recall_vs_margin(
    triplets: Sequence[Triplet],
    embeddings: Mapping[int, np.ndarray],
    metric: str = "euclidean",
    eta_grid: Sequence[float] | None = None,
) -> list[tuple[float, float]]:
    """(eta, fraction of triplets accurate at margin eta) for each eta in the grid."""
    eta_grid = default_eta_grid() if eta_grid is None else list(eta_grid)
    if not triplets or not eta_grid:
        raise InvalidArgumentError("need at least one triplet and one margin")
    d_ap, d_an = triplet_distances(triplets, embeddings, metric)
    return [(float(eta), float(np.mean(eta + d_ap - d_an < 0))) for eta in eta_grid]


def class_centroids(ds: Dataset) -> dict[int, np.ndarray]:
    sums: dict[int, list[np.ndarray]] = {}
    for ex in ds.labeled:
        for c in ex.labels:
            sums.setdefault(c, []).append(ex.features)
    return {c: np.mean(v, axis=0) for c, v in sorted(sums.items())}


def make_synthetic_triplets(ds: Dataset, rng: np.random.Generator, count: int) -> list[Triplet]:
    """Anchor/positive share a class; the negative comes from the class whose
    centroid is nearest the anchor class centroid and does not carry the
    anchor's class (a hard negative)."""
    by_class: dict[int, list[int]] = {}
    for ex in ds.labeled:
        for c in ex.labels:
            by_class.setdefault(c, []).append(ex.id)
    eligible = sorted(c for c, ids in by_class.items() if len(ids) >= 2)
    if len(by_class) < 2 or not eligible:
        raise InvalidArgumentError("need at least two classes, one of them with two or more examples")
    cents = class_centroids(ds)
    classes = sorted(cents)
    mat = np.stack([cents[c] for c in classes])

    nearest_foreign: dict[int, list[int]] = {}
    for c in eligible:
        gaps = np.sqrt(((mat - cents[c]) ** 2).sum(axis=1))
        for j in np.argsort(gaps, kind="stable"):
            other = classes[j]
            if other == c:
                continue
            pool = [i for i in by_class[other] if c not in ds[i].labels]
            if pool:
                nearest_foreign[c] = pool
                break
    eligible = [c for c in eligible if c in nearest_foreign]
    if not eligible:
        raise InvalidArgumentError("no class has a usable hard-negative class")

    out = []
    for _ in range(count):
        c = eligible[int(rng.integers(len(eligible)))]
        members = by_class[c]
        a, p = rng.choice(len(members), size=2, replace=False)
        negs = nearest_foreign[c]
        n = negs[int(rng.integers(len(negs)))]
        out.append(Triplet(members[int(a)], members[int(p)], n))
    return out


def write_triplets(path, triplets: Iterable[Triplet]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# anchor\tpositive\tnegative\n")
        for t in triplets:
            fh.write(f"{t.anchor}\t{t.positive}\t{t.negative}\n")


def read_triplets(path) -> list[Triplet]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.startswith("#") or not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            try:
                if len(parts) != 3:
                    raise ValueError(f"expected 3 fields, got {len(parts)}")
                out.append(Triplet(*(int(p) for p in parts)))
            except (ValueError, InvalidArgumentError) as exc:
                raise ParseError(str(exc), path, lineno) from exc
    return out


@dataclass
class EvalReport:
    top_k_accuracy: dict[int, float]
    metric: str
    triplet_accuracy: float | None = None
    recall_curve: list[tuple[float, float]] = field(default_factory=list)

    def write(self, out_dir) -> list[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        topk = out_dir / "topk.tsv"
        with open(topk, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("k\taccuracy\n")
            for k, acc in sorted(self.top_k_accuracy.items()):
                fh.write(f"{k}\t{acc!r}\n")
        written = [topk]
        if self.recall_curve:
            curve = out_dir / "recall_curve.tsv"
            with open(curve, "w", encoding="utf-8", newline="\n") as fh:
                fh.write("eta\trecall\n")
                for eta, recall in self.recall_curve:
                    fh.write(f"{eta!r}\t{recall!r}\n")
            written.append(curve)
        return written

    def summary(self) -> str:
        lines = [f"metric\t{self.metric}"]
        lines += [f"top-{k}\t{acc:.4f}" for k, acc in sorted(self.top_k_accuracy.items())]
        if self.triplet_accuracy is not None:
            lines.append(f"triplet accuracy (eta={HEADLINE_ETA:g})\t{self.triplet_accuracy:.4f}")
        return "\n".join(lines)


def evaluate(
    params: ModelParams,
    queries: Dataset,
    index: Dataset,
    triplets: Sequence[Triplet] = (),
    ks: Iterable[int] = DEFAULT_KS,
    eta_grid: Sequence[float] | None = None,
    metric: str = "euclidean",
    normalize: bool = True,
) -> EvalReport:
    """Embed queries and index with ``params`` and run both protocols.

    Only labeled index items are searched. Triplet ids may come from
    either set.
    """
    q = EmbeddedSet.from_dataset(params, queries, normalize, labeled_only=True)
    ix = EmbeddedSet.from_dataset(params, index, normalize, labeled_only=True)
    report = EvalReport(knn_topk(q, ix, ks, metric), metric)
    if triplets:
        lookup = {int(i): e for i, e in zip(ix.ids, ix.embeddings)}
        lookup.update({int(i): e for i, e in zip(q.ids, q.embeddings)})
        d_ap, d_an = triplet_distances(triplets, lookup, metric)
        report.triplet_accuracy = float(np.mean([triplet_accurate(a, n, HEADLINE_ETA) for a, n in zip(d_ap, d_an)]))
        report.recall_curve = recall_vs_margin(triplets, lookup, metric, eta_grid)
    return report
