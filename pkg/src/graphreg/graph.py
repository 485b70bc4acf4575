"""Similarity graph construction from click logs and neighbor sampling.

Each log record describes one image pair under one of two signals. A
record becomes an edge when its rate beats the threshold and its source
image is labeled. Edges are undirected for neighbor queries but remember
which endpoint was the (labeled) source.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Mapping

import numpy as np

from graphreg.errors import DegenerateInputError, InvalidArgumentError, ParseError, SchemaError

log = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.1
HIST_BINS = np.round(np.linspace(0.0, 1.0, 11), 10)


class RecordKind(str, Enum):
    CO_CLICK = "co_click"
    SIMILAR_IMAGE_CLICK = "similar_image_click"


@dataclass(frozen=True)
class ClickLogRecord:
    kind: RecordKind
    image_u: int
    image_v: int
    joint_count: int
    count_u: int
    count_v: int

    def check(self) -> None:
        if self.image_u == self.image_v:
            raise InvalidArgumentError(f"record links image {self.image_u} to itself")
        if min(self.joint_count, self.count_u, self.count_v) < 0:
            raise InvalidArgumentError("record counts must be nonnegative")
        if self.joint_count > min(self.count_u, self.count_v):
            raise InvalidArgumentError("joint count exceeds a marginal count")

    def to_line(self) -> str:
        kind = RecordKind(self.kind).value
        return f"{kind}\t{self.image_u}\t{self.image_v}\t{self.joint_count}\t{self.count_u}\t{self.count_v}"


def co_click_rate(rec: ClickLogRecord) -> float:
    """Jaccard rate of selection events: joint / (count_u + count_v - joint)."""
    rec.check()
    denom = rec.count_u + rec.count_v - rec.joint_count
    if rec.count_u + rec.count_v == 0 or denom == 0:
        raise DegenerateInputError("co-click rate undefined: neither image was ever selected")
    return rec.joint_count / denom


def similar_image_click_rate(rec: ClickLogRecord) -> float:
    """Fraction of impressions of u under query image v that were clicked.

    ``count_v`` holds the impression count, ``joint_count`` the clicks.
    """
    rec.check()
    if rec.count_v == 0:
        raise DegenerateInputError("similar-image click rate undefined: zero impressions")
    return rec.joint_count / rec.count_v


RATE_FUNCTIONS: dict[RecordKind, Callable[[ClickLogRecord], float]] = {
    RecordKind.CO_CLICK: co_click_rate,
    RecordKind.SIMILAR_IMAGE_CLICK: similar_image_click_rate,
}


@dataclass(frozen=True)
class Edge:
    u: int
    v: int
    weight: float


@dataclass
class SimilarityGraph:
    """Weighted undirected graph; ``edges`` maps (source, target) to weight."""

    edges: dict[tuple[int, int], float]
    labeled: frozenset[int]
    vertices: tuple[int, ...] = ()
    skipped_records: int = 0
    _adjacency: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.labeled = frozenset(int(i) for i in self.labeled)
        seen: set[frozenset[int]] = set()
        nbrs: dict[int, list[tuple[int, float]]] = {}
        for (u, v), w in self.edges.items():
            if u == v:
                raise SchemaError(f"self-loop on vertex {u}")
            if not 0.0 < w <= 1.0:
                raise SchemaError(f"edge ({u}, {v}) weight {w!r} outside (0, 1]")
            if u not in self.labeled:
                raise SchemaError(f"edge ({u}, {v}) has an unlabeled source vertex")
            key = frozenset((u, v))
            if key in seen:
                raise SchemaError(f"duplicate edge between {u} and {v}")
            seen.add(key)
            nbrs.setdefault(u, []).append((v, w))
            nbrs.setdefault(v, []).append((u, w))
        self.vertices = tuple(sorted(set(self.labeled) | set(nbrs)))
        self._adjacency = {}
        for vid, lst in nbrs.items():
            lst.sort()
            ids = np.array([n for n, _ in lst], dtype=np.int64)
            ws = np.array([w for _, w in lst], dtype=np.float64)
            self._adjacency[vid] = (ids, ws)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def __contains__(self, vid: int) -> bool:
        return vid in self.labeled or vid in self._adjacency

    def is_labeled(self, vid: int) -> bool:
        return vid in self.labeled

    def neighbors(self, vid: int) -> tuple[np.ndarray, np.ndarray]:
        if vid not in self:
            raise InvalidArgumentError(f"unknown vertex {vid}")
        empty = (np.empty(0, dtype=np.int64), np.empty(0, dtype=np.float64))
        return self._adjacency.get(vid, empty)

    def edge_list(self) -> list[Edge]:
        return [Edge(u, v, w) for (u, v), w in sorted(self.edges.items())]

    def weight(self, u: int, v: int) -> float | None:
        w = self.edges.get((u, v))
        return self.edges.get((v, u)) if w is None else w


def build_graph(
    records: Iterable[ClickLogRecord],
    threshold: float = DEFAULT_THRESHOLD,
    labeled_ids: Iterable[int] = (),
    rate_functions: Mapping[RecordKind, Callable[[ClickLogRecord], float]] | None = None,
) -> SimilarityGraph:
    """Threshold and merge click-log records into one similarity graph.

    An edge exists iff rate > threshold and the record's source is labeled.
    When a pair shows up more than once (either direction, either kind) the
    largest rate wins. Records are sorted by (u, v, kind) first, so the
    result does not depend on input order.
    """
    if not 0.0 < threshold < 1.0:
        raise InvalidArgumentError(f"threshold must lie in (0, 1), got {threshold}")
    rate_functions = dict(RATE_FUNCTIONS if rate_functions is None else rate_functions)
    labeled = frozenset(int(i) for i in labeled_ids)
    ordered = sorted(records, key=lambda r: (r.image_u, r.image_v, RecordKind(r.kind).value))
    best: dict[tuple[int, int], tuple[float, tuple[int, int]]] = {}
    skipped = 0
    for rec in ordered:
        try:
            rate = rate_functions[RecordKind(rec.kind)](rec)
        except (InvalidArgumentError, DegenerateInputError, KeyError, ValueError) as exc:
            skipped += 1
            log.warning("skipping click-log record %s: %s", rec, exc)
            continue
        if not rate > threshold or rec.image_u not in labeled:
            continue
        key = (min(rec.image_u, rec.image_v), max(rec.image_u, rec.image_v))
        if key not in best or rate > best[key][0]:
            best[key] = (rate, (rec.image_u, rec.image_v))
    if skipped:
        log.warning("skipped %d malformed click-log record(s)", skipped)
    edges = {orient: rate for rate, orient in best.values()}
    return SimilarityGraph(edges=edges, labeled=labeled, skipped_records=skipped)


def sample_neighbor(g: SimilarityGraph, u: int, rng: np.random.Generator) -> tuple[int, float] | None:
    """One neighbor of ``u`` drawn with probability proportional to edge weight."""
    ids, ws = g.neighbors(u)
    if ids.size == 0:
        return None
    if ids.size == 1:
        return int(ids[0]), float(ws[0])
    cum = np.cumsum(ws)
    i = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
    i = min(i, ids.size - 1)
    return int(ids[i]), float(ws[i])


@dataclass(frozen=True)
class GraphStats:
    vertex_count: int
    edge_count: int
    histogram: tuple[int, ...]
    bin_edges: tuple[float, ...]
    labeled_to_labeled: int
    labeled_to_unlabeled: int

    def format(self) -> str:
        lines = [
            f"vertices\t{self.vertex_count}",
            f"edges\t{self.edge_count}",
            f"labeled-labeled edges\t{self.labeled_to_labeled}",
            f"labeled-unlabeled edges\t{self.labeled_to_unlabeled}",
        ]
        for lo, hi, c in zip(self.bin_edges[:-1], self.bin_edges[1:], self.histogram):
            lines.append(f"weight ({lo:.1f}, {hi:.1f}]\t{c}")
        return "\n".join(lines)


def graph_stats(g: SimilarityGraph) -> GraphStats:
    """Counts plus a weight histogram with right-closed 0.1-wide bins."""
    weights = np.array(list(g.edges.values()), dtype=np.float64)
    hist = np.zeros(len(HIST_BINS) - 1, dtype=np.int64)
    if weights.size:
        idx = np.clip(np.ceil(weights * 10.0 - 1e-9).astype(np.int64) - 1, 0, len(hist) - 1)
        np.add.at(hist, idx, 1)
    ll = sum(1 for (_, v) in g.edges if v in g.labeled)
    return GraphStats(
        vertex_count=len(g.vertices),
        edge_count=g.num_edges,
        histogram=tuple(int(c) for c in hist),
        bin_edges=tuple(float(b) for b in HIST_BINS),
        labeled_to_labeled=ll,
        labeled_to_unlabeled=g.num_edges - ll,
    )


# file formats


def parse_click_line(line: str) -> ClickLogRecord:
    parts = line.rstrip("\n").split("\t")
    if len(parts) != 6:
        raise ValueError(f"expected 6 tab-separated fields, got {len(parts)}")
    kind = RecordKind(parts[0])
    u, v, joint, cu, cv = (int(p) for p in parts[1:])
    return ClickLogRecord(kind, u, v, joint, cu, cv)


def read_click_log(path) -> tuple[list[ClickLogRecord], int]:
    """Parse a click-log file; returns records and the number of unparseable lines."""
    records, bad = [], 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip() or line.startswith("#"):
                continue
            try:
                records.append(parse_click_line(line))
            except ValueError as exc:
                bad += 1
                log.warning("%s:%d: skipping malformed record: %s", path, lineno, exc)
    return records, bad


def write_click_log(path, records: Iterable[ClickLogRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# kind\tu\tv\tjoint_count\tcount_u\tcount_v\n")
        for rec in records:
            fh.write(rec.to_line() + "\n")


def save_edges(path, g: SimilarityGraph) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# u\tv\tweight\n")
        for e in g.edge_list():
            fh.write(f"{e.u}\t{e.v}\t{e.weight:.17g}\n")


def load_edges(path, labeled_ids: Iterable[int] | None = None) -> SimilarityGraph:
    """Load an edge file. Without ``labeled_ids`` every source is taken as labeled."""
    edges: dict[tuple[int, int], float] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.rstrip("\n").split("\t")
            try:
                if len(parts) != 3:
                    raise ValueError(f"expected 3 fields, got {len(parts)}")
                u, v, w = int(parts[0]), int(parts[1]), float(parts[2])
                if not math.isfinite(w):
                    raise ValueError("non-finite weight")
            except ValueError as exc:
                raise ParseError(str(exc), path, lineno) from exc
            edges[(u, v)] = w
    labeled = frozenset(u for u, _ in edges) if labeled_ids is None else frozenset(labeled_ids)
    return SimilarityGraph(edges=edges, labeled=labeled)
