"""Desk-scale alpha=1 vs alpha=0 comparison on synthetic clustered data."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field


from graphreg import losses
from graphreg.dataio import Dataset, generate_click_logs, generate_synthetic
from graphreg.evaluation import EmbeddedSet, knn_topk
from graphreg.graph import SimilarityGraph, build_graph
from graphreg.model import ModelConfig, ModelParams, forward
from graphreg.numerics import make_rng
from graphreg.trainer import TrainConfig, train

DATA_STREAM = 10
CLICK_STREAM = 11


@dataclass(frozen=True)
class SyntheticSetup:
    num_classes: int = 50
    dim: int = 128
    per_class: int = 120
    unlabeled_fraction: float = 1000 / 6000
    query_per_class: int = 10
    noise_sigma: float = 0.3
    multilabel_rate: float = 0.05
    intra_rate: float = 0.8
    noise_rate: float = 0.1
    fanout: int = 3
    threshold: float = 0.1
    hidden_dims: tuple[int, ...] = (128,)
    embedding_dim: int = 64


def build_setup(setup: SyntheticSetup, seed: int) -> tuple[Dataset, Dataset, SimilarityGraph]:
    data = generate_synthetic(
        make_rng(seed, DATA_STREAM),
        setup.num_classes,
        setup.per_class,
        setup.dim,
        setup.noise_sigma,
        setup.unlabeled_fraction,
        setup.multilabel_rate,
        setup.query_per_class,
    )
    train_ds, query_ds = data.split("train"), data.split("query")
    logs = generate_click_logs(train_ds, make_rng(seed, CLICK_STREAM), setup.intra_rate, setup.noise_rate, setup.fanout)
    graph = build_graph(logs, setup.threshold, [ex.id for ex in train_ds.labeled])
    return train_ds, query_ds, graph


def mean_edge_distance(params: ModelParams, ds: Dataset, graph: SimilarityGraph, metric: str = "cosine") -> float:
    """Unweighted mean embedding distance over all graph edges."""
    pairs = sorted(graph.edges)
    if not pairs:
        return 0.0
    u = forward(params, ds.features([a for a, _ in pairs])).embeddings
    v = forward(params, ds.features([b for _, b in pairs])).embeddings
    return float(losses.distance_rows(u, v, metric).mean())


@dataclass
class RunOutcome:
    alpha: float
    edge_distance: float
    top_k: dict[int, float]


@dataclass
class SeedOutcome:
    seed: int
    edges: int
    runs: dict[float, RunOutcome] = field(default_factory=dict)


def run_seed(
    seed: int,
    setup: SyntheticSetup = SyntheticSetup(),
    cfg: TrainConfig | None = None,
    alphas: tuple[float, ...] = (1.0, 0.0),
    ks=(1, 5),
) -> SeedOutcome:
    """Train once per alpha with the same seed; report edge distance and held-out kNN."""
    cfg = cfg or TrainConfig(max_steps=5000, decay_every=1000, sampled_vocab=20)
    cfg = dataclasses.replace(cfg, seed=seed)
    train_ds, query_ds, graph = build_setup(setup, seed)
    model_cfg = ModelConfig(train_ds.dim, train_ds.num_classes, setup.hidden_dims, setup.embedding_dim)
    out = SeedOutcome(seed, graph.num_edges)
    for alpha in alphas:
        result = train(train_ds, graph, dataclasses.replace(cfg, alpha=alpha), model_cfg)
        q = EmbeddedSet.from_dataset(result.params, query_ds, labeled_only=True)
        ix = EmbeddedSet.from_dataset(result.params, train_ds, labeled_only=True)
        out.runs[alpha] = RunOutcome(
            alpha,
            mean_edge_distance(result.params, train_ds, graph, cfg.metric),
            knn_topk(q, ix, ks, "euclidean"),
        )
    return out
