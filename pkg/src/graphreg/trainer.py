"""Training loop for the graph-regularized objective.

Per step: draw a batch of labeled examples, pair each with a neighbor from
the similarity graph, compute the summed sampled-softmax cross-entropy with
smoothed targets plus ``alpha`` times the summed weighted neighbor
distance, and take one momentum step.

Every random draw of step ``t`` comes from a generator keyed on
``(seed, t)``, and the neighbor draws use a child stream of their own.
Runs are therefore reproducible, resumable from any checkpoint, and a run
with ``alpha=0`` follows exactly the same trajectory as one without a graph.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Protocol, Sequence

import numpy as np
import scipy.sparse as sp

from graphreg import losses
from graphreg.dataio import Dataset
from graphreg.errors import InvalidArgumentError, SchemaError, TrainingDivergedError
from graphreg.graph import SimilarityGraph, sample_neighbor
from graphreg.losses import LabelDistribution, LossBreakdown
from graphreg.model import (
    ModelConfig,
    ModelParams,
    backward_batch,
    forward,
    init_params,
    logits_batch,
    parse_checkpoint,
    save_checkpoint,
)
from graphreg.numerics import DTYPE, make_rng, sample_without_replacement

log = logging.getLogger(__name__)

# stream keys under the run seed
INIT_STREAM = 0
STEP_STREAM = 1

NEIGHBOR_MODES = ("sample", "all")

Observer = Callable[[str, np.ndarray], None]


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 1.0
    epsilon: float = 0.1
    batch_size: int = 24
    sampled_vocab: int | None = None
    lr0: float = 0.001
    decay_rate: float = 0.9
    decay_every: int = 100_000
    momentum: float = 0.9
    weight_decay: float = 0.00004
    metric: str = "cosine"
    max_steps: int = 1000
    seed: int = 0
    checkpoint_every: int = 0
    phase_schedule: tuple[tuple[int, float], ...] = ()
    neighbor_mode: str = "sample"

    def __post_init__(self):
        object.__setattr__(
            self, "phase_schedule", tuple((int(s), float(a)) for s, a in self.phase_schedule)
        )
        if self.alpha < 0 or any(a < 0 for _, a in self.phase_schedule):
            raise InvalidArgumentError("alpha must be nonnegative")
        if not 0.0 <= self.epsilon <= 1.0:
            raise InvalidArgumentError("epsilon must lie in [0, 1]")
        if self.batch_size < 1:
            raise InvalidArgumentError("batch_size must be positive")
        if self.sampled_vocab is not None and self.sampled_vocab < 1:
            raise InvalidArgumentError("sampled_vocab must be positive")
        if self.lr0 <= 0 or not 0 < self.decay_rate <= 1 or self.decay_every < 1:
            raise InvalidArgumentError("learning-rate schedule out of range")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise InvalidArgumentError("momentum must lie in [0, 1) and weight_decay be nonnegative")
        if self.max_steps < 0 or self.checkpoint_every < 0 or self.seed < 0:
            raise InvalidArgumentError("max_steps, checkpoint_every and seed must be nonnegative")
        losses.check_metric(self.metric)
        if self.neighbor_mode not in NEIGHBOR_MODES:
            raise InvalidArgumentError(f"neighbor_mode must be one of {NEIGHBOR_MODES}")
        ends = [s for s, _ in self.phase_schedule]
        if ends != sorted(ends) or len(set(ends)) != len(ends):
            raise InvalidArgumentError("phase schedule end steps must be strictly increasing")

    def alpha_at(self, step: int) -> float:
        for end, a in self.phase_schedule:
            if step < end:
                return a
        return self.alpha


def parse_phase_schedule(text: str) -> tuple[tuple[int, float], ...]:
    """Parse ``"1000:0,+500:1"`` into ((1000, 0.0), (1500, 1.0)).

    Each segment is ``<end>:<alpha>``; a leading ``+`` makes the end
    relative to the previous segment's end. After the last segment the
    configured alpha applies.
    """
    out: list[tuple[int, float]] = []
    prev = 0
    for seg in filter(None, (s.strip() for s in text.split(","))):
        try:
            end_s, alpha_s = seg.split(":")
            end = prev + int(end_s[1:]) if end_s.startswith("+") else int(end_s)
            alpha = float(alpha_s)
        except ValueError as exc:
            raise InvalidArgumentError(f"bad phase segment {seg!r}") from exc
        if end <= prev and out:
            raise InvalidArgumentError("phase schedule end steps must be strictly increasing")
        out.append((end, alpha))
        prev = end
    return tuple(out)


def format_phase_schedule(schedule: Sequence[tuple[int, float]]) -> str:
    return ",".join(f"{end}:{alpha!r}" for end, alpha in schedule)


def learning_rate(cfg: TrainConfig, step: int) -> float:
    """Staircase exponential decay: lr0 * decay_rate ** (step // decay_every)."""
    if step < 0:
        raise InvalidArgumentError("step must be nonnegative")
    return cfg.lr0 * cfg.decay_rate ** (step // cfg.decay_every)


@dataclass
class OptimizerState:
    velocity: ModelParams
    step: int = 0

    @classmethod
    def zeros(cls, params: ModelParams) -> "OptimizerState":
        return cls(ModelParams.zeros_like(params), 0)


def momentum_step(
    params: ModelParams,
    grads: ModelParams,
    state: OptimizerState,
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 0.0,
) -> tuple[ModelParams, OptimizerState]:
    """v <- momentum*v + (g + weight_decay*theta); theta <- theta - lr*v."""
    if not grads.is_finite():
        raise TrainingDivergedError(f"non-finite gradient at step {state.step}")
    new_p, new_v = [], []
    for theta, g, v in zip(params.arrays(), grads.arrays(), state.velocity.arrays()):
        v2 = momentum * v + (g + weight_decay * theta)
        new_v.append(v2)
        new_p.append(theta - lr * v2)
    cfg = params.config
    return ModelParams.from_arrays(cfg, new_p), OptimizerState(ModelParams.from_arrays(cfg, new_v), state.step + 1)


class LabelSampler(Protocol):
    def sample(self, rng: np.random.Generator, num_classes: int, size: int, required: Iterable[int]) -> np.ndarray: ...


class UniformLabelSampler:
    """Ground-truth labels plus uniformly drawn distinct negatives, sorted."""

    def sample(self, rng, num_classes, size, required):
        req = np.array(sorted(set(int(k) for k in required)), dtype=np.int64)
        if size < req.size:
            raise InvalidArgumentError(f"sampled vocabulary {size} smaller than {req.size} ground-truth labels")
        if size > num_classes:
            raise InvalidArgumentError(f"sampled vocabulary {size} exceeds {num_classes} classes")
        if size == num_classes:
            return np.arange(num_classes, dtype=np.int64)
        mask = np.ones(num_classes, dtype=bool)
        mask[req] = False
        rest = np.flatnonzero(mask)
        picked = rest[sample_without_replacement(rng, rest.size, size - req.size)]
        return np.sort(np.concatenate([req, picked]))


@dataclass
class Batch:
    example_ids: np.ndarray
    x: np.ndarray
    labels: list[frozenset[int]]
    label_idx: np.ndarray
    # neighbor pairs: row of the batch example, neighbor id, features, edge weight
    pair_rows: np.ndarray
    neighbor_ids: np.ndarray
    neighbor_x: np.ndarray
    neighbor_w: np.ndarray

    @property
    def has_pairs(self) -> bool:
        return self.pair_rows.size > 0


def make_batch(
    dataset: Dataset,
    graph: SimilarityGraph | None,
    rng: np.random.Generator,
    batch_size: int,
    sampled_vocab: int | None = None,
    neighbor_mode: str = "sample",
    sampler: LabelSampler | None = None,
    labeled: Sequence | None = None,
) -> Batch:
    """Labeled examples, their label subsets, and their graph neighbors.

    Examples are drawn uniformly without replacement within the batch.
    Label subsets and neighbors come from two child streams of ``rng`` so
    that the presence of a graph never changes which examples or labels
    are drawn.
    """
    sampler = sampler or UniformLabelSampler()
    pool = dataset.labeled if labeled is None else labeled
    if not pool:
        raise InvalidArgumentError("dataset has no labeled examples")
    k = dataset.num_classes
    vocab = k if sampled_vocab is None else sampled_vocab
    if vocab > k:
        raise InvalidArgumentError(f"sampled_vocab={vocab} exceeds num_classes={k}")

    pick = rng.choice(len(pool), size=batch_size, replace=batch_size > len(pool))
    label_rng, neighbor_rng = rng.spawn(2)
    chosen = [pool[int(i)] for i in pick]
    widest = max(len(ex.labels) for ex in chosen)
    if vocab < widest:
        raise InvalidArgumentError(f"sampled_vocab={vocab} below the largest ground-truth set ({widest})")
    label_idx = np.stack([sampler.sample(label_rng, k, vocab, ex.labels) for ex in chosen])

    rows, nids, ws = [], [], []
    if graph is not None:
        for r, ex in enumerate(chosen):
            if ex.id not in graph:
                continue
            if neighbor_mode == "all":
                ids, wts = graph.neighbors(ex.id)
                rows += [r] * ids.size
                nids += ids.tolist()
                ws += wts.tolist()
            else:
                hit = sample_neighbor(graph, ex.id, neighbor_rng)
                if hit is not None:
                    rows.append(r)
                    nids.append(hit[0])
                    ws.append(hit[1])
    try:
        nx = dataset.features(nids) if nids else np.empty((0, dataset.dim), dtype=DTYPE)
    except KeyError as exc:
        raise InvalidArgumentError(f"graph neighbor {exc.args[0]} is not in the dataset") from None
    return Batch(
        example_ids=np.array([ex.id for ex in chosen], dtype=np.int64),
        x=np.stack([ex.features for ex in chosen]),
        labels=[ex.labels for ex in chosen],
        label_idx=label_idx,
        pair_rows=np.array(rows, dtype=np.int64),
        neighbor_ids=np.array(nids, dtype=np.int64),
        neighbor_x=nx,
        neighbor_w=np.array(ws, dtype=DTYPE),
    )


def objective_and_grad(
    params: ModelParams,
    batch: Batch,
    alpha: float,
    epsilon: float,
    metric: str,
    observer: Observer | None = None,
) -> tuple[LossBreakdown, ModelParams]:
    """Loss breakdown and parameter gradient of supervised + alpha * graph on one batch."""
    trace = forward(params, batch.x)
    emb = trace.embeddings
    z = logits_batch(params, emb, batch.label_idx)
    log_p = losses.log_softmax_rows(z)
    p = np.exp(log_p)
    q = losses.ground_truth_rows(batch.label_idx, batch.labels)
    q_s = losses.smooth_rows(q, epsilon)
    if observer is not None:
        observer("sampled_softmax", p)
        observer("ground_truth", q)
        observer("smoothed", q_s)
    supervised = float(-(q_s * log_p).sum())
    d_z = p - q_s

    graph_value = 0.0
    d_emb = np.zeros_like(emb)
    nb_grad = None
    if batch.has_pairs:
        nb_trace = forward(params, batch.neighbor_x)
        u = emb[batch.pair_rows]
        v = nb_trace.embeddings
        graph_value = float((batch.neighbor_w * losses.distance_rows(u, v, metric)).sum())
        gu, gv = losses.distance_grad_rows(u, v, metric)
        scale = (alpha * batch.neighbor_w)[:, None]
        np.add.at(d_emb, batch.pair_rows, scale * gu)
        nb_grad = backward_batch(params, nb_trace, scale * gv)

    grads = backward_batch(params, trace, d_emb, (batch.label_idx, d_z))
    if nb_grad is not None:
        grads = grads + nb_grad
    return losses.total_objective(supervised, graph_value, alpha), grads


@dataclass(frozen=True)
class TrainRecord:
    step: int
    lr: float
    loss: LossBreakdown
    seconds: float

    def to_line(self, timing: bool = True) -> str:
        secs = f"{self.seconds:.6f}" if timing else "0"
        l = self.loss
        return f"{self.step}\t{self.lr!r}\t{l.supervised!r}\t{l.graph!r}\t{l.total!r}\t{secs}"


LOG_HEADER = "step\tlr\tsupervised\tgraph\ttotal\tseconds"


def write_train_log(path, records: Iterable[TrainRecord], timing: bool = True) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# " + LOG_HEADER + "\n")
        for rec in records:
            fh.write(rec.to_line(timing) + "\n")


def read_train_log(path) -> list[dict[str, float]]:
    rows = []
    keys = LOG_HEADER.split("\t")
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("#") or not line.strip():
                continue
            vals = line.rstrip("\n").split("\t")
            rows.append({k: (int(v) if k == "step" else float(v)) for k, v in zip(keys, vals)})
    return rows


def train_step(
    params: ModelParams,
    state: OptimizerState,
    batch: Batch,
    cfg: TrainConfig,
    alpha: float | None = None,
    observer: Observer | None = None,
) -> tuple[ModelParams, OptimizerState, TrainRecord]:
    t0 = time.perf_counter()
    alpha = cfg.alpha_at(state.step) if alpha is None else alpha
    lr = learning_rate(cfg, state.step)
    # overflow is reported below as divergence, not as numpy warnings
    with np.errstate(over="ignore", invalid="ignore"):
        breakdown, grads = objective_and_grad(params, batch, alpha, cfg.epsilon, cfg.metric, observer)
    if not math.isfinite(breakdown.total):
        raise TrainingDivergedError(
            f"non-finite loss at step {state.step}: supervised={breakdown.supervised} graph={breakdown.graph}"
        )
    step = state.step
    params, state = momentum_step(params, grads, state, lr, cfg.momentum, cfg.weight_decay)
    return params, state, TrainRecord(step, lr, breakdown, time.perf_counter() - t0)


def config_hash(*parts: Mapping) -> str:
    blob = json.dumps(list(parts), sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def run_config(cfg: TrainConfig, model_cfg: ModelConfig) -> dict:
    return {"train": dataclasses.asdict(cfg), "model": dataclasses.asdict(model_cfg)}


@dataclass
class TrainResult:
    params: ModelParams
    records: list[TrainRecord]
    state: OptimizerState
    initial_params: ModelParams = field(repr=False, default=None)


def write_checkpoint(
    out_dir,
    params: ModelParams,
    state: OptimizerState,
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    ckpt_name: str | None = None,
    opt_name: str | None = None,
    extra: Mapping | None = None,
) -> dict:
    """Write params, optimizer velocity and a resumable ``manifest.json``."""
    out_dir = Path(out_dir)
    step = state.step
    ckpt = ckpt_name or f"ckpt-{step:08d}.bin"
    opt = opt_name or f"opt-{step:08d}.bin"
    save_checkpoint(out_dir / ckpt, params, kind="params", step=step)
    save_checkpoint(out_dir / opt, state.velocity, kind="velocity", step=step)
    manifest = {
        "config": run_config(cfg, model_cfg),
        "config_hash": config_hash(run_config(cfg, model_cfg)),
        "step": step,
        "checkpoint": ckpt,
        "optimizer": opt,
        **(extra or {}),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


def _resume_key(config: Mapping) -> str:
    # max_steps and checkpoint cadence may change on resume; nothing else may
    train_part = {**config["train"], "max_steps": 0, "checkpoint_every": 0}
    train_part["phase_schedule"] = [list(seg) for seg in train_part["phase_schedule"]]
    return config_hash({"train": train_part, "model": config["model"]})


def load_resume_point(manifest_path, cfg: TrainConfig, model_cfg: ModelConfig) -> tuple[ModelParams, OptimizerState]:
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    if _resume_key(manifest["config"]) != _resume_key(run_config(cfg, model_cfg)):
        raise SchemaError("resume manifest was written under a different configuration")
    base = manifest_path.parent
    params, _ = parse_checkpoint((base / manifest["checkpoint"]).read_bytes())
    velocity, header = parse_checkpoint((base / manifest["optimizer"]).read_bytes())
    return params, OptimizerState(velocity, int(header["step"]))


def train(
    dataset: Dataset,
    graph: SimilarityGraph | None,
    cfg: TrainConfig,
    model_cfg: ModelConfig | None = None,
    params: ModelParams | None = None,
    state: OptimizerState | None = None,
    observer: Observer | None = None,
    checkpoint_dir=None,
    sampler: LabelSampler | None = None,
) -> TrainResult:
    """Run ``cfg.max_steps`` optimizer steps (counted from ``state.step`` when resuming)."""
    if params is None:
        if model_cfg is None:
            raise InvalidArgumentError("need either model_cfg or initial params")
        params = init_params(model_cfg, make_rng(cfg.seed, INIT_STREAM))
    model_cfg = params.config
    if model_cfg.input_dim != dataset.dim:
        raise InvalidArgumentError(f"model input_dim {model_cfg.input_dim} != dataset dim {dataset.dim}")
    if model_cfg.num_classes != dataset.num_classes:
        raise InvalidArgumentError("model and dataset disagree on the number of classes")
    if graph is not None:
        missing = [v for v in graph.vertices if v not in dataset and graph.neighbors(v)[0].size]
        if missing:
            raise InvalidArgumentError(f"{len(missing)} graph vertices are missing from the dataset, e.g. {missing[0]}")
    state = state or OptimizerState.zeros(params)
    initial = params
    pool = dataset.labeled
    widest = max((len(ex.labels) for ex in pool), default=0)
    if cfg.sampled_vocab is not None and cfg.sampled_vocab < widest:
        raise InvalidArgumentError(f"sampled_vocab={cfg.sampled_vocab} below the largest ground-truth set ({widest})")
    out_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    records: list[TrainRecord] = []
    start = time.perf_counter()
    while state.step < cfg.max_steps:
        rng = make_rng(cfg.seed, STEP_STREAM, state.step)
        batch = make_batch(dataset, graph, rng, cfg.batch_size, cfg.sampled_vocab, cfg.neighbor_mode, sampler, pool)
        params, state, rec = train_step(params, state, batch, cfg, observer=observer)
        records.append(dataclasses.replace(rec, seconds=time.perf_counter() - start))
        if out_dir is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            write_checkpoint(out_dir, params, state, cfg, model_cfg)
    return TrainResult(params, records, state, initial)


# label propagation


@dataclass
class PropagationResult:
    vertex_ids: list[int]
    distributions: np.ndarray
    iterations: int
    last_change: float

    def as_dict(self) -> dict[int, LabelDistribution]:
        out = {}
        for vid, row in zip(self.vertex_ids, self.distributions):
            out[vid] = LabelDistribution({k: float(v) for k, v in enumerate(row)})
        return out


def propagate(
    graph: SimilarityGraph,
    labeled: Mapping[int, LabelDistribution],
    iterations: int,
    clamp: bool = True,
    num_classes: int | None = None,
    tol: float | None = None,
) -> PropagationResult:
    """Synchronous weighted-average label propagation over the undirected graph.

    Unlabeled vertices start uniform. Each iteration replaces every
    non-clamped vertex that has neighbors by the weight-normalized mean of
    its neighbors' distributions from the previous iteration, then
    renormalizes. With ``clamp`` labeled vertices are reset to their given
    distributions; without it they are averaged like the rest. Stops early
    once the max absolute change drops below ``tol``.
    """
    if not labeled:
        raise InvalidArgumentError("label propagation needs at least one labeled vertex")
    if iterations < 0:
        raise InvalidArgumentError("iterations must be nonnegative")
    k = num_classes or 1 + max(c for d in labeled.values() for c in d.support)
    ids = sorted(set(graph.vertices) | set(labeled))
    index = {v: i for i, v in enumerate(ids)}
    n = len(ids)

    rows, cols, vals = [], [], []
    for (u, v), w in graph.edges.items():
        rows += [index[u], index[v]]
        cols += [index[v], index[u]]
        vals += [w, w]
    adj = sp.csr_matrix((vals, (rows, cols)), shape=(n, n), dtype=DTYPE)
    degree = np.asarray(adj.sum(axis=1)).ravel()
    has_nbrs = degree > 0

    truth = np.zeros((n, k), dtype=DTYPE)
    is_labeled = np.zeros(n, dtype=bool)
    for vid, dist in labeled.items():
        if max(dist.support) >= k:
            raise InvalidArgumentError(f"vertex {vid}: class id outside [0, {k})")
        truth[index[vid]] = dist.as_array(range(k))
        is_labeled[index[vid]] = True

    current = np.full((n, k), 1.0 / k, dtype=DTYPE)
    current[is_labeled] = truth[is_labeled]
    update = has_nbrs & ~is_labeled if clamp else has_nbrs

    change = math.inf
    done = 0
    for done in range(1, iterations + 1):
        nxt = current.copy()
        avg = adj @ current
        nxt[update] = avg[update] / degree[update, None]
        nxt /= nxt.sum(axis=1, keepdims=True)
        change = float(np.abs(nxt - current).max())
        current = nxt
        if tol is not None and change < tol:
            break
    return PropagationResult(ids, current, done, change)


def label_propagation(
    graph: SimilarityGraph,
    labeled: Mapping[int, LabelDistribution],
    iterations: int,
    clamp: bool = True,
    num_classes: int | None = None,
    tol: float | None = None,
) -> dict[int, LabelDistribution]:
    return propagate(graph, labeled, iterations, clamp, num_classes, tol).as_dict()
