"""Finite-difference verification of the training gradient.

The analytic side is :func:`graphreg.trainer.objective_and_grad`, the
vectorized path training actually uses. The numeric side differentiates an
objective assembled example by example from the mapping-based functions in
:mod:`graphreg.losses` (sampled softmax, smoothing, cross-entropy, graph
regularizer), so the two sides share only the forward pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from graphreg import losses
from graphreg.model import ModelConfig, ModelParams, forward, init_params, logits
from graphreg.numerics import make_rng
from graphreg.trainer import Batch, UniformLabelSampler, objective_and_grad

DEFAULT_STEP = 1e-5
DEFAULT_TOL = 1e-5
# finite differences are meaningless across a ReLU-6 kink; base points with
# a pre-activation this close to 0 or 6 are redrawn
KINK_MARGIN = 1e-3
GRAD_FLOOR = 1e-8


def reference_objective(params: ModelParams, batch: Batch, alpha: float, epsilon: float, metric: str) -> float:
    embs = forward(params, batch.x).embeddings
    supervised = []
    for i, labels in enumerate(batch.labels):
        subset = [int(k) for k in batch.label_idx[i]]
        p = losses.sampled_softmax(logits(params, embs[i], subset), subset)
        q = losses.smooth(losses.ground_truth_distribution(labels, subset), epsilon)
        supervised.append(losses.cross_entropy(p, q))
    graph = 0.0
    if batch.has_pairs:
        nb = forward(params, batch.neighbor_x).embeddings
        pairs = [(embs[r], nb[j], w) for j, (r, w) in enumerate(zip(batch.pair_rows, batch.neighbor_w))]
        graph = losses.graph_regularizer(pairs, metric)
    return losses.total_objective(math.fsum(supervised), graph, alpha).total


def numeric_gradient(params: ModelParams, batch: Batch, alpha, epsilon, metric, step=DEFAULT_STEP) -> ModelParams:
    grad = ModelParams.zeros_like(params)
    work = params.copy()
    for arr, g in zip(work.arrays(), grad.arrays()):
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = reference_objective(work, batch, alpha, epsilon, metric)
            flat[i] = orig - step
            down = reference_objective(work, batch, alpha, epsilon, metric)
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * step)
    return grad


def block_errors(analytic: ModelParams, numeric: ModelParams) -> list[float]:
    """Per parameter block: max |a - n| / max(max |a|, max |n|, floor)."""
    out = []
    for a, n in zip(analytic.arrays(), numeric.arrays()):
        scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), GRAD_FLOOR)
        out.append(float(np.abs(a - n).max(initial=0.0) / scale))
    return out


def _near_kink(params: ModelParams, batch: Batch) -> bool:
    pre = forward(params, batch.x).preacts
    if batch.has_pairs:
        pre = pre + forward(params, batch.neighbor_x).preacts
    return any(np.any(np.abs(z) < KINK_MARGIN) or np.any(np.abs(z - 6.0) < KINK_MARGIN) for z in pre)


def random_case(rng: np.random.Generator, with_graph: bool, batch_size: int = 6):
    """A random small net (input <= 8, <= 2 hidden layers of <= 8, K <= 16) and batch."""
    hidden = tuple(int(h) for h in rng.integers(2, 9, size=int(rng.integers(0, 3))))
    cfg = ModelConfig(
        input_dim=int(rng.integers(2, 9)),
        num_classes=int(rng.integers(2, 17)),
        hidden_dims=hidden,
        embedding_dim=int(rng.integers(2, 9)),
    )
    while True:
        params = init_params(cfg, rng)
        for b in params.biases + [params.head_b]:
            b[:] = rng.normal(0.0, 0.1, size=b.shape)
        k = cfg.num_classes
        labels = []
        for _ in range(batch_size):
            n = 2 if (k > 2 and rng.random() < 0.3) else 1
            labels.append(frozenset(int(c) for c in rng.choice(k, size=n, replace=False)))
        vocab = int(rng.integers(max(len(l) for l in labels), k + 1))
        sampler = UniformLabelSampler()
        label_idx = np.stack([sampler.sample(rng, k, vocab, l) for l in labels])
        x = rng.normal(size=(batch_size, cfg.input_dim))
        if with_graph:
            rows = np.sort(rng.choice(batch_size, size=int(rng.integers(1, batch_size + 1)), replace=False))
            nx = rng.normal(size=(rows.size, cfg.input_dim))
            w = rng.uniform(0.1, 1.0, size=rows.size)
        else:
            rows, nx, w = np.empty(0, dtype=np.int64), np.empty((0, cfg.input_dim)), np.empty(0)
        batch = Batch(
            example_ids=np.arange(batch_size),
            x=x,
            labels=labels,
            label_idx=label_idx,
            pair_rows=rows.astype(np.int64),
            neighbor_ids=np.arange(batch_size, batch_size + rows.size),
            neighbor_x=nx,
            neighbor_w=w,
        )
        if not _near_kink(params, batch):
            return params, batch


@dataclass
class CaseResult:
    net: int
    mode: str
    alpha: float
    max_error: float
    block_errors: list[float]


@dataclass
class GradcheckReport:
    tol: float
    cases: list[CaseResult] = field(default_factory=list)

    @property
    def max_error(self) -> float:
        return max((c.max_error for c in self.cases), default=0.0)

    @property
    def passed(self) -> bool:
        return bool(self.cases) and self.max_error <= self.tol

    def format(self) -> str:
        lines = [f"{'net':>4} {'mode':<18} {'alpha':>7} {'max rel err':>12}"]
        for c in self.cases:
            lines.append(f"{c.net:>4} {c.mode:<18} {c.alpha:>7.3f} {c.max_error:>12.3e}")
        verdict = "PASS" if self.passed else "FAIL"
        lines.append(f"{verdict}: max relative error {self.max_error:.3e} (tolerance {self.tol:g}) over {len(self.cases)} checks")
        return "\n".join(lines)


MODES = ("supervised", "graph-cosine", "graph-euclidean")


def run_gradcheck(
    nets: int = 20,
    seed: int = 0,
    modes=MODES,
    tol: float = DEFAULT_TOL,
    step: float = DEFAULT_STEP,
) -> GradcheckReport:
    """Check every mode on each of ``nets`` random nets.

    ``supervised`` uses alpha=0 and no neighbor pairs; the graph modes add
    pairs and a random alpha in (0, 2] under the named metric.
    """
    report = GradcheckReport(tol)
    for net in range(nets):
        for m, mode in enumerate(modes):
            rng = make_rng(seed, net, m)
            with_graph = mode != "supervised"
            params, batch = random_case(rng, with_graph)
            alpha = float(rng.uniform(0.1, 2.0)) if with_graph else 0.0
            metric = mode.split("-", 1)[1] if with_graph else "cosine"
            epsilon = float(rng.uniform(0.0, 0.3))
            _, analytic = objective_and_grad(params, batch, alpha, epsilon, metric)
            numeric = numeric_gradient(params, batch, alpha, epsilon, metric, step)
            errs = block_errors(analytic, numeric)
            report.cases.append(CaseResult(net, mode, alpha, max(errs), errs))
    return report
