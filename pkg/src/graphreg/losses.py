"""Objective-function math.

Two parallel surfaces live here. The mapping-based functions
(:func:`softmax`, :func:`smooth`, :func:`cross_entropy`, ...) work on one
example at a time with explicit class-id keys and validate everything;
they are the readable reference and the route the gradient checker uses to
evaluate the objective. The ``*_rows`` functions are the vectorized forms
the trainer runs, one row per batch element.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from graphreg.errors import DegenerateInputError, InvalidArgumentError, PreconditionError
from graphreg.numerics import DTYPE

METRICS = ("cosine", "euclidean")
SUM_TOL = 1e-12
DEFAULT_EPSILON = 0.1
DEFAULT_ALPHA = 1.0


def check_metric(metric: str) -> str:
    if metric not in METRICS:
        raise InvalidArgumentError(f"unknown metric {metric!r}; expected one of {METRICS}")
    return metric


@dataclass(frozen=True)
class SmoothingConfig:
    epsilon: float = DEFAULT_EPSILON
    sampled_vocab_size: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise InvalidArgumentError(f"epsilon must be in [0, 1], got {self.epsilon}")
        if self.sampled_vocab_size is not None and self.sampled_vocab_size < 1:
            raise InvalidArgumentError("sampled_vocab_size must be positive")


@dataclass(frozen=True)
class LabelDistribution:
    mass: Mapping[int, float]

    def __post_init__(self):
        mass = {int(k): float(v) for k, v in self.mass.items()}
        if not mass:
            raise InvalidArgumentError("a label distribution needs a nonempty support")
        if any(v < 0.0 or not math.isfinite(v) for v in mass.values()):
            raise InvalidArgumentError("label masses must be finite and nonnegative")
        total = math.fsum(mass.values())
        if abs(total - 1.0) > SUM_TOL:
            raise InvalidArgumentError(f"label masses sum to {total!r}, not 1")
        object.__setattr__(self, "mass", mass)

    @property
    def support(self) -> frozenset[int]:
        return frozenset(self.mass)

    def __getitem__(self, k: int) -> float:
        return self.mass[k]

    def as_array(self, order: Sequence[int]) -> np.ndarray:
        return np.array([self.mass.get(int(k), 0.0) for k in order], dtype=DTYPE)


@dataclass(frozen=True)
class LossBreakdown:
    supervised: float
    graph: float
    alpha: float
    total: float = field(default=float("nan"))

    def __post_init__(self):
        if math.isnan(self.total):
            object.__setattr__(self, "total", self.supervised + self.alpha * self.graph)


def _check_logits(z: Mapping[int, float]) -> tuple[list[int], np.ndarray]:
    if not z:
        raise InvalidArgumentError("logits are empty")
    ids = sorted(int(k) for k in z)
    vals = np.array([z[k] for k in ids], dtype=DTYPE)
    if not np.all(np.isfinite(vals)):
        raise InvalidArgumentError("logits must be finite")
    return ids, vals


def log_softmax_rows(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    shifted = z - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_rows(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(z: Mapping[int, float]) -> LabelDistribution:
    ids, vals = _check_logits(z)
    return LabelDistribution(dict(zip(ids, softmax_rows(vals))))


def sampled_softmax(z_on_subset: Mapping[int, float], subset: Iterable[int]) -> LabelDistribution:
    """Softmax whose normalizer runs over the sampled label subset only."""
    subset = {int(k) for k in subset}
    if set(int(k) for k in z_on_subset) != subset:
        raise InvalidArgumentError("logit keys must equal the sampled label subset")
    return softmax(z_on_subset)


def log_sampled_softmax(z_on_subset: Mapping[int, float]) -> dict[int, float]:
    ids, vals = _check_logits(z_on_subset)
    return dict(zip(ids, log_softmax_rows(vals).tolist()))


def ground_truth_distribution(labels: Iterable[int], subset: Iterable[int]) -> LabelDistribution:
    """Uniform mass over the ground-truth labels, zero on the rest of the subset."""
    labels = {int(k) for k in labels}
    subset = {int(k) for k in subset}
    if not labels:
        raise PreconditionError("example has no ground-truth labels")
    if not labels <= subset:
        raise PreconditionError(f"ground-truth labels {sorted(labels - subset)} missing from the sampled subset")
    share = 1.0 / len(labels)
    return LabelDistribution({k: (share if k in labels else 0.0) for k in subset})


def ground_truth_rows(label_idx: np.ndarray, labels: Sequence[Iterable[int]]) -> np.ndarray:
    """(B, S) ground-truth masses for per-row subsets ``label_idx``."""
    q = np.zeros(label_idx.shape, dtype=DTYPE)
    for i, gt in enumerate(labels):
        gt_ids = np.fromiter(gt, dtype=np.int64)
        hit = (label_idx[i][:, None] == gt_ids[None, :]).any(axis=1)
        n = int(hit.sum())
        if n == 0 or n != len(set(gt)):
            raise PreconditionError(f"row {i}: ground-truth labels missing from the sampled subset")
        q[i, hit] = 1.0 / n
    return q


def smooth_rows(q: np.ndarray, epsilon: float) -> np.ndarray:
    return (1.0 - epsilon) * q + epsilon / q.shape[-1]


def smooth(q: LabelDistribution, cfg: SmoothingConfig | float = DEFAULT_EPSILON) -> LabelDistribution:
    """Mix ``q`` with the uniform distribution over its support (the sampled subset)."""
    if not isinstance(cfg, SmoothingConfig):
        cfg = SmoothingConfig(epsilon=float(cfg))
    size = len(q.mass)
    if cfg.sampled_vocab_size is not None and cfg.sampled_vocab_size != size:
        raise InvalidArgumentError(
            f"distribution support has {size} classes, smoothing expects {cfg.sampled_vocab_size}"
        )
    eps = cfg.epsilon
    return LabelDistribution({k: (1.0 - eps) * v + eps / size for k, v in q.mass.items()})


def cross_entropy(p: LabelDistribution, q: LabelDistribution) -> float:
    """-sum_k q(k) log p(k)."""
    if not q.support <= p.support:
        raise InvalidArgumentError("target support must lie inside the prediction support")
    total = []
    for k, qk in q.mass.items():
        if qk == 0.0:
            continue
        pk = p.mass[k]
        if pk <= 0.0:
            raise DegenerateInputError(f"target puts mass on class {k} where the prediction is zero")
        total.append(-math.log(pk) * qk)
    return math.fsum(total)


def sampled_cross_entropy(z_on_subset: Mapping[int, float], q: LabelDistribution) -> float:
    """Cross-entropy of the sampled softmax of ``z`` against ``q``, via log-sum-exp."""
    if set(z_on_subset) != set(q.mass):
        raise InvalidArgumentError("logits and target must share the sampled subset")
    logp = log_sampled_softmax(z_on_subset)
    return math.fsum(-logp[k] * qk for k, qk in q.mass.items() if qk != 0.0)


def entropy(q: LabelDistribution) -> float:
    return math.fsum(-v * math.log(v) for v in q.mass.values() if v > 0.0)


# distances


def _pair(u, v) -> tuple[np.ndarray, np.ndarray]:
    u = np.asarray(u, dtype=DTYPE)
    v = np.asarray(v, dtype=DTYPE)
    if u.shape != v.shape or u.ndim != 1:
        raise InvalidArgumentError(f"vectors must share one dimension, got {u.shape} and {v.shape}")
    return u, v


def cosine_distance(u, v) -> float:
    u, v = _pair(u, v)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise DegenerateInputError("cosine distance is undefined for a zero vector")
    return float(1.0 - np.dot(u, v) / (nu * nv))


def euclidean_distance(u, v) -> float:
    u, v = _pair(u, v)
    return float(np.linalg.norm(u - v))


def distance(u, v, metric: str = "cosine") -> float:
    if check_metric(metric) == "cosine":
        return cosine_distance(u, v)
    return euclidean_distance(u, v)


def distance_rows(u: np.ndarray, v: np.ndarray, metric: str) -> np.ndarray:
    check_metric(metric)
    if metric == "euclidean":
        return np.sqrt(((u - v) ** 2).sum(axis=1))
    nu = np.linalg.norm(u, axis=1)
    nv = np.linalg.norm(v, axis=1)
    if np.any(nu == 0.0) or np.any(nv == 0.0):
        raise DegenerateInputError("cosine distance is undefined for a zero vector")
    return 1.0 - (u * v).sum(axis=1) / (nu * nv)


def distance_grad_rows(u: np.ndarray, v: np.ndarray, metric: str) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise gradients of d(u_i, v_i) with respect to u_i and v_i."""
    check_metric(metric)
    if metric == "euclidean":
        diff = u - v
        d = np.sqrt((diff**2).sum(axis=1, keepdims=True))
        # at u == v pick the zero subgradient
        safe = np.where(d > 0.0, d, 1.0)
        g = np.where(d > 0.0, diff / safe, 0.0)
        return g, -g
    nu = np.linalg.norm(u, axis=1, keepdims=True)
    nv = np.linalg.norm(v, axis=1, keepdims=True)
    if np.any(nu == 0.0) or np.any(nv == 0.0):
        raise DegenerateInputError("cosine distance gradient is undefined for a zero embedding")
    cos = (u * v).sum(axis=1, keepdims=True) / (nu * nv)
    gu = -(v / (nu * nv) - cos * u / nu**2)
    gv = -(u / (nu * nv) - cos * v / nv**2)
    return gu, gv


def graph_regularizer(pairs: Iterable[tuple[object, object, float]], metric: str = "cosine") -> float:
    """Weighted sum of embedding distances over (emb_u, emb_v, w_uv) pairs."""
    terms = []
    for u, v, w in pairs:
        if not w > 0.0:
            raise InvalidArgumentError(f"edge weights must be positive, got {w}")
        terms.append(w * distance(u, v, metric))
    return math.fsum(terms)


def total_objective(supervised: float, graph: float, alpha: float = DEFAULT_ALPHA) -> LossBreakdown:
    if alpha < 0.0:
        raise InvalidArgumentError(f"alpha must be nonnegative, got {alpha}")
    return LossBreakdown(supervised=supervised, graph=graph, alpha=alpha, total=supervised + alpha * graph)


def loss_gradients(
    p_sampled: LabelDistribution,
    q_smoothed: LabelDistribution,
    pairs: Sequence[tuple[object, object, float]] = (),
    alpha: float = DEFAULT_ALPHA,
    metric: str = "cosine",
) -> tuple[dict[int, float], list[tuple[np.ndarray, np.ndarray]]]:
    """Gradients of ``CE(p', q') + alpha * sum w d(u, v)``.

    Returns the logit gradient ``p'(k) - q'(k)`` on the sampled subset and,
    per pair, the gradients with respect to both embeddings.
    """
    if p_sampled.support != q_smoothed.support:
        raise InvalidArgumentError("prediction and target supports differ")
    grad_logits = {k: p_sampled[k] - q_smoothed[k] for k in sorted(p_sampled.support)}
    grad_pairs = []
    for u, v, w in pairs:
        u, v = _pair(u, v)
        gu, gv = distance_grad_rows(u[None, :], v[None, :], metric)
        grad_pairs.append((alpha * w * gu[0], alpha * w * gv[0]))
    return grad_logits, grad_pairs
