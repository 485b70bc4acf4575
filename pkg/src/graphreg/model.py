"""Embedding network and softmax head.

The network is a stack of affine layers. Every hidden layer is followed by
ReLU-6; the last affine layer produces the embedding and is left linear.
A linear softmax head maps the embedding to one logit per class.

Weights are stored ``(out, in)`` so a single example maps as ``W @ x + b``
and a batch (rows are examples) as ``X @ W.T + b``.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from graphreg.errors import DegenerateInputError, InvalidArgumentError, SchemaError
from graphreg.numerics import DTYPE

RELU_CAP = 6.0
CHECKPOINT_MAGIC = "graphreg-checkpoint"
CHECKPOINT_VERSION = 1
DENSE_HEAD_LIMIT = 5_000_000


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    num_classes: int
    hidden_dims: tuple[int, ...] = ()
    embedding_dim: int = 64

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1:
            raise InvalidArgumentError("input_dim must be positive")
        if any(h < 1 for h in self.hidden_dims):
            raise InvalidArgumentError("hidden_dims must all be positive")
        if self.embedding_dim < 1:
            raise InvalidArgumentError("embedding_dim must be positive")
        if self.num_classes < 2:
            raise InvalidArgumentError("num_classes must be at least 2")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        """(out, in) for each affine layer of the embedding stack."""
        dims = [self.input_dim, *self.hidden_dims, self.embedding_dim]
        return [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]

    def array_shapes(self) -> list[tuple[int, ...]]:
        shapes: list[tuple[int, ...]] = []
        for out_dim, in_dim in self.layer_dims:
            shapes += [(out_dim, in_dim), (out_dim,)]
        shapes += [(self.num_classes, self.embedding_dim), (self.num_classes,)]
        return shapes


@dataclass
class ModelParams:
    config: ModelConfig
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    head_w: np.ndarray
    head_b: np.ndarray

    def __post_init__(self):
        shapes = self.config.array_shapes()
        arrays = self.arrays()
        if len(arrays) != len(shapes):
            raise InvalidArgumentError(f"expected {len(shapes)} arrays, got {len(arrays)}")
        for a, s in zip(arrays, shapes):
            if a.shape != s:
                raise InvalidArgumentError(f"parameter shape {a.shape} does not match config shape {s}")

    def arrays(self) -> list[np.ndarray]:
        """Flat parameter list in canonical order: W0, b0, W1, b1, ..., head W, head b."""
        out: list[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out + [self.head_w, self.head_b]

    @classmethod
    def from_arrays(cls, config: ModelConfig, arrays: Iterable[np.ndarray]) -> "ModelParams":
        arrays = [np.asarray(a, dtype=DTYPE) for a in arrays]
        n = len(config.layer_dims)
        if len(arrays) != 2 * n + 2:
            raise InvalidArgumentError(f"expected {2 * n + 2} arrays, got {len(arrays)}")
        return cls(config, arrays[0 : 2 * n : 2], arrays[1 : 2 * n : 2], arrays[-2], arrays[-1])

    @classmethod
    def zeros_like(cls, other: "ModelParams") -> "ModelParams":
        return cls.from_arrays(other.config, [np.zeros_like(a) for a in other.arrays()])

    def copy(self) -> "ModelParams":
        return ModelParams.from_arrays(self.config, [a.copy() for a in self.arrays()])

    def __add__(self, other: "ModelParams") -> "ModelParams":
        return ModelParams.from_arrays(self.config, [a + b for a, b in zip(self.arrays(), other.arrays())])

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


@dataclass
class ForwardTrace:
    """Cached intermediates of a forward pass; arrays are batched, one row per example."""

    layer_inputs: list[np.ndarray]
    preacts: list[np.ndarray]
    embeddings: np.ndarray
    single: bool = False
    activations: list[np.ndarray] = field(default_factory=list)

    @property
    def embedding(self) -> np.ndarray:
        return self.embeddings[0] if self.single else self.embeddings


def relu6(z: np.ndarray) -> np.ndarray:
    return np.minimum(np.maximum(z, 0.0), RELU_CAP)


def relu6_grad(z: np.ndarray) -> np.ndarray:
    # subgradient is 0 at both kinks
    return ((z > 0.0) & (z < RELU_CAP)).astype(DTYPE)


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """Zero-mean normal weights with std 1/sqrt(fan_in); zero biases."""
    weights, biases = [], []
    for out_dim, in_dim in cfg.layer_dims:
        weights.append(rng.normal(0.0, 1.0 / np.sqrt(in_dim), size=(out_dim, in_dim)))
        biases.append(np.zeros(out_dim, dtype=DTYPE))
    head_w = rng.normal(0.0, 1.0 / np.sqrt(cfg.embedding_dim), size=(cfg.num_classes, cfg.embedding_dim))
    head_b = np.zeros(cfg.num_classes, dtype=DTYPE)
    return ModelParams(cfg, weights, biases, head_w, head_b)


def forward(params: ModelParams, x) -> ForwardTrace:
    """Run the embedding stack on one example (1-D) or a batch (2-D, rows)."""
    x = np.asarray(x, dtype=DTYPE)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.ndim != 2 or xb.shape[1] != params.config.input_dim:
        raise InvalidArgumentError(
            f"input has shape {x.shape}, expected trailing dim {params.config.input_dim}"
        )
    layer_inputs, preacts, activations = [], [], []
    h = xb
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        layer_inputs.append(h)
        z = h @ w.T + b
        if i < last:
            preacts.append(z)
            h = relu6(z)
            activations.append(h)
        else:
            h = z
    return ForwardTrace(layer_inputs, preacts, h, single=single, activations=activations)


def _check_ids(params: ModelParams, ids: np.ndarray) -> None:
    if ids.size and (ids.min() < 0 or ids.max() >= params.config.num_classes):
        raise InvalidArgumentError(f"class id out of range [0, {params.config.num_classes})")


def logits(params: ModelParams, emb, label_subset: Iterable[int]) -> dict[int, float]:
    """z_k = W_k . emb + b_k for each k in ``label_subset`` only."""
    ids = np.array(sorted(set(int(k) for k in label_subset)), dtype=np.int64)
    if ids.size == 0:
        raise InvalidArgumentError("label subset is empty")
    _check_ids(params, ids)
    emb = np.asarray(emb, dtype=DTYPE)
    if emb.shape != (params.config.embedding_dim,):
        raise InvalidArgumentError(f"embedding has shape {emb.shape}")
    z = params.head_w[ids] @ emb + params.head_b[ids]
    return {int(k): float(v) for k, v in zip(ids, z)}


def logits_batch(params: ModelParams, emb: np.ndarray, label_idx: np.ndarray) -> np.ndarray:
    """Logits for per-row label subsets: ``label_idx`` is (B, S), result is (B, S)."""
    _check_ids(params, label_idx)
    w = params.head_w[label_idx]
    return np.einsum("bd,bsd->bs", emb, w) + params.head_b[label_idx]


def backward_batch(
    params: ModelParams,
    trace: ForwardTrace,
    grad_embedding: np.ndarray | None,
    head: tuple[np.ndarray, np.ndarray] | None = None,
) -> ModelParams:
    """Parameter gradient of a scalar given its batched upstream gradients.

    ``grad_embedding`` is d(scalar)/d(embedding) with the trace's (B, E)
    shape, or None. ``head`` is ``(label_idx, grad_logits)``, both (B, S),
    for logits produced by :func:`logits_batch`.
    """
    emb = trace.embeddings
    grad = ModelParams.zeros_like(params)
    d_emb = np.zeros_like(emb) if grad_embedding is None else np.asarray(grad_embedding, dtype=DTYPE)
    if d_emb.shape != emb.shape:
        raise InvalidArgumentError(f"embedding gradient shape {d_emb.shape} != {emb.shape}")
    if head is not None:
        label_idx, d_z = head
        label_idx = np.asarray(label_idx, dtype=np.int64)
        d_z = np.asarray(d_z, dtype=DTYPE)
        if label_idx.shape != d_z.shape or label_idx.shape[0] != emb.shape[0]:
            raise InvalidArgumentError("logit gradient and label index shapes disagree with the batch")
        _check_ids(params, label_idx)
        if label_idx.size * params.config.num_classes <= DENSE_HEAD_LIMIT:
            # subsets hold distinct ids per row, so a dense scatter is exact
            dense = np.zeros((emb.shape[0], params.config.num_classes), dtype=DTYPE)
            np.put_along_axis(dense, label_idx, d_z, axis=1)
            grad.head_w += dense.T @ emb
            grad.head_b += dense.sum(axis=0)
        else:
            np.add.at(grad.head_w, label_idx, d_z[:, :, None] * emb[:, None, :])
            np.add.at(grad.head_b, label_idx, d_z)
        d_emb = d_emb + np.einsum("bs,bsd->bd", d_z, params.head_w[label_idx])

    delta = d_emb
    for i in range(len(params.weights) - 1, -1, -1):
        grad.weights[i] += delta.T @ trace.layer_inputs[i]
        grad.biases[i] += delta.sum(axis=0)
        if i > 0:
            delta = (delta @ params.weights[i]) * relu6_grad(trace.preacts[i - 1])
    return grad


def backward(
    params: ModelParams,
    trace: ForwardTrace,
    grad_wrt_embedding,
    grad_wrt_logits: Mapping[int, float] | None = None,
) -> ModelParams:
    """Single-example backward pass; logit gradients come as a class-id map."""
    if trace.embeddings.shape[0] != 1:
        raise InvalidArgumentError("backward expects a single-example trace; use backward_batch")
    g = np.asarray(grad_wrt_embedding, dtype=DTYPE).reshape(1, -1)
    head = None
    if grad_wrt_logits:
        ids = sorted(grad_wrt_logits)
        head = (
            np.array([ids], dtype=np.int64),
            np.array([[grad_wrt_logits[k] for k in ids]], dtype=DTYPE),
        )
    return backward_batch(params, trace, g, head)


def normalize_embedding(emb) -> np.ndarray:
    emb = np.asarray(emb, dtype=DTYPE)
    norm = np.linalg.norm(emb)
    if norm == 0.0:
        raise DegenerateInputError("cannot normalize a zero embedding")
    return emb / norm


def normalize_rows(emb: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise DegenerateInputError("cannot normalize a zero embedding")
    return emb / norms


def embed(params: ModelParams, features: np.ndarray, normalize: bool = True) -> np.ndarray:
    """Inference embeddings for a batch of feature rows."""
    emb = forward(params, np.asarray(features, dtype=DTYPE).reshape(-1, params.config.input_dim)).embeddings
    return normalize_rows(emb) if normalize else emb


# Checkpoint layout: an ASCII header of "key value" lines ending with "end\n",
# then every array of ModelParams.arrays() in order as little-endian float64,
# row-major, with shapes implied by the header's model config.


def _header(cfg: ModelConfig, kind: str, step: int) -> str:
    hidden = ",".join(str(h) for h in cfg.hidden_dims) or "-"
    lines = [
        f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}",
        f"kind {kind}",
        f"step {step}",
        f"input_dim {cfg.input_dim}",
        f"hidden_dims {hidden}",
        f"embedding_dim {cfg.embedding_dim}",
        f"num_classes {cfg.num_classes}",
        "byte_order little",
        "dtype float64",
        "end",
    ]
    return "\n".join(lines) + "\n"


def checkpoint_bytes(params: ModelParams, kind: str = "params", step: int = 0) -> bytes:
    buf = io.BytesIO()
    buf.write(_header(params.config, kind, step).encode("ascii"))
    for a in params.arrays():
        buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return buf.getvalue()


def save_checkpoint(path, params: ModelParams, kind: str = "params", step: int = 0) -> None:
    Path(path).write_bytes(checkpoint_bytes(params, kind, step))


def parse_checkpoint(data: bytes) -> tuple[ModelParams, dict[str, str]]:
    header: dict[str, str] = {}
    pos = 0
    first = True
    while True:
        nl = data.find(b"\n", pos)
        if nl < 0:
            raise SchemaError("checkpoint header is truncated")
        line = data[pos:nl].decode("ascii")
        pos = nl + 1
        if first:
            magic, _, version = line.partition(" ")
            if magic != CHECKPOINT_MAGIC:
                raise SchemaError("not a checkpoint file")
            if version != str(CHECKPOINT_VERSION):
                raise SchemaError(f"unsupported checkpoint version {version}")
            first = False
            continue
        if line == "end":
            break
        key, _, value = line.partition(" ")
        header[key] = value
    try:
        hidden = header["hidden_dims"]
        cfg = ModelConfig(
            input_dim=int(header["input_dim"]),
            num_classes=int(header["num_classes"]),
            hidden_dims=() if hidden == "-" else tuple(int(h) for h in hidden.split(",")),
            embedding_dim=int(header["embedding_dim"]),
        )
    except (KeyError, ValueError) as exc:
        raise SchemaError(f"bad checkpoint header: {exc}") from exc
    arrays = []
    for shape in cfg.array_shapes():
        n = int(np.prod(shape))
        chunk = data[pos : pos + 8 * n]
        if len(chunk) != 8 * n:
            raise SchemaError("checkpoint payload is truncated")
        arrays.append(np.frombuffer(chunk, dtype="<f8").astype(DTYPE).reshape(shape))
        pos += 8 * n
    if pos != len(data):
        raise SchemaError("checkpoint has trailing bytes")
    return ModelParams.from_arrays(cfg, arrays), header


def load_checkpoint(path) -> ModelParams:
    return parse_checkpoint(Path(path).read_bytes())[0]
