"""Run configuration: ``key = value`` files whose keys double as CLI flags.

Every key maps one-to-one to a ``--kebab-case`` flag; flags override file
values, unknown keys are rejected, and the effective values are hashed for
provenance.
"""

from __future__ import annotations

import argparse
import hashlib
import json
from dataclasses import dataclass
from typing import Any, Callable

from graphreg.errors import SchemaError
from graphreg.evaluation import default_eta_grid
from graphreg.model import ModelConfig
from graphreg.trainer import TrainConfig, format_phase_schedule, parse_phase_schedule


def _optional_int(text: str) -> int | None:
    return None if text.strip().lower() in ("", "none", "all") else int(text)


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(",") if t.strip())


def parse_eta_grid(text: str) -> tuple[float, ...]:
    """``start:stop:step`` or an explicit comma-separated list."""
    if ":" in text:
        start, stop, step = (float(t) for t in text.split(":"))
        if step <= 0 or stop < start:
            raise ValueError("eta grid needs start <= stop and a positive step")
        return tuple(default_eta_grid(start, stop, step))
    return tuple(float(t) for t in text.split(",") if t.strip())


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    help: str
    render: Callable[[Any], Any] = lambda v: v


KEYS: dict[str, Key] = {
    "alpha": Key(float, 1.0, "graph regularization multiplier"),
    "epsilon": Key(float, 0.1, "label smoothing"),
    "batch_size": Key(int, 24, "labeled examples per step"),
    "sampled_vocab": Key(_optional_int, None, "labels per example in the sampled softmax (none = all)"),
    "lr0": Key(float, 0.001, "initial learning rate"),
    "decay_rate": Key(float, 0.9, "staircase decay factor"),
    "decay_every": Key(int, 100_000, "steps between learning-rate decays"),
    "momentum": Key(float, 0.9, "momentum coefficient"),
    "weight_decay": Key(float, 0.00004, "L2 weight decay"),
    "metric": Key(str, "cosine", "graph regularizer distance (cosine|euclidean)"),
    "max_steps": Key(int, 1000, "optimizer steps"),
    "seed": Key(int, 0, "run seed"),
    "checkpoint_every": Key(int, 0, "checkpoint cadence in steps (0 = final only)"),
    "phase_schedule": Key(parse_phase_schedule, (), "alpha phases, e.g. 1000:0,+500:1", format_phase_schedule),
    "neighbor_mode": Key(str, "sample", "sample one neighbor per example, or use all"),
    "hidden_dims": Key(_int_list, (), "hidden layer widths, comma-separated", lambda v: ",".join(map(str, v))),
    "embedding_dim": Key(int, 64, "embedding width"),
    "threshold": Key(float, 0.1, "edge threshold on click rates"),
    "ks": Key(_int_list, (1, 5), "k values for kNN Top-k", lambda v: ",".join(map(str, v))),
    "eta_grid": Key(parse_eta_grid, tuple(default_eta_grid()), "margins, start:stop:step or a list",
                    lambda v: ",".join(repr(x) for x in v)),
    "eval_metric": Key(str, "euclidean", "evaluation distance (cosine|euclidean)"),
    "normalize": Key(_bool, True, "L2-normalize embeddings before evaluation"),
}

TRAIN_KEYS = [k for k in KEYS if k in TrainConfig.__dataclass_fields__]
MODEL_KEYS = ["hidden_dims", "embedding_dim"]


def flag(key: str) -> str:
    return "--" + key.replace("_", "-")


def add_flags(parser: argparse.ArgumentParser, keys) -> None:
    for key in keys:
        spec = KEYS[key]
        parser.add_argument(flag(key), dest=key, default=None, metavar="V",
                            help=f"{spec.help} (default: {spec.render(spec.default)})")


def read_config_file(path) -> dict[str, str]:
    raw: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise SchemaError(f"{path}:{lineno}: expected key = value")
            key, value = (p.strip() for p in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in KEYS:
                raise SchemaError(f"{path}:{lineno}: unknown config key {key!r}")
            raw[key] = value
    return raw


def resolve(args: argparse.Namespace, keys) -> dict[str, Any]:
    """Effective values for ``keys``: defaults, then the config file, then flags."""
    raw = read_config_file(args.config) if getattr(args, "config", None) else {}
    out = {}
    for key in keys:
        text = getattr(args, key, None)
        if text is None:
            text = raw.get(key)
        try:
            out[key] = KEYS[key].default if text is None else KEYS[key].parse(text)
        except ValueError as exc:
            raise SchemaError(f"bad value for {key}: {exc}") from exc
    return out


def rendered(values: dict[str, Any]) -> dict[str, Any]:
    return {k: KEYS[k].render(v) for k, v in sorted(values.items())}


def values_hash(values: dict[str, Any]) -> str:
    blob = json.dumps(rendered(values), sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def train_config(values: dict[str, Any]) -> TrainConfig:
    return TrainConfig(**{k: values[k] for k in TRAIN_KEYS})


def model_config(values: dict[str, Any], input_dim: int, num_classes: int) -> ModelConfig:
    return ModelConfig(input_dim, num_classes, values["hidden_dims"], values["embedding_dim"])
