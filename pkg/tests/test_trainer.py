import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graphreg.dataio import Dataset, Example
from graphreg.errors import InvalidArgumentError, SchemaError, TrainingDivergedError
from graphreg.graph import SimilarityGraph
from graphreg.losses import LabelDistribution
from graphreg.model import ModelConfig, ModelParams, forward, init_params
from graphreg.numerics import make_rng
from graphreg.trainer import (
    OptimizerState,
    TrainConfig,
    UniformLabelSampler,
    label_propagation,
    learning_rate,
    load_resume_point,
    make_batch,
    momentum_step,
    objective_and_grad,
    parse_phase_schedule,
    propagate,
    read_train_log,
    train,
    write_train_log,
)

SMALL = ModelConfig(input_dim=3, num_classes=3, hidden_dims=(16,), embedding_dim=3)


def scalar_params(value):
    cfg = ModelConfig(1, 2, (), 1)
    arrays = [np.full(s, value, dtype=float) for s in cfg.array_shapes()]
    return ModelParams.from_arrays(cfg, arrays)


def assert_params_equal(a, b):
    for x, y in zip(a.arrays(), b.arrays()):
        np.testing.assert_array_equal(x, y)


# configuration and schedules


def test_defaults():
    cfg = TrainConfig()
    assert (cfg.alpha, cfg.epsilon, cfg.batch_size, cfg.lr0) == (1.0, 0.1, 24, 0.001)
    assert (cfg.decay_rate, cfg.decay_every, cfg.momentum, cfg.weight_decay) == (0.9, 100_000, 0.9, 0.00004)
    assert cfg.metric == "cosine"


@pytest.mark.parametrize(
    "kwargs",
    [dict(alpha=-1), dict(epsilon=2), dict(batch_size=0), dict(decay_every=0), dict(metric="l1"),
     dict(momentum=1.0), dict(neighbor_mode="every"), dict(phase_schedule=((5, 0.0), (5, 1.0)))],
)
def test_config_validation(kwargs):
    with pytest.raises(InvalidArgumentError):
        TrainConfig(**kwargs)


def test_learning_rate_staircase():
    cfg = TrainConfig(decay_every=100)
    assert learning_rate(cfg, 0) == 0.001
    assert learning_rate(cfg, 99) == 0.001
    assert learning_rate(cfg, 200) == pytest.approx(0.001 * 0.81, rel=1e-15)


def test_phase_schedule():
    sched = parse_phase_schedule("1000:0,+500:0.5")
    assert sched == ((1000, 0.0), (1500, 0.5))
    cfg = TrainConfig(alpha=1.0, phase_schedule=sched)
    assert [cfg.alpha_at(s) for s in (0, 999, 1000, 1499, 1500)] == [0.0, 0.0, 0.5, 0.5, 1.0]
    with pytest.raises(InvalidArgumentError):
        parse_phase_schedule("10:0,5:1")


# optimizer


def test_momentum_fixed_point():
    p = scalar_params(1.0)
    q, _ = momentum_step(p, ModelParams.zeros_like(p), OptimizerState.zeros(p), 0.1, 0.9, 0.0)
    assert_params_equal(p, q)


def test_momentum_hand_evaluation():
    p, g = scalar_params(1.0), scalar_params(1.0)
    s = OptimizerState.zeros(p)
    p1, s1 = momentum_step(p, g, s, 0.1, 0.9, 0.0)
    assert np.allclose(p1.head_b, 0.9, rtol=0, atol=1e-15) and np.allclose(s1.velocity.head_b, 1.0)
    p2, s2 = momentum_step(p1, g, s1, 0.1, 0.9, 0.0)
    assert np.allclose(s2.velocity.head_b, 1.9, atol=1e-15)
    assert np.allclose(p2.head_b, 0.71, atol=1e-15)
    assert s2.step == 2


def test_weight_decay_enters_velocity():
    p = scalar_params(2.0)
    _, s = momentum_step(p, ModelParams.zeros_like(p), OptimizerState.zeros(p), 0.1, 0.9, 0.5)
    assert np.all(s.velocity.head_b == 1.0)


def test_nonfinite_gradient_diverges():
    p = scalar_params(1.0)
    with pytest.raises(TrainingDivergedError):
        momentum_step(p, scalar_params(np.nan), OptimizerState.zeros(p), 0.1)


# batching


def test_label_sampler_force_includes_ground_truth():
    out = UniformLabelSampler().sample(make_rng(0), 50, 10, {3, 41})
    assert out.size == 10 and np.unique(out).size == 10
    assert {3, 41} <= set(out.tolist())
    assert np.all(np.diff(out) > 0)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 40), st.data())
def test_label_sampler_properties(k, data):
    gt = data.draw(st.sets(st.integers(0, k - 1), min_size=1, max_size=min(3, k)))
    size = data.draw(st.integers(len(gt), k))
    out = UniformLabelSampler().sample(make_rng(k, size), k, size, gt)
    assert out.size == size and np.unique(out).size == size and gt <= set(out.tolist())
    assert out.min() >= 0 and out.max() < k


def test_label_sampler_errors():
    with pytest.raises(InvalidArgumentError):
        UniformLabelSampler().sample(make_rng(0), 5, 1, {0, 1})
    with pytest.raises(InvalidArgumentError):
        UniformLabelSampler().sample(make_rng(0), 5, 6, {0})


def test_make_batch_without_graph(tiny_dataset):
    b = make_batch(tiny_dataset, None, make_rng(0), 4)
    assert not b.has_pairs
    assert b.label_idx.shape == (4, 3)  # sampled_vocab None means the full vocabulary
    assert all(tiny_dataset[int(i)].is_labeled for i in b.example_ids)
    assert len(set(b.example_ids.tolist())) == 4


def test_make_batch_neighbors(tiny_dataset, tiny_graph):
    b = make_batch(tiny_dataset, tiny_graph, make_rng(1), 6, sampled_vocab=2)
    assert b.label_idx.shape == (6, 2)
    for r, nid, w in zip(b.pair_rows, b.neighbor_ids, b.neighbor_w):
        assert tiny_graph.weight(int(b.example_ids[r]), int(nid)) == w
    ball = make_batch(tiny_dataset, tiny_graph, make_rng(1), 6, neighbor_mode="all")
    assert ball.pair_rows.size == 2 * tiny_graph.num_edges - 2  # edges 0-6 and 2-7 have one labeled end


def test_make_batch_vocab_errors(tiny_dataset):
    with pytest.raises(InvalidArgumentError):
        make_batch(tiny_dataset, None, make_rng(0), 4, sampled_vocab=4)
    two = Dataset([Example(0, np.ones(2), {0, 1}), Example(1, np.zeros(2), {1})], 3)
    with pytest.raises(InvalidArgumentError):
        make_batch(two, None, make_rng(0), 2, sampled_vocab=1)


def test_graph_does_not_change_example_or_label_draws(tiny_dataset, tiny_graph):
    a = make_batch(tiny_dataset, None, make_rng(5), 5, sampled_vocab=2)
    b = make_batch(tiny_dataset, tiny_graph, make_rng(5), 5, sampled_vocab=2)
    np.testing.assert_array_equal(a.example_ids, b.example_ids)
    np.testing.assert_array_equal(a.label_idx, b.label_idx)


# objective


def test_identical_neighbor_embeddings_give_no_graph_gradient(tiny_dataset):
    p = init_params(SMALL, make_rng(0))
    b = make_batch(tiny_dataset, None, make_rng(0), 4)
    paired = dataclasses.replace(
        b,
        pair_rows=np.arange(4),
        neighbor_ids=b.example_ids + 100,
        neighbor_x=b.x.copy(),
        neighbor_w=np.full(4, 0.5),
    )
    l0, g0 = objective_and_grad(p, b, 1.0, 0.1, "euclidean")
    l1, g1 = objective_and_grad(p, paired, 1.0, 0.1, "euclidean")
    assert l1.graph == 0.0
    for x, y in zip(g0.arrays(), g1.arrays()):
        np.testing.assert_allclose(x, y, atol=1e-14)


def test_breakdown_is_consistent(tiny_dataset, tiny_graph):
    p = init_params(SMALL, make_rng(1))
    b = make_batch(tiny_dataset, tiny_graph, make_rng(2), 6)
    br, _ = objective_and_grad(p, b, 0.7, 0.1, "cosine")
    assert br.total == br.supervised + 0.7 * br.graph


# training loop


def test_zero_steps_returns_initial_params(tiny_dataset):
    res = train(tiny_dataset, None, TrainConfig(max_steps=0), SMALL)
    assert res.records == []
    assert_params_equal(res.params, res.initial_params)


def test_training_is_deterministic(tiny_dataset, tiny_graph):
    cfg = TrainConfig(max_steps=30, batch_size=4, seed=3)
    a = train(tiny_dataset, tiny_graph, cfg, SMALL)
    b = train(tiny_dataset, tiny_graph, cfg, SMALL)
    assert_params_equal(a.params, b.params)


def test_alpha_zero_matches_no_graph(tiny_dataset, tiny_graph):
    cfg = TrainConfig(max_steps=50, batch_size=4, alpha=0.0)
    a = train(tiny_dataset, tiny_graph, cfg, SMALL)
    b = train(tiny_dataset, None, cfg, SMALL)
    for x, y in zip(a.params.arrays(), b.params.arrays()):
        assert np.abs(x - y).max() <= 1e-12


def test_phase_schedule_tracks_unweighted_graph_term(tiny_dataset, tiny_graph):
    cfg = TrainConfig(max_steps=20, batch_size=6, phase_schedule=((10, 0.0),))
    res = train(tiny_dataset, tiny_graph, cfg, SMALL)
    first, second = res.records[:10], res.records[10:]
    assert all(r.loss.alpha == 0.0 and r.loss.total == r.loss.supervised for r in first)
    assert any(r.loss.graph > 0 for r in first)
    assert all(r.loss.alpha == 1.0 for r in second)


def test_convex_toy_loss_non_increasing():
    rng = make_rng(9)
    x = np.concatenate([rng.normal(-1, 0.3, (10, 2)), rng.normal(1, 0.3, (10, 2))])
    ds = Dataset([Example(i, x[i], {int(i >= 10)}) for i in range(20)], 2)
    cfg = TrainConfig(max_steps=100, batch_size=20, lr0=1e-3, momentum=0.0, weight_decay=0.0, epsilon=0.0)
    res = train(ds, None, cfg, ModelConfig(2, 2, (), 2))
    totals = [r.loss.total for r in res.records]
    assert all(b <= a + 1e-12 for a, b in zip(totals, totals[1:]))


def test_resume_matches_uninterrupted_run(tmp_path, tiny_dataset, tiny_graph):
    cfg = TrainConfig(max_steps=40, batch_size=4, checkpoint_every=20, seed=2)
    full = train(tiny_dataset, tiny_graph, cfg, SMALL, checkpoint_dir=tmp_path)
    half = dataclasses.replace(cfg, max_steps=20)
    ckdir = tmp_path / "half"
    train(tiny_dataset, tiny_graph, half, SMALL, checkpoint_dir=ckdir)
    params, state = load_resume_point(ckdir / "manifest.json", cfg, SMALL)
    assert state.step == 20
    resumed = train(tiny_dataset, tiny_graph, cfg, params=params, state=state)
    assert_params_equal(full.params, resumed.params)
    with pytest.raises(SchemaError):
        load_resume_point(ckdir / "manifest.json", dataclasses.replace(cfg, alpha=0.5), SMALL)


def test_train_input_validation(tiny_dataset):
    with pytest.raises(InvalidArgumentError):
        train(tiny_dataset, None, TrainConfig(max_steps=1), ModelConfig(4, 3))
    with pytest.raises(InvalidArgumentError):
        train(tiny_dataset, None, TrainConfig(max_steps=1), ModelConfig(3, 5))
    stray = SimilarityGraph({(0, 99): 0.5}, frozenset({0}))
    with pytest.raises(InvalidArgumentError):
        train(tiny_dataset, stray, TrainConfig(max_steps=1), SMALL)


def test_divergence_is_reported(tiny_dataset):
    with pytest.raises(TrainingDivergedError):
        train(tiny_dataset, None, TrainConfig(max_steps=200, lr0=1e6, batch_size=4), SMALL)


def test_train_log_roundtrip(tmp_path, tiny_dataset):
    res = train(tiny_dataset, None, TrainConfig(max_steps=5, batch_size=3), SMALL)
    path = tmp_path / "log.tsv"
    write_train_log(path, res.records, timing=False)
    rows = read_train_log(path)
    assert [r["step"] for r in rows] == list(range(5))
    assert rows[-1]["total"] == res.records[-1].loss.total and rows[0]["seconds"] == 0.0


# label propagation


def onehot(k, n=2):
    return LabelDistribution({c: float(c == k) for c in range(n)})


def test_propagation_single_edge():
    g = SimilarityGraph({(0, 1): 0.4}, frozenset({0}))
    out = label_propagation(g, {0: LabelDistribution({0: 0.3, 1: 0.7})}, 5)
    assert out[1].mass == pytest.approx({0: 0.3, 1: 0.7}, abs=1e-15)


def test_propagation_chain():
    g = SimilarityGraph({(0, 1): 0.5, (2, 1): 0.5}, frozenset({0, 2}))
    out = label_propagation(g, {0: onehot(0), 2: onehot(1)}, 50)
    assert out[1][0] == pytest.approx(0.5, abs=1e-15)


def test_propagation_zero_iterations_keeps_uniform():
    g = SimilarityGraph({(0, 1): 0.5}, frozenset({0}))
    out = label_propagation(g, {0: onehot(0, 4)}, 0, num_classes=4)
    assert all(out[1][c] == 0.25 for c in range(4))


def test_propagation_requires_labels():
    with pytest.raises(InvalidArgumentError):
        label_propagation(SimilarityGraph({}, frozenset()), {}, 3)


def test_propagation_reaches_fixed_point():
    g = SimilarityGraph({(0, 2): 0.5, (1, 2): 0.3, (1, 3): 0.8, (0, 4): 0.6, (0, 3): 0.2}, frozenset({0, 1}))
    res = propagate(g, {0: onehot(0), 1: onehot(1)}, 10_000, tol=1e-8)
    assert res.last_change < 1e-8 and res.iterations < 10_000


def test_unclamped_propagation_moves_labeled_vertices():
    g = SimilarityGraph({(0, 1): 0.5, (1, 2): 0.5}, frozenset({0, 1}))
    res = label_propagation(g, {0: onehot(0), 1: onehot(1)}, 1, clamp=False)
    # vertex 1 averages one-hot class 0 with vertex 2's uniform start
    assert res[0][1] == 1.0 and res[1][0] == pytest.approx(0.75)
