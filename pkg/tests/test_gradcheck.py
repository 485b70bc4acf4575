import numpy as np

from graphreg import losses
from graphreg.gradcheck import KINK_MARGIN, block_errors, random_case, run_gradcheck
from graphreg.model import ModelParams, forward
from graphreg.numerics import make_rng


def test_small_run_passes():
    report = run_gradcheck(nets=3, seed=11)
    assert report.passed and len(report.cases) == 9
    assert "PASS" in report.format()


def test_sign_flip_is_caught(monkeypatch):
    orig = losses.distance_grad_rows

    def flipped(u, v, metric):
        gu, gv = orig(u, v, metric)
        return -gu, -gv

    monkeypatch.setattr(losses, "distance_grad_rows", flipped)
    report = run_gradcheck(nets=2, seed=0, modes=("graph-cosine",))
    assert not report.passed and report.max_error > 1e-2


def test_supervised_mode_unaffected_by_graph_bug(monkeypatch):
    monkeypatch.setattr(losses, "distance_grad_rows", lambda u, v, m: (u * 0, v * 0))
    assert run_gradcheck(nets=2, seed=0, modes=("supervised",)).passed


def test_random_case_respects_size_limits_and_kink_margin():
    for s in range(20):
        params, batch = random_case(make_rng(s), with_graph=True)
        cfg = params.config
        assert cfg.input_dim <= 8 and len(cfg.hidden_dims) <= 2 and max(cfg.hidden_dims, default=1) <= 8
        assert cfg.num_classes <= 16 and batch.x.shape[0] == 6 and batch.has_pairs
        for z in forward(params, batch.x).preacts:
            assert np.all(np.abs(z) >= KINK_MARGIN) and np.all(np.abs(z - 6) >= KINK_MARGIN)


def test_block_errors_definition():
    params, _ = random_case(make_rng(0), with_graph=False)
    a = ModelParams.zeros_like(params)
    n = a.copy()
    a.head_b[0], n.head_b[0] = 2.0, 1.0
    errs = block_errors(a, n)
    assert errs[-1] == 0.5 and all(e == 0.0 for e in errs[:-1])
