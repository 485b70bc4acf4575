import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from graphreg.errors import DegenerateInputError, InvalidArgumentError, ParseError, SchemaError
from graphreg.graph import (
    ClickLogRecord,
    RecordKind,
    SimilarityGraph,
    build_graph,
    co_click_rate,
    graph_stats,
    load_edges,
    read_click_log,
    sample_neighbor,
    save_edges,
    similar_image_click_rate,
    write_click_log,
)
from graphreg.numerics import make_rng

CO, SIM = RecordKind.CO_CLICK, RecordKind.SIMILAR_IMAGE_CLICK


def test_co_click_rate_examples():
    assert co_click_rate(ClickLogRecord(CO, 1, 2, 5, 10, 5)) == 0.5
    assert co_click_rate(ClickLogRecord(CO, 1, 2, 0, 10, 5)) == 0.0
    assert co_click_rate(ClickLogRecord(CO, 1, 2, 4, 4, 4)) == 1.0
    with pytest.raises(DegenerateInputError):
        co_click_rate(ClickLogRecord(CO, 1, 2, 0, 0, 0))


def test_similar_image_click_rate_examples():
    assert similar_image_click_rate(ClickLogRecord(SIM, 1, 2, 3, 3, 10)) == 0.3
    assert similar_image_click_rate(ClickLogRecord(SIM, 1, 2, 0, 0, 10)) == 0.0
    assert similar_image_click_rate(ClickLogRecord(SIM, 1, 2, 7, 7, 7)) == 1.0
    with pytest.raises(DegenerateInputError):
        similar_image_click_rate(ClickLogRecord(SIM, 1, 2, 0, 0, 0))


def test_record_invariants():
    with pytest.raises(InvalidArgumentError):
        ClickLogRecord(CO, 1, 1, 0, 1, 1).check()
    with pytest.raises(InvalidArgumentError):
        ClickLogRecord(CO, 1, 2, 5, 4, 9).check()


def test_threshold_is_strict():
    rec = ClickLogRecord(SIM, 1, 2, 1, 1, 10)  # rate exactly 0.1
    assert build_graph([rec], 0.1, {1}).num_edges == 0
    assert build_graph([rec], 0.09, {1}).num_edges == 1


def test_unlabeled_source_yields_no_edge():
    rec = ClickLogRecord(SIM, 1, 2, 5, 5, 10)
    assert build_graph([rec], 0.1, {2}).num_edges == 0


def test_duplicate_pair_keeps_max_rate():
    recs = [ClickLogRecord(CO, 1, 2, 3, 10, 3), ClickLogRecord(SIM, 2, 1, 5, 5, 10)]
    g = build_graph(recs, 0.1, {1, 2})
    assert g.num_edges == 1
    assert g.weight(1, 2) == 0.5


def test_malformed_records_are_skipped_and_counted():
    recs = [ClickLogRecord(CO, 1, 2, 9, 1, 1), ClickLogRecord(CO, 1, 3, 0, 0, 0), ClickLogRecord(CO, 1, 4, 5, 5, 5)]
    g = build_graph(recs, 0.1, {1})
    assert g.skipped_records == 2 and g.num_edges == 1


def test_bad_threshold():
    with pytest.raises(InvalidArgumentError):
        build_graph([], 1.0, set())


record_st = st.builds(
    lambda kind, u, dv, j, a, b: ClickLogRecord(kind, u, u + dv, j, j + a, j + b),
    st.sampled_from(list(RecordKind)),
    st.integers(0, 15),
    st.integers(1, 5),
    st.integers(0, 20),
    st.integers(0, 20),
    st.integers(1, 20),
)


@settings(max_examples=60, deadline=None)
@given(st.lists(record_st, max_size=30), st.randoms(use_true_random=False))
def test_build_graph_order_independent_and_invariants(records, rnd):
    labeled = set(range(0, 21, 2))
    g1 = build_graph(records, 0.1, labeled)
    shuffled = list(records)
    rnd.shuffle(shuffled)
    g2 = build_graph(shuffled, 0.1, labeled)
    assert g1.edges == g2.edges
    for (u, v), w in g1.edges.items():
        assert 0.1 < w <= 1.0 and u in labeled and u != v
        ids, ws = g1.neighbors(v)
        assert u in ids.tolist()


def test_graph_schema_checks():
    with pytest.raises(SchemaError):
        SimilarityGraph({(1, 1): 0.5}, frozenset({1}))
    with pytest.raises(SchemaError):
        SimilarityGraph({(1, 2): 1.5}, frozenset({1}))
    with pytest.raises(SchemaError):
        SimilarityGraph({(1, 2): 0.5}, frozenset({2}))
    with pytest.raises(SchemaError):
        SimilarityGraph({(1, 2): 0.5, (2, 1): 0.4}, frozenset({1, 2}))


def test_neighbors_sorted_and_unknown(tiny_graph):
    ids, ws = tiny_graph.neighbors(2)
    assert ids.tolist() == [5, 7] and ws.tolist() == [0.7, 0.2]
    with pytest.raises(InvalidArgumentError):
        tiny_graph.neighbors(99)


def test_sample_neighbor_single_and_isolated():
    g = SimilarityGraph({(1, 2): 0.4}, frozenset({1, 3}))
    rng = make_rng(0)
    assert all(sample_neighbor(g, 1, rng) == (2, 0.4) for _ in range(20))
    assert sample_neighbor(g, 3, rng) is None
    with pytest.raises(InvalidArgumentError):
        sample_neighbor(g, 9, rng)


def test_sample_neighbor_frequencies():
    g = SimilarityGraph({(0, 1): 0.25, (0, 2): 0.75}, frozenset({0}))
    rng = make_rng(1)
    draws = [sample_neighbor(g, 0, rng)[0] for _ in range(10_000)]
    assert abs(draws.count(1) / 10_000 - 0.25) <= 0.02


def test_sample_neighbor_chi_square():
    weights = [0.15, 0.4, 0.9, 0.3, 0.55]
    g = SimilarityGraph({(0, i + 1): w for i, w in enumerate(weights)}, frozenset({0}))
    rng = make_rng(2)
    counts = np.bincount([sample_neighbor(g, 0, rng)[0] for _ in range(10_000)], minlength=6)[1:]
    expected = 10_000 * np.array(weights) / sum(weights)
    assert stats.chisquare(counts, expected).pvalue > 0.01


def test_graph_stats():
    empty = graph_stats(SimilarityGraph({}, frozenset()))
    assert empty.vertex_count == empty.edge_count == sum(empty.histogram) == 0
    g = SimilarityGraph({(1, 2): 0.15, (1, 3): 0.2, (2, 4): 1.0}, frozenset({1, 2}))
    s = graph_stats(g)
    assert s.edge_count == 3 and sum(s.histogram) == 3
    assert s.histogram[1] == 2 and s.histogram[9] == 1
    assert s.labeled_to_labeled == 1 and s.labeled_to_unlabeled == 2
    assert "edges\t3" in s.format()


def test_edge_file_roundtrip(tmp_path, tiny_graph):
    path = tmp_path / "edges.tsv"
    save_edges(path, tiny_graph)
    back = load_edges(path, tiny_graph.labeled)
    assert back.edges == tiny_graph.edges


def test_edge_file_parse_error(tmp_path):
    path = tmp_path / "edges.tsv"
    path.write_text("# u\tv\tweight\n1\t2\t0.5\n1\tx\t0.5\n")
    with pytest.raises(ParseError) as err:
        load_edges(path)
    assert err.value.line == 3


def test_click_log_roundtrip_and_malformed_lines(tmp_path):
    recs = [ClickLogRecord(CO, 1, 2, 3, 4, 5), ClickLogRecord(SIM, 2, 3, 1, 1, 9)]
    path = tmp_path / "log.tsv"
    write_click_log(path, recs)
    with open(path, "a") as fh:
        fh.write("garbage line\nco_click\t1\t2\tthree\t4\t5\n")
    back, bad = read_click_log(path)
    assert back == recs and bad == 2
