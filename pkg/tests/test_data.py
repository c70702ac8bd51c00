import io
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iagcn.data import (
    DataWarning,
    SplitFormatError,
    build_dataset,
    generate_synthetic,
    load_dataset,
    parse_split_file,
    serialize_split,
    subsample_top_users,
    write_dataset,
)


def test_parse_line_with_items():
    assert parse_split_file(io.StringIO("0 3 7\n")) == [(0, 3), (0, 7)]


def test_parse_user_only_line():
    assert parse_split_file(io.StringIO("5\n")) == []


def test_parse_crlf_and_multiple_spaces():
    assert parse_split_file(io.StringIO("0  1   2\r\n1 4\r\n\r\n")) == [(0, 1), (0, 2), (1, 4)]


@pytest.mark.parametrize("text,line", [("0 1\n1 x\n", 2), ("0 1.5\n", 1), ("0 -1\n", 1)])
def test_parse_errors_name_the_line(text, line):
    with pytest.raises(SplitFormatError, match=f"line {line}"):
        parse_split_file(io.StringIO(text))


@given(st.dictionaries(st.integers(0, 50), st.lists(st.integers(0, 80), max_size=6), max_size=10))
def test_parse_serialize_round_trip(by_user):
    edges = [(u, i) for u, items in sorted(by_user.items()) for i in items]
    text = serialize_split(edges)
    assert parse_split_file(io.StringIO(text)) == edges
    assert parse_split_file(io.StringIO(serialize_split(parse_split_file(io.StringIO(text))))) == edges


def test_toy_two_line_file(tmp_path):
    (tmp_path / "train.txt").write_text("0 1\n1 0 1\n")
    (tmp_path / "test.txt").write_text("")
    ds = load_dataset(tmp_path / "train.txt", tmp_path / "test.txt")
    assert (ds.num_users, ds.num_items, len(ds.train_edges)) == (2, 2, 3)


def test_missing_file_names_path(tmp_path):
    with pytest.raises(FileNotFoundError, match="nowhere.txt"):
        load_dataset(tmp_path / "nowhere.txt", tmp_path / "nowhere.txt")


def test_duplicates_and_overlap_are_repaired_with_warnings():
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        ds = build_dataset([(0, 1), (0, 1), (1, 0)], [(0, 1), (1, 1)])
    kinds = [w.category for w in caught]
    assert kinds.count(DataWarning) == 2
    assert len(ds.train_edges) == 2
    assert ds.test_edges.tolist() == [[1, 1]]
    ds.validate()


def test_empty_train_is_fatal():
    with pytest.raises(ValueError, match="empty"):
        build_dataset([], [(0, 0)])


def test_edges_are_read_only(small_synth):
    with pytest.raises(ValueError):
        small_synth.train_edges[0, 0] = 5


def test_synthetic_pure_blocks():
    ds = generate_synthetic(20, 20, 2, 1.0, 0.0, seed=3)
    edges = np.concatenate([ds.train_edges, ds.test_edges])
    for u in range(20):
        items = np.sort(edges[edges[:, 0] == u, 1])
        block = u // 10
        assert items.tolist() == list(range(10 * block, 10 * block + 10))


def test_synthetic_is_byte_identical():
    a = generate_synthetic(100, 100, 2, 0.5, 0.05, seed=7)
    b = generate_synthetic(100, 100, 2, 0.5, 0.05, seed=7)
    assert a.train_edges.tobytes() == b.train_edges.tobytes()
    assert a.test_edges.tobytes() == b.test_edges.tobytes()


def test_synthetic_within_block_rate():
    ds = generate_synthetic(100, 100, 2, 0.5, 0.05, seed=7)
    edges = np.concatenate([ds.train_edges, ds.test_edges])
    inside = (edges[:, 0] // 50) == (edges[:, 1] // 50)
    rate = inside.sum() / (2 * 50 * 50)
    assert abs(rate - 0.5) <= 0.1


def test_synthetic_split_is_eighty_twenty_per_user():
    ds = generate_synthetic(60, 60, 3, 0.5, 0.05, seed=1)
    train_deg = np.bincount(ds.train_edges[:, 0], minlength=60)
    test_deg = np.bincount(ds.test_edges[:, 0], minlength=60)
    total = train_deg + test_deg
    assert np.all(train_deg >= 1)
    assert np.all(np.abs(test_deg - 0.2 * total) <= 1)


def test_synthetic_sparse_users_keep_a_train_edge():
    ds = generate_synthetic(40, 40, 2, 0.03, 0.0, seed=5)
    ds.validate()
    touched = np.unique(np.concatenate([ds.train_edges[:, 0], ds.test_edges[:, 0]]))
    assert set(touched) <= set(np.unique(ds.train_edges[:, 0]))


@pytest.mark.parametrize(
    "args",
    [(10, 10, 3, 0.5, 0.1), (10, 10, 2, 0.1, 0.5), (10, 10, 2, 1.5, 0.0), (10, 10, 0, 0.5, 0.1)],
)
def test_synthetic_domain_errors(args):
    with pytest.raises(ValueError):
        generate_synthetic(*args, seed=0)


def test_write_then_load_round_trip(tmp_path, small_synth):
    write_dataset(small_synth, tmp_path / "tr.txt", tmp_path / "te.txt")
    back = load_dataset(tmp_path / "tr.txt", tmp_path / "te.txt")
    assert np.array_equal(back.train_edges, small_synth.train_edges)
    assert np.array_equal(back.test_edges, small_synth.test_edges)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 9), st.integers(0, 9)), min_size=1, max_size=40),
       st.lists(st.tuples(st.integers(0, 9), st.integers(0, 9)), max_size=20))
def test_built_datasets_satisfy_invariants(train, test):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DataWarning)
        ds = build_dataset(train, test)
    ds.validate()
    keys = set(map(tuple, ds.train_edges.tolist()))
    assert len(keys) == len(ds.train_edges)
    assert not keys & set(map(tuple, ds.test_edges.tolist()))


def test_subsample_keeps_most_active_users(small_synth):
    sub = subsample_top_users(small_synth, 10, seed=0)
    sub.validate()
    assert sub.num_users == 10
    assert len(sub.train_edges) + len(sub.test_edges) > 0
