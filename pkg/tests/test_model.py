import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iagcn.graph import ITEM, USER, NodeRef, build_graph, sample_tree
from iagcn.model import (
    EmbeddingTable,
    Hyperparams,
    LayerWeights,
    Snapshot,
    SnapshotError,
    aggregate_level,
    attention_weights,
    combine,
    count_parameters,
    init_embeddings,
    lightgcn_weights,
    load_snapshot,
    propagate,
    save_snapshot,
    score_pair,
    segment_softmax,
    simplex,
    xavier_bound,
)
from conftest import random_dataset
from oracles import adjacency_lists, dense_lightgcn, recursive_feature


# -- initialization ------------------------------------------------------------


def test_xavier_bound_d64():
    assert xavier_bound(64) == pytest.approx(0.2165, abs=1e-4)
    t = init_embeddings(50, 60, 64, seed=1)
    assert np.abs(t.user_emb).max() <= xavier_bound(64)
    assert np.abs(t.item_emb).max() <= xavier_bound(64)


def test_init_same_seed_identical():
    a, b = init_embeddings(5, 7, 8, 3), init_embeddings(5, 7, 8, 3)
    assert np.array_equal(a.user_emb, b.user_emb) and np.array_equal(a.item_emb, b.item_emb)


def test_init_mean_near_zero():
    t = init_embeddings(7813, 7812, 64, seed=0)
    entries = np.concatenate([t.user_emb.ravel(), t.item_emb.ravel()])
    assert entries.size >= 10**6
    assert abs(entries.mean()) < 1e-3


# -- attention -------------------------------------------------------------------


def test_attention_single_child():
    assert attention_weights(np.ones(4), np.ones((1, 4)), 1.0).tolist() == [1.0]


def test_attention_zero_guide_is_exactly_uniform():
    rng = np.random.default_rng(0)
    for n in (2, 3, 7):
        w = attention_weights(np.zeros(5), rng.normal(size=(n, 5)), 0.3)
        assert np.all(w == 1.0 / n)


def test_attention_two_term_softmax():
    w = attention_weights(np.array([1.0, 0.0]), np.eye(2), 1.0)
    assert w == pytest.approx([0.73106, 0.26894], abs=1e-5)


def test_attention_rejects_non_finite_and_bad_tau():
    with pytest.raises(ValueError):
        attention_weights(np.array([np.nan, 0.0]), np.eye(2), 1.0)
    with pytest.raises(ValueError):
        attention_weights(np.ones(2), np.eye(2), 0.0)
    with pytest.raises(ValueError):
        attention_weights(np.ones(2), np.zeros((0, 2)), 1.0)


def test_attention_survives_huge_logits():
    w = attention_weights(np.array([1e3, 0.0]), np.array([[1e3, 0.0], [0.0, 1.0]]), 1.0)
    assert w.tolist() == [1.0, 0.0]


def test_temperature_flattens_ratio_toward_one():
    guide, kids = np.array([1.0, 0.0]), np.array([[2.0, 0.0], [1.0, 0.0]])
    ratios = [(lambda w: w[0] / w[1])(attention_weights(guide, kids, tau)) for tau in (0.5, 1.0, 10.0, 1e6)]
    assert all(a > b for a, b in zip(ratios, ratios[1:]))
    assert all(r > 1.0 for r in ratios)
    assert ratios[-1] == pytest.approx(1.0, abs=1e-5)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 30), st.floats(0.05, 20.0))
def test_attention_sums_to_one(seed, n, tau):
    rng = np.random.default_rng(seed)
    w = attention_weights(rng.normal(size=6) * 3, rng.normal(size=(n, 6)) * 3, tau)
    assert abs(w.sum() - 1.0) <= 1e-12
    assert np.all(w >= 0) and np.all(w <= 1)


def test_segment_softmax_matches_per_parent_softmax():
    rng = np.random.default_rng(2)
    offsets = np.array([0, 3, 3, 4, 9])
    s = rng.normal(size=9)
    out = segment_softmax(s, offsets)
    for a, b in zip(offsets[:-1], offsets[1:]):
        if b > a:
            e = np.exp(s[a:b] - s[a:b].max())
            assert out[a:b] == pytest.approx(e / e.sum(), abs=1e-15)


# -- LightGCN weights and aggregation ------------------------------------------


def _star(parent_deg, child_degs):
    """Item 0 linked to ``parent_deg`` users; user j additionally gets ``child_degs[j] - 1`` private items."""
    from iagcn.data import build_dataset

    edges, nxt = [], 1
    for j in range(parent_deg):
        edges.append((j, 0))
        for _ in range(child_degs[j] - 1):
            edges.append((j, nxt))
            nxt += 1
    return build_graph(build_dataset(edges, [], parent_deg, nxt))


def test_lightgcn_weight_unit():
    g = _star(1, [1])
    assert lightgcn_weights(g, NodeRef(ITEM, 0), [0]).tolist() == [1.0]


def test_lightgcn_weight_four_nine():
    g = _star(4, [9, 1, 1, 1])
    assert lightgcn_weights(g, NodeRef(ITEM, 0), [0])[0] == pytest.approx(1 / 6)


def test_lightgcn_weights_need_not_sum_to_one():
    g = _star(2, [1, 1])
    w = lightgcn_weights(g, NodeRef(ITEM, 0), [0, 1])
    assert w.sum() == pytest.approx(2 / np.sqrt(2))


def test_aggregate_examples():
    v = np.array([1.0, -2.0, 3.0])
    assert aggregate_level([v], [1.0]).tolist() == v.tolist()
    assert aggregate_level([v, v], [0.5, 0.5]).tolist() == v.tolist()
    w = attention_weights(np.array([1.0, 0.0, 0.0]), np.eye(3)[:2], 1.0)
    assert aggregate_level(np.eye(3)[:2], w) == pytest.approx([0.73106, 0.26894, 0.0], abs=1e-5)
    with pytest.raises(ValueError):
        aggregate_level([v], [0.5, 0.5])


# -- propagation ---------------------------------------------------------------


def _hp(mode, K, d=4, **kw):
    return Hyperparams(dim=d, layers=K, guide_mode=mode, **kw)


def test_propagate_depth_zero(toy_graph):
    t = init_embeddings(2, 3, 4, 0)
    tree = sample_tree(toy_graph, NodeRef(USER, 0), 0)
    stack = propagate(tree, NodeRef(ITEM, 1), t, toy_graph, _hp("interactive", 0))
    assert np.array_equal(stack, t.user_emb[:1])


def test_propagate_lightgcn_k1_toy_against_dense(toy_dataset, toy_graph):
    t = init_embeddings(2, 3, 4, 5)
    tree = sample_tree(toy_graph, NodeRef(USER, 0), 1)
    stack = propagate(tree, None, t, toy_graph, _hp("lightgcn_norm", 1))
    hand = t.item_emb[1] / np.sqrt(2 * 1) + t.item_emb[2] / np.sqrt(2 * 2)
    assert np.allclose(stack[1], hand, atol=1e-12, rtol=0)
    eu, _ = dense_lightgcn(2, 3, toy_dataset.train_edges, t.user_emb, t.item_emb, 1, beta=[0.0, 1.0])
    assert np.allclose(stack[1], eu[0], atol=1e-12, rtol=0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["interactive", "self_guided"]))
def test_propagate_attention_k2_against_recursion(seed, mode):
    ds = random_dataset(seed, 6, 6)
    g = build_graph(ds)
    rng = np.random.default_rng(seed)
    t = init_embeddings(ds.num_users, ds.num_items, 4, rng)
    adj = adjacency_lists(ds.num_users, ds.num_items, ds.train_edges)
    u, i = int(rng.integers(ds.num_users)), int(rng.integers(ds.num_items))
    tau = 0.7
    hp = _hp(mode, 2, tau=tau)
    for side, root, other in ((USER, u, NodeRef(ITEM, i)), (ITEM, i, NodeRef(USER, u))):
        tree = sample_tree(g, NodeRef(side, root), 2)
        stack = propagate(tree, other, t, g, hp)
        guide = t.emb[other.side][other.index] if mode == "interactive" else t.emb[side][root]
        for k in range(3):
            expect = recursive_feature(adj, t.emb, side, root, k, guide, tau)
            assert np.allclose(stack[k], expect, atol=1e-12, rtol=0)


def test_propagate_depth_mismatch(toy_graph):
    tree = sample_tree(toy_graph, NodeRef(USER, 0), 1)
    with pytest.raises(ValueError, match="depth"):
        propagate(tree, NodeRef(ITEM, 1), init_embeddings(2, 3, 4, 0), toy_graph, _hp("interactive", 2))


def test_interactive_guide_must_be_other_side(toy_graph):
    tree = sample_tree(toy_graph, NodeRef(USER, 0), 1)
    with pytest.raises(ValueError):
        propagate(tree, NodeRef(USER, 1), init_embeddings(2, 3, 4, 0), toy_graph, _hp("interactive", 1))


# -- combination -------------------------------------------------------------------


def test_combine_examples():
    a, b, c = np.eye(3)
    assert combine(np.array([a]), LayerWeights.uniform(0)).tolist() == a.tolist()
    assert LayerWeights.uniform(2).beta == pytest.approx([1 / 3, 1 / 3, 1 / 3])
    assert combine(np.array([a, b]), np.array([1.0, 0.0])).tolist() == a.tolist()
    assert combine(np.array([a, b]), LayerWeights.from_beta([1.0, 0.0])).tolist() == a.tolist()
    with pytest.raises(ValueError):
        combine(np.array([a, b, c]), np.array([0.5, 0.5]))


@given(st.lists(st.floats(-30, 30), min_size=1, max_size=8))
def test_simplex_constraints_hold_by_construction(logits):
    beta = simplex(np.array(logits))
    assert np.all(beta >= 0)
    assert abs(beta.sum() - 1.0) < 1e-12


# -- scoring ---------------------------------------------------------------------


@pytest.mark.parametrize("mode", ["interactive", "self_guided", "lightgcn_norm"])
def test_score_depth_zero_is_inner_product(small_synth, small_graph, mode):
    t = init_embeddings(small_synth.num_users, small_synth.num_items, 8, 1)
    for u, i in [(0, 0), (3, 17), (29, 5)]:
        assert score_pair(u, i, t, small_graph, _hp(mode, 0, 8)) == t.user_emb[u] @ t.item_emb[i]


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 3))
def test_score_lightgcn_matches_dense_oracle(seed, K):
    ds = random_dataset(seed, 7, 7)
    g = build_graph(ds)
    t = init_embeddings(ds.num_users, ds.num_items, 5, seed)
    eu, ei = dense_lightgcn(ds.num_users, ds.num_items, ds.train_edges, t.user_emb, t.item_emb, K)
    for u in range(ds.num_users):
        for i in range(ds.num_items):
            assert abs(score_pair(u, i, t, g, _hp("lightgcn_norm", K, 5)) - eu[u] @ ei[i]) < 1e-10


def test_identical_users_on_symmetric_graph_score_identically():
    from iagcn.data import build_dataset

    ds = build_dataset([(0, 0), (0, 1), (1, 0), (1, 1), (2, 1), (2, 2)], [], 3, 3)
    g = build_graph(ds)
    t = init_embeddings(3, 3, 4, 9)
    t.user_emb[1] = t.user_emb[0]
    hp = _hp("interactive", 2)
    for i in range(3):
        assert score_pair(0, i, t, g, hp) == pytest.approx(score_pair(1, i, t, g, hp), abs=1e-15)


def test_parameter_parity():
    t = init_embeddings(10, 12, 8, 0)
    light = count_parameters(t, LayerWeights.uniform(2))
    learned = count_parameters(t, LayerWeights.uniform(2, learned=True))
    assert light == 10 * 8 + 12 * 8
    assert light <= learned <= light + 3


@pytest.mark.parametrize(
    "kwargs",
    [{"tau": 0.0}, {"dim": 0}, {"layers": -1}, {"l2": -1.0}, {"guide_mode": "gat"}, {"beta_mode": "max"}, {"fanout": 0}],
)
def test_hyperparam_domain(kwargs):
    with pytest.raises(ValueError):
        Hyperparams(**kwargs)


# -- snapshot file ---------------------------------------------------------------


def test_snapshot_round_trip(tmp_path):
    t = init_embeddings(4, 6, 3, 2)
    w = LayerWeights.from_beta([0.5, 0.3, 0.2])
    save_snapshot(tmp_path / "s", Snapshot(t, w))
    raw = (tmp_path / "s").read_bytes()
    assert raw.startswith(b"IAGCN1 4 6 3 2\n")
    assert len(raw) == len(b"IAGCN1 4 6 3 2\n") + 8 * (4 * 3 + 6 * 3 + 3)
    back = load_snapshot(tmp_path / "s")
    assert np.array_equal(back.table.user_emb, t.user_emb)
    assert np.array_equal(back.table.item_emb, t.item_emb)
    assert back.weights.beta == pytest.approx([0.5, 0.3, 0.2], abs=1e-15)


def test_snapshot_payload_is_little_endian_f64(tmp_path):
    t = EmbeddingTable(np.array([[1.5]]), np.array([[-2.0]]))
    save_snapshot(tmp_path / "s", Snapshot(t, LayerWeights.uniform(0)))
    body = (tmp_path / "s").read_bytes().split(b"\n", 1)[1]
    assert np.frombuffer(body, "<f8").tolist() == [1.5, -2.0, 1.0]


@pytest.mark.parametrize("payload", [b"garbage", b"IAGCN2 1 1 1 0\n" + b"\0" * 24, b"IAGCN1 1 1 1 0\n" + b"\0" * 8])
def test_snapshot_rejects_malformed(tmp_path, payload):
    (tmp_path / "s").write_bytes(payload)
    with pytest.raises(SnapshotError):
        load_snapshot(tmp_path / "s")
