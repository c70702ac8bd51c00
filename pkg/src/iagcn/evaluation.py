"""Full-ranking top-K evaluation (Recall@K, NDCG@K) with train-item exclusion."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .batched import light_forward, pair_forward, root_features
from .data import InteractionDataset
from .graph import ITEM, USER, BipartiteGraph
from .model import Hyperparams, Snapshot, score_pair

_log = logging.getLogger(__name__)

MEMORY_BUDGET = 1 << 30  # bytes for guide-conditioned feature slabs


def recall_at_k(ranked, test_items, k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    test = set(int(i) for i in test_items)
    if not test:
        raise ValueError("empty test set")
    hits = sum(1 for i in list(ranked)[:k] if int(i) in test)
    return hits / len(test)


def ndcg_at_k(ranked, test_items, k: int) -> float:
    """Binary-relevance NDCG with the ideal DCG truncated at ``min(|test|, k)``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    test = set(int(i) for i in test_items)
    if not test:
        raise ValueError("empty test set")
    dcg = sum(1.0 / np.log2(r + 2) for r, i in enumerate(list(ranked)[:k]) if int(i) in test)
    idcg = sum(1.0 / np.log2(r + 2) for r in range(min(len(test), k)))
    return dcg / idcg


@dataclass
class RankingResult:
    users: np.ndarray
    recall: np.ndarray
    ndcg: np.ndarray
    k: int

    @property
    def mean_recall(self) -> float:
        return float(self.recall.mean()) if len(self.recall) else 0.0

    @property
    def mean_ndcg(self) -> float:
        return float(self.ndcg.mean()) if len(self.ndcg) else 0.0


def _combine_all(stacks, beta):
    return np.tensordot(stacks, beta, axes=(1, 0))


def _self_guided(graph, emb, side, ids, hp, beta, budget):
    """``e*_r | r`` for the given roots, chunked over guides."""
    d = emb[0].shape[1]
    n_other = graph.size(1 - side)
    chunk = max(1, int(budget // max(1, n_other * d * 8 * 3)))
    out = np.empty((len(ids), d))
    for s in range(0, len(ids), chunk):
        part = ids[s : s + chunk]
        ps = pair_forward(graph, emb, side, emb[side][part], part, np.arange(len(part)), hp.layers, hp.tau)
        out[s : s + chunk] = _combine_all(ps.stacks, beta)
    return out


def score_matrix(
    snap: Snapshot,
    graph: BipartiteGraph,
    hp: Hyperparams,
    users=None,
    budget: int = MEMORY_BUDGET,
) -> np.ndarray:
    """Scores of ``users`` (default all) against every item, full-expansion trees."""
    users = np.arange(graph.num_users) if users is None else np.asarray(users, dtype=np.int64)
    emb = snap.table.emb
    beta = snap.weights.beta
    K = hp.layers
    if hp.exclude_target:
        return np.array([[score_pair(int(u), i, snap.table, graph, hp, beta=snap.weights) for i in range(graph.num_items)] for u in users])
    if K == 0:
        return emb[USER][users] @ emb[ITEM].T
    if hp.guide_mode == "lightgcn_norm":
        lp = light_forward(graph, emb, K)
        return _combine_all(lp.stacks[USER][users], beta) @ _combine_all(lp.stacks[ITEM], beta).T
    if hp.guide_mode == "self_guided":
        eu = _self_guided(graph, emb, USER, users, hp, beta, budget)
        ei = _self_guided(graph, emb, ITEM, np.arange(graph.num_items), hp, beta, budget)
        return eu @ ei.T
    # interactive: user trees guided by each item, item trees guided by each user
    d = emb[0].shape[1]
    m, n = graph.num_items, graph.num_users
    out = np.empty((len(users), m))
    item_side = root_features(graph, emb, ITEM, emb[USER][users], K, hp.tau, beta)  # (m, U, d)
    chunk = max(1, int(budget // max(1, n * d * 8 * 3)))
    for s in range(0, m, chunk):
        cols = np.arange(s, min(m, s + chunk))
        user_side = root_features(graph, emb, USER, emb[ITEM][cols], K, hp.tau, beta)[users]  # (U, C, d)
        out[:, cols] = np.einsum("ucd,cud->uc", user_side, item_side[cols])
    return out


def top_k_from_scores(scores: np.ndarray, exclude: np.ndarray, k: int) -> np.ndarray:
    """Descending by score, ties by ascending item id, ``exclude`` ids removed."""
    s = np.array(scores, dtype=np.float64)
    s[exclude] = -np.inf
    order = np.argsort(-s, kind="stable")
    keep = len(s) - len(np.unique(exclude))
    return order[: min(k, keep)]


def rank_items(u: int, snap: Snapshot, graph: BipartiteGraph, hp: Hyperparams, k: int = 20) -> np.ndarray:
    scores = score_matrix(snap, graph, hp, users=[u])[0]
    return top_k_from_scores(scores, graph.neighbors(USER, u), k)


def evaluate(
    snap: Snapshot,
    dataset: InteractionDataset,
    graph: BipartiteGraph,
    hp: Hyperparams,
    k: int = 20,
    budget: int = MEMORY_BUDGET,
) -> RankingResult:
    """Macro Recall@k / NDCG@k over users with a nonempty test set."""
    tests = dataset.test_items_by_user()
    users = np.array([u for u, t in enumerate(tests) if len(t)], dtype=np.int64)
    d = snap.table.dim
    per_chunk = max(1, int(budget // max(1, graph.num_items * d * 8 * 2)))
    rec, nd = [], []
    for s in range(0, len(users), per_chunk):
        part = users[s : s + per_chunk]
        scores = score_matrix(snap, graph, hp, part, budget)
        for row, u in zip(scores, part):
            ranked = top_k_from_scores(row, graph.neighbors(USER, u), k)
            rec.append(recall_at_k(ranked, tests[u], k))
            nd.append(ndcg_at_k(ranked, tests[u], k))
    return RankingResult(users, np.array(rec), np.array(nd), k)


def evaluate_sampled(
    snap: Snapshot,
    dataset: InteractionDataset,
    graph: BipartiteGraph,
    hp: Hyperparams,
    num_negatives: int,
    seed: int,
    k: int = 20,
) -> RankingResult:
    """Rank each user's test items against ``num_negatives`` sampled unobserved items.

    Cheap stand-in for full ranking on large graphs; not comparable with
    full-ranking numbers.
    """
    rng = np.random.default_rng(seed)
    tests = dataset.test_items_by_user()
    seen = [set(graph.neighbors(USER, u).tolist()) | set(t.tolist()) for u, t in enumerate(tests)]
    users = np.array([u for u, t in enumerate(tests) if len(t)], dtype=np.int64)
    rec, nd = [], []
    beta = snap.weights.beta
    emb = snap.table.emb
    for u in users:
        pool = np.array([i for i in range(graph.num_items) if i not in seen[u]], dtype=np.int64)
        negs = rng.choice(pool, size=min(num_negatives, len(pool)), replace=False) if len(pool) else pool
        cand = np.sort(np.concatenate([tests[u], negs]))
        if hp.guide_mode == "interactive" and hp.layers > 0:
            pu = pair_forward(graph, emb, USER, emb[ITEM][cand], np.full(len(cand), u), np.arange(len(cand)), hp.layers, hp.tau)
            pi = pair_forward(graph, emb, ITEM, emb[USER][[u]], cand, np.zeros(len(cand), np.int64), hp.layers, hp.tau)
            scores = np.einsum("cd,cd->c", _combine_all(pu.stacks, beta), _combine_all(pi.stacks, beta))
        else:
            full = score_matrix(snap, graph, hp, users=[u])[0]
            scores = full[cand]
        order = np.argsort(-scores, kind="stable")
        ranked = cand[order]
        rec.append(recall_at_k(ranked, tests[u], k))
        nd.append(ndcg_at_k(ranked, tests[u], k))
    return RankingResult(users, np.array(rec), np.array(nd), k)
