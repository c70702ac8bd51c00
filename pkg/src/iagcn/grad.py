"""Reverse-mode gradients of the BPR triplet loss over recorded tree passes."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .graph import ITEM, USER, BipartiteGraph, NodeRef
from .model import (
    EmbeddingTable,
    Hyperparams,
    LayerWeights,
    TreeTape,
    combine,
    pair_trees,
    propagate,
    segment_sum,
)


class Triplet(NamedTuple):
    u: int
    i_pos: int
    i_neg: int


class GradientBuffer:
    """Sparse row gradients for both embedding matrices plus dense beta-logit gradients.

    Rows are kept as appended ``(ids, values)`` chunks and coalesced on read,
    so a row appears iff some tree touched it (even with a zero value).
    """

    def __init__(self, dim: int, num_logits: int):
        self.dim = dim
        self.beta_logits = np.zeros(num_logits)
        self._parts: tuple[list, list] = ([], [])

    def add(self, side: int, ids, values):
        ids = np.atleast_1d(np.asarray(ids, dtype=np.int64))
        values = np.asarray(values, dtype=np.float64).reshape(len(ids), self.dim)
        self._parts[side].append((ids, values))

    def rows(self, side: int) -> tuple[np.ndarray, np.ndarray]:
        parts = self._parts[side]
        if not parts:
            return np.zeros(0, np.int64), np.zeros((0, self.dim))
        ids = np.concatenate([p[0] for p in parts])
        vals = np.concatenate([p[1] for p in parts])
        uniq, inv = np.unique(ids, return_inverse=True)
        out = np.zeros((len(uniq), self.dim))
        np.add.at(out, inv, vals)
        self._parts[side][:] = [(uniq, out)]
        return uniq, out

    def dense(self, side: int, size: int) -> np.ndarray:
        ids, vals = self.rows(side)
        out = np.zeros((size, self.dim))
        out[ids] = vals
        return out

    def scale(self, factor: float) -> "GradientBuffer":
        for side in (USER, ITEM):
            self._parts[side][:] = [(i, v * factor) for i, v in self._parts[side]]
        self.beta_logits = self.beta_logits * factor
        return self

    def merge(self, other: "GradientBuffer") -> "GradientBuffer":
        for side in (USER, ITEM):
            self._parts[side].extend(other._parts[side])
        self.beta_logits = self.beta_logits + other.beta_logits
        return self

    def is_finite(self) -> bool:
        return all(np.isfinite(self.rows(s)[1]).all() for s in (USER, ITEM)) and np.isfinite(self.beta_logits).all()


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


def _softmax_backward(alpha: np.ndarray, d_alpha: np.ndarray, offsets: np.ndarray, tau: float) -> np.ndarray:
    """Pull a gradient on segment-softmax outputs back to the pre-temperature scores."""
    seg = np.repeat(np.arange(len(offsets) - 1), np.diff(offsets))
    inner = segment_sum(alpha * d_alpha, offsets)[seg]
    return alpha * (d_alpha - inner) / tau


def tree_backward(tape: TreeTape, d_stack: np.ndarray, table: EmbeddingTable, buf: GradientBuffer):
    """Accumulate d(loss)/d(e0) for every position of one recorded tree."""
    tree = tape.tree
    d_feats = np.asarray(d_stack, dtype=np.float64)[None]
    d_guide = np.zeros(table.dim) if tape.guide is not None else None
    for level, rec in enumerate(tape.levels):
        buf.add(rec.parent_side, rec.parent_ids, d_feats[:, 0])
        d_up = d_feats[:, 1:][rec.parent_of]  # (C, orders, d)
        d_child = rec.weights[:, None, None] * d_up
        if rec.attention and len(rec.child_ids):
            d_w = np.einsum("cko,cko->c", d_up, rec.child_feats)
            ds = _softmax_backward(rec.weights, d_w, rec.offsets, tape.tau)
            d_child[:, 0] += ds[:, None] * tape.guide_vec
            d_guide += ds @ rec.child_feats[:, 0]
        d_feats = d_child
    leaf = tree.depth
    buf.add(tree.side(leaf), tree.nodes[leaf], d_feats[:, 0])
    if d_guide is not None:
        buf.add(tape.guide.side, [tape.guide.index], d_guide[None])


@dataclass
class TripletForward:
    """Everything the backward pass replays: four tapes, stacks, combined vectors, scores."""

    triplet: Triplet
    tapes: tuple  # (user|pos, pos|user, user|neg, neg|user)
    stacks: tuple
    beta: np.ndarray
    scores: tuple
    loss: float
    anchors: tuple  # 0-order rows of u, i_pos, i_neg


def triplet_trees(graph: BipartiteGraph, t: Triplet, hp: Hyperparams, rng=None):
    return pair_trees(graph, t.u, t.i_pos, hp, rng) + pair_trees(graph, t.u, t.i_neg, hp, rng)


def forward_triplet(
    t: Triplet,
    table: EmbeddingTable,
    graph: BipartiteGraph,
    hp: Hyperparams,
    weights: LayerWeights,
    trees=None,
    rng=None,
) -> TripletForward:
    trees = trees if trees is not None else triplet_trees(graph, t, hp, rng)
    guides = (NodeRef(ITEM, t.i_pos), NodeRef(USER, t.u), NodeRef(ITEM, t.i_neg), NodeRef(USER, t.u))
    out = [propagate(tr, g, table, graph, hp, record=True) for tr, g in zip(trees, guides)]
    stacks = tuple(o[0] for o in out)
    tapes = tuple(o[1] for o in out)
    beta = weights.beta
    comb = [combine(s, beta) for s in stacks]
    y_pos = comb[0] @ comb[1]
    y_neg = comb[2] @ comb[3]
    anchors = (table.user_emb[t.u], table.item_emb[t.i_pos], table.item_emb[t.i_neg])
    reg = sum(a @ a for a in anchors)
    loss = softplus(-(y_pos - y_neg)) + hp.l2 * reg
    return TripletForward(t, tapes, stacks, beta, (y_pos, y_neg), loss, anchors)


def backward_triplet(
    fwd: TripletForward,
    table: EmbeddingTable,
    hp: Hyperparams,
) -> GradientBuffer:
    """Exact gradient of ``softplus(-(y+ - y-)) + l2 * (|e_u|^2 + |e_i+|^2 + |e_i-|^2)``."""
    if fwd.tapes is None or len(fwd.tapes) != 4 or any(tp is None for tp in fwd.tapes):
        raise ValueError("forward tape is incomplete")
    for tp in fwd.tapes:
        if len(tp.levels) != tp.tree.depth:
            raise ValueError("forward tape is missing level records")
    t = fwd.triplet
    beta = fwd.beta
    buf = GradientBuffer(table.dim, len(beta))
    delta = float(fwd.scores[0] - fwd.scores[1])
    g = -float(sigmoid(-delta))  # d loss / d y_pos; y_neg gets -g
    comb = [combine(s, beta) for s in fwd.stacks]
    d_beta = np.zeros(len(beta))
    for (a, b), dy in (((0, 1), g), ((2, 3), -g)):
        for x, other in ((a, comb[b]), (b, comb[a])):
            d_comb = dy * other
            d_beta += fwd.stacks[x] @ d_comb
            tree_backward(fwd.tapes[x], beta[:, None] * d_comb[None], table, buf)
    buf.beta_logits += beta * (d_beta - beta @ d_beta)
    if hp.l2:
        buf.add(USER, [t.u], 2 * hp.l2 * fwd.anchors[0][None])
        buf.add(ITEM, [t.i_pos, t.i_neg], 2 * hp.l2 * np.stack(fwd.anchors[1:]))
    return buf


def triplet_loss(t, table, graph, hp, weights, trees) -> float:
    return forward_triplet(t, table, graph, hp, weights, trees=trees).loss


def finite_diff_check(
    t: Triplet,
    table: EmbeddingTable,
    graph: BipartiteGraph,
    hp: Hyperparams,
    epsilon: float = 1e-6,
    weights: LayerWeights | None = None,
    trees=None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Every touched embedding coordinate and every beta logit is perturbed by
    ``+-epsilon`` with the trees held fixed. Sampled trees must be passed in
    via ``trees``. The perturbed losses are evaluated in ``np.longdouble``:
    in plain float64 the cancellation error of ``(up - down) / 2eps`` swamps
    coordinates whose gradient is below ~1e-6.
    """
    if not 1e-7 <= epsilon <= 1e-4:
        raise ValueError("epsilon must lie in [1e-7, 1e-4]")
    if table.user_emb.dtype != np.float64 or table.item_emb.dtype != np.float64:
        raise TypeError("finite-difference check needs float64 embeddings")
    if trees is None:
        if not hp.full_fanout:
            raise ValueError("sampled trees must be frozen: pass trees= for bounded fanout")
        trees = triplet_trees(graph, t, hp)
    weights = weights.copy() if weights is not None else LayerWeights.uniform(hp.layers)
    fwd = forward_triplet(t, table, graph, hp, weights, trees=trees)
    buf = backward_triplet(fwd, table, hp)
    table = EmbeddingTable(table.user_emb.astype(np.longdouble), table.item_emb.astype(np.longdouble))
    weights = LayerWeights(weights.logits.astype(np.longdouble), weights.learned)
    eps = np.longdouble(epsilon)

    def loss():
        return triplet_loss(t, table, graph, hp, weights, trees)

    def rel(a, c):
        return abs(a - c) / max(abs(a), abs(c), 1e-12)

    worst = 0.0
    for side in (USER, ITEM):
        ids, grads = buf.rows(side)
        mat = table.emb[side]
        for r, row in enumerate(ids):
            for j in range(table.dim):
                keep = mat[row, j]
                mat[row, j] = keep + eps
                up = loss()
                mat[row, j] = keep - eps
                down = loss()
                mat[row, j] = keep
                worst = max(worst, rel(grads[r, j], float((up - down) / (2 * eps))))
    for j in range(len(weights.logits)):
        keep = weights.logits[j]
        weights.logits[j] = keep + eps
        up = loss()
        weights.logits[j] = keep - eps
        down = loss()
        weights.logits[j] = keep
        worst = max(worst, rel(buf.beta_logits[j], float((up - down) / (2 * eps))))
    return worst
