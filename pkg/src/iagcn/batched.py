"""Vectorized full-fanout propagation for many (root, guide) pairs.

With every neighbor expanded, the k-order feature of a tree position depends
only on (node, guide, k), so trees collapse into guide-conditioned graph
propagation::

    w[c, g]      = exp(<e0_c, e0_g> / tau)
    X^{k+1}[p,g] = sum_{c in N(p)} w[c, g] X^k[c, g] / sum_{c in N(p)} w[c, g]

Each layer over a guide set is one adjacency matmul against an
``(N, G*d)`` slab. Root features for specific pairs are gathered from the
layer below, so only orders the roots need are materialized in full. The
backward pass mirrors the forward by hand.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .graph import ITEM, USER, BipartiteGraph
from .model import segment_softmax, segment_sum

_log = logging.getLogger(__name__)

DENSE_LIMIT = 25_000_000


def _adjacency(graph: BipartiteGraph, parent_side: int):
    """Parent-by-child adjacency, dense when small enough for BLAS to win."""
    cache = graph.__dict__.setdefault("_batched_adj", {})
    if parent_side not in cache:
        dense = graph.num_users * graph.num_items <= DENSE_LIMIT and graph.density() > 0.01
        a = graph.adjacency
        if dense:
            a = a.toarray()
        cache[parent_side] = a if parent_side == USER else (a.T if dense else a.T.tocsr())
    return cache[parent_side]


def _mm(a, x):
    return a @ x


def _tmm(a, x):
    return a.T @ x


def _neighbor_entries(graph: BipartiteGraph, side: int, roots: np.ndarray):
    """Flattened neighbor lists of ``roots``: (pair index, child id, offsets)."""
    off = graph.offsets[side]
    starts = off[roots]
    counts = off[roots + 1] - starts
    offsets = np.zeros(len(roots) + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    total = int(offsets[-1])
    pair = np.repeat(np.arange(len(roots)), counts)
    pos = np.arange(total) - offsets[:-1][pair] + starts[pair]
    return pair, graph.values[side][pos], offsets


def _plan(root_side: int, K: int, root_orders_full: bool) -> list[tuple[int, int]]:
    """(side, order) slabs needed, in build order."""
    need = set()
    if root_orders_full:
        need.update((root_side, k) for k in range(1, K + 1))
    else:
        need.update((1 - root_side, k - 1) for k in range(2, K + 1))
    frontier = list(need)
    while frontier:
        s, k = frontier.pop()
        if k - 1 >= 1 and (1 - s, k - 1) not in need:
            need.add((1 - s, k - 1))
            frontier.append((1 - s, k - 1))
    return sorted(need, key=lambda sk: (sk[1], sk[0]))


@dataclass
class _Slabs:
    emb: tuple
    guides: np.ndarray
    tau: float
    S: dict = field(default_factory=dict)
    w: dict = field(default_factory=dict)
    Z: dict = field(default_factory=dict)
    Zinv: dict = field(default_factory=dict)
    X: dict = field(default_factory=dict)
    order: list = field(default_factory=list)

    def weights(self, side: int):
        if side not in self.w:
            s = self.emb[side] @ self.guides.T / self.tau
            # per-guide shift; every parent's softmax is shift invariant
            self.S[side] = s
            self.w[side] = np.exp(s - s.max(axis=0, keepdims=True))
        return self.w[side]

    def prev(self, side: int, k: int):
        """Order-k features on ``side`` as an (N, G, d) array (broadcast for k=0)."""
        if k == 0:
            return self.emb[side][:, None, :]
        return self.X[(side, k)]


def _build(graph: BipartiteGraph, slabs: _Slabs, plan):
    G, d = slabs.guides.shape
    for s, k in plan:
        cs = 1 - s
        a = _adjacency(graph, s)
        w = slabs.weights(cs)
        if s not in slabs.Z:
            z = _mm(a, w)
            bad = (z <= 0) & (graph.degrees[s][:, None] > 0)
            if bad.any():
                raise FloatingPointError("attention normalizer underflowed; embeddings too large for tau")
            slabs.Z[s] = z
            # isolated parents have z == 0 and aggregate to zero
            slabs.Zinv[s] = np.where(z > 0, 1.0 / np.where(z > 0, z, 1.0), 0.0)
        m = w[:, :, None] * slabs.prev(cs, k - 1)
        num = _mm(a, m.reshape(len(w), G * d)).reshape(-1, G, d)
        num *= slabs.Zinv[s][:, :, None]
        slabs.X[(s, k)] = num
        slabs.order.append((s, k))


def _backward_slabs(graph: BipartiteGraph, slabs: _Slabs, dX: dict, dE: list, dS: dict):
    G, d = slabs.guides.shape
    for s, k in reversed(slabs.order):
        D = dX.pop((s, k), None)
        if D is None:
            continue
        cs = 1 - s
        a = _adjacency(graph, s)
        z = slabs.Z[s]
        w = slabs.w[cs]
        inv = slabs.Zinv[s]
        d_num = D * inv[:, :, None]
        d_z = -np.einsum("pgd,pgd->pg", D, slabs.X[(s, k)]) * inv
        d_m = _tmm(a, d_num.reshape(len(z), G * d)).reshape(-1, G, d)
        d_w = _tmm(a, d_z)
        prev = slabs.prev(cs, k - 1)
        d_w += np.einsum("cgd,cgd->cg", d_m, np.broadcast_to(prev, d_m.shape))
        d_prev = d_m * w[:, :, None]
        if k - 1 == 0:
            dE[cs] += d_prev.sum(axis=1)
        else:
            key = (cs, k - 1)
            dX[key] = dX[key] + d_prev if key in dX else d_prev
        dS[cs] = dS.get(cs, 0.0) + d_w * w


def _finish_guides(slabs: _Slabs, dE: list, dS: dict):
    d_guides = np.zeros_like(slabs.guides)
    for side, ds in dS.items():
        dE[side] += ds @ slabs.guides / slabs.tau
        d_guides += ds.T @ slabs.emb[side] / slabs.tau
    return d_guides


@dataclass
class PairPass:
    """Forward state for :func:`pair_forward`; feed it to :func:`pair_backward`."""

    graph: BipartiteGraph
    root_side: int
    pair_root: np.ndarray
    pair_guide: np.ndarray
    K: int
    slabs: _Slabs
    entries: tuple = ()
    alpha: np.ndarray | None = None
    stacks: np.ndarray | None = None
    full: bool = False


def pair_forward(
    graph: BipartiteGraph,
    emb: tuple[np.ndarray, np.ndarray],
    root_side: int,
    guides: np.ndarray,
    pair_root: np.ndarray,
    pair_guide: np.ndarray,
    K: int,
    tau: float,
) -> PairPass:
    """Root stacks ``(P, K+1, d)`` for pairs ``(pair_root[p], guides[pair_guide[p]])``.

    ``guides`` holds guide embedding rows; they enter only through the
    attention logits. When the pairs' neighbor lists outnumber the
    (root, guide) grid, the root side is propagated in full and gathered;
    otherwise only the pairs' own neighborhoods are aggregated.
    """
    pair_root = np.asarray(pair_root, dtype=np.int64)
    pair_guide = np.asarray(pair_guide, dtype=np.int64)
    guides = np.asarray(guides, dtype=np.float64)
    slabs = _Slabs(emb, guides, tau)
    ps = PairPass(graph, root_side, pair_root, pair_guide, K, slabs)
    P, d = len(pair_root), emb[0].shape[1]
    stacks = np.empty((P, K + 1, d))
    stacks[:, 0] = emb[root_side][pair_root]
    off = graph.offsets[root_side]
    entries = int((off[pair_root + 1] - off[pair_root]).sum())
    if K >= 1 and entries > graph.size(root_side) * len(guides):
        _build(graph, slabs, _plan(root_side, K, root_orders_full=True))
        for k in range(1, K + 1):
            stacks[:, k] = slabs.X[(root_side, k)][pair_root, pair_guide]
        ps.full = True
    elif K >= 1:
        _build(graph, slabs, _plan(root_side, K, root_orders_full=False))
        cs = 1 - root_side
        pe, ce, off = _neighbor_entries(graph, root_side, pair_root)
        ge = pair_guide[pe]
        slabs.weights(cs)
        alpha = segment_softmax(slabs.S[cs][ce, ge], off)
        for k in range(1, K + 1):
            prev = emb[cs][ce] if k == 1 else slabs.X[(cs, k - 1)][ce, ge]
            stacks[:, k] = segment_sum(alpha[:, None] * prev, off)
        ps.entries = (pe, ce, ge, off)
        ps.alpha = alpha
    ps.stacks = stacks
    return ps


def pair_backward(ps: PairPass, d_stacks: np.ndarray):
    """Returns ``(dE_user, dE_item, d_guides)`` for upstream gradient ``d_stacks``."""
    slabs = ps.slabs
    emb = slabs.emb
    G, d = slabs.guides.shape
    dE = [np.zeros_like(emb[USER]), np.zeros_like(emb[ITEM])]
    np.add.at(dE[ps.root_side], ps.pair_root, d_stacks[:, 0])
    if ps.K == 0:
        return dE[USER], dE[ITEM], np.zeros_like(slabs.guides)
    r, cs = ps.root_side, 1 - ps.root_side
    if ps.full:
        n_r = len(emb[r])
        scatter = sp.csr_matrix(
            (np.ones(len(ps.pair_root)), (ps.pair_root * G + ps.pair_guide, np.arange(len(ps.pair_root)))),
            shape=(n_r * G, len(ps.pair_root)),
        )
        dX = {(r, k): (scatter @ d_stacks[:, k]).reshape(n_r, G, d) for k in range(1, ps.K + 1)}
        dS: dict = {}
        _backward_slabs(ps.graph, slabs, dX, dE, dS)
        d_guides = _finish_guides(slabs, dE, dS)
        return dE[USER], dE[ITEM], d_guides
    pe, ce, ge, off = ps.entries
    alpha = ps.alpha
    P = len(ps.pair_root)
    n_c = len(emb[cs])
    d_alpha = np.zeros(len(pe))
    dX: dict = {}
    for k in range(1, ps.K + 1):
        dk = d_stacks[:, k]
        if k == 1:
            prev = emb[cs][ce]
            scatter = sp.csr_matrix((alpha, (ce, pe)), shape=(n_c, P))
            dE[cs] += scatter @ dk
        else:
            prev = slabs.X[(cs, k - 1)][ce, ge]
            lin = ce * G + ge
            scatter = sp.csr_matrix((alpha, (lin, pe)), shape=(n_c * G, P))
            dX[(cs, k - 1)] = (scatter @ dk).reshape(n_c, G, d)
        d_alpha += np.einsum("ed,ed->e", dk[pe], prev)
    seg = np.repeat(np.arange(P), np.diff(off))
    ds = alpha * (d_alpha - segment_sum(alpha * d_alpha, off)[seg])
    dS = {cs: np.bincount(ce * G + ge, weights=ds, minlength=n_c * G).reshape(n_c, G)}
    _backward_slabs(ps.graph, slabs, dX, dE, dS)
    d_guides = _finish_guides(slabs, dE, dS)
    return dE[USER], dE[ITEM], d_guides


def root_features(
    graph: BipartiteGraph,
    emb: tuple[np.ndarray, np.ndarray],
    root_side: int,
    guides: np.ndarray,
    K: int,
    tau: float,
    beta: np.ndarray,
) -> np.ndarray:
    """Combined features ``e*_r | g`` for every root on ``root_side`` and every guide: ``(N, G, d)``."""
    guides = np.asarray(guides, dtype=np.float64)
    out = beta[0] * np.broadcast_to(emb[root_side][:, None, :], (len(emb[root_side]), len(guides), emb[0].shape[1]))
    out = np.array(out)
    if K == 0:
        return out
    slabs = _Slabs(emb, guides, tau)
    _build(graph, slabs, _plan(root_side, K, root_orders_full=True))
    for k in range(1, K + 1):
        out += beta[k] * slabs.X[(root_side, k)]
    return out


# -- LightGCN: guide-free propagation over the whole graph ------------------


@dataclass
class LightPass:
    graph: BipartiteGraph
    K: int
    stacks: tuple  # (n, K+1, d), (m, K+1, d)


def light_forward(graph: BipartiteGraph, emb: tuple[np.ndarray, np.ndarray], K: int) -> LightPass:
    """Stacks for every node under ``1/sqrt(|N_p||N_c|)`` weights."""
    a = graph.norm_adjacency
    n, m, d = graph.num_users, graph.num_items, emb[0].shape[1]
    su, si = np.empty((n, K + 1, d)), np.empty((m, K + 1, d))
    su[:, 0], si[:, 0] = emb[USER], emb[ITEM]
    for k in range(1, K + 1):
        su[:, k] = a @ si[:, k - 1]
        si[:, k] = a.T @ su[:, k - 1]
    return LightPass(graph, K, (su, si))


def light_backward(lp: LightPass, d_user: np.ndarray, d_item: np.ndarray):
    a = lp.graph.norm_adjacency
    du, di = d_user.copy(), d_item.copy()
    for k in range(lp.K, 0, -1):
        di[:, k - 1] += a.T @ du[:, k]
        du[:, k - 1] += a @ di[:, k]
    return du[:, 0], di[:, 0]
