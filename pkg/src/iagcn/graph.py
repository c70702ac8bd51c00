"""Bipartite interaction graph and K-level propagation trees."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp

from .data import InteractionDataset

USER = 0
ITEM = 1
SIDE_NAMES = ("user", "item")


class NodeRef(NamedTuple):
    side: int
    index: int

    def __repr__(self):
        return f"{SIDE_NAMES[self.side][0]}{self.index}"


def _csr(rows: np.ndarray, cols: np.ndarray, n_rows: int):
    order = np.lexsort((cols, rows))
    values = np.ascontiguousarray(cols[order], dtype=np.int64)
    offsets = np.zeros(n_rows + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=n_rows), out=offsets[1:])
    values.setflags(write=False)
    offsets.setflags(write=False)
    return offsets, values


class BipartiteGraph:
    """Train-edge graph with both adjacency directions in CSR layout.

    Index everything by side: ``offsets[USER]``/``values[USER]`` hold the
    items of each user, ``offsets[ITEM]``/``values[ITEM]`` the users of each
    item. Arrays are read-only.
    """

    def __init__(self, num_users: int, num_items: int, edges: np.ndarray):
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        self.num_users = int(num_users)
        self.num_items = int(num_items)
        self.num_edges = len(edges)
        u_off, u_val = _csr(edges[:, 0], edges[:, 1], self.num_users)
        i_off, i_val = _csr(edges[:, 1], edges[:, 0], self.num_items)
        self.offsets = (u_off, i_off)
        self.values = (u_val, i_val)
        self.degrees = tuple(np.diff(o) for o in self.offsets)

    def size(self, side: int) -> int:
        return self.num_users if side == USER else self.num_items

    def neighbors(self, side: int, index: int) -> np.ndarray:
        off = self.offsets[side]
        return self.values[side][off[index] : off[index + 1]]

    def degree(self, side: int, index: int) -> int:
        return int(self.degrees[side][index])

    def has_edge(self, user: int, item: int) -> bool:
        nb = self.neighbors(USER, user)
        k = np.searchsorted(nb, item)
        return bool(k < len(nb) and nb[k] == item)

    def edge_mask(self, users, items) -> np.ndarray:
        """Vectorized ``has_edge`` over parallel id arrays."""
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        keys = self._edge_keys
        q = users * self.num_items + items
        k = np.searchsorted(keys, q)
        k = np.minimum(k, len(keys) - 1) if len(keys) else k
        return (keys[k] == q) if len(keys) else np.zeros(len(q), bool)

    @cached_property
    def _edge_keys(self) -> np.ndarray:
        rows = np.repeat(np.arange(self.num_users, dtype=np.int64), self.degrees[USER])
        return rows * self.num_items + self.values[USER]

    def density(self) -> float:
        return self.num_edges / (self.num_users * self.num_items)

    @cached_property
    def adjacency(self) -> sp.csr_matrix:
        """``n x m`` 0/1 matrix of train edges."""
        data = np.ones(self.num_edges)
        return sp.csr_matrix((data, self.values[USER], self.offsets[USER]), shape=(self.num_users, self.num_items))

    @cached_property
    def norm_adjacency(self) -> sp.csr_matrix:
        """``D_u^{-1/2} A D_i^{-1/2}``; rows/cols of isolated nodes are zero."""
        with np.errstate(divide="ignore"):
            du = np.where(self.degrees[USER] > 0, 1.0 / np.sqrt(self.degrees[USER]), 0.0)
            di = np.where(self.degrees[ITEM] > 0, 1.0 / np.sqrt(self.degrees[ITEM]), 0.0)
        return sp.csr_matrix(sp.diags(du) @ self.adjacency @ sp.diags(di))


def build_graph(dataset: InteractionDataset) -> BipartiteGraph:
    return BipartiteGraph(dataset.num_users, dataset.num_items, dataset.train_edges)


@dataclass(frozen=True)
class SampledTree:
    """A depth-K propagation tree stored level by level.

    ``nodes[k]`` are the graph ids at level ``k`` (``nodes[0] == [root]``);
    the children of the ``p``-th node of level ``k-1`` are
    ``nodes[k][offsets[k][p]:offsets[k][p+1]]``. ``offsets[0]`` is unused.
    Level ``k`` lives on side ``root.side ^ (k & 1)``.
    """

    root: NodeRef
    depth: int
    nodes: tuple
    offsets: tuple
    degenerate: bool = False

    def side(self, level: int) -> int:
        return self.root.side ^ (level & 1)

    def parent_index(self, level: int) -> np.ndarray:
        return np.repeat(np.arange(len(self.nodes[level - 1])), np.diff(self.offsets[level]))

    def edges(self):
        """Yield ``(parent NodeRef, child NodeRef)`` for every tree edge."""
        for k in range(1, self.depth + 1):
            parents = self.nodes[k - 1][self.parent_index(k)]
            for p, c in zip(parents, self.nodes[k]):
                yield NodeRef(self.side(k - 1), int(p)), NodeRef(self.side(k), int(c))


def sample_tree(
    graph: BipartiteGraph,
    root: NodeRef,
    depth: int,
    fanout: int | None = None,
    rng: np.random.Generator | None = None,
    exclude: NodeRef | None = None,
) -> SampledTree:
    """Expand ``root`` for ``depth`` levels.

    With ``fanout=None`` (or a fanout at least the parent's degree) every
    neighbor becomes a child; otherwise ``fanout`` distinct neighbors are drawn
    uniformly per parent. ``exclude`` drops one node wherever it would appear
    as a child.
    """
    if depth < 0:
        raise ValueError("depth must be >= 0")
    if fanout is not None and fanout < 1:
        raise ValueError("fanout must be >= 1 or None")
    root = NodeRef(int(root[0]), int(root[1]))
    if not 0 <= root.index < graph.size(root.side):
        raise IndexError(f"root {root!r} out of range")
    nodes = [np.array([root.index], dtype=np.int64)]
    offsets = [np.zeros(2, dtype=np.int64)]
    degenerate = depth >= 1 and graph.degree(root.side, root.index) == 0
    for level in range(1, depth + 1):
        pside = root.side ^ ((level - 1) & 1)
        cside = 1 - pside
        kids, counts = [], []
        for p in nodes[-1]:
            nb = graph.neighbors(pside, p)
            if exclude is not None and exclude.side == cside:
                nb = nb[nb != exclude.index]
            if fanout is not None and len(nb) > fanout:
                if rng is None:
                    raise ValueError("bounded fanout needs an rng")
                nb = np.sort(rng.choice(nb, size=fanout, replace=False))
            kids.append(nb)
            counts.append(len(nb))
        off = np.zeros(len(nodes[-1]) + 1, dtype=np.int64)
        np.cumsum(counts, out=off[1:])
        nodes.append(np.concatenate(kids).astype(np.int64) if kids else np.zeros(0, np.int64))
        offsets.append(off)
    return SampledTree(root, depth, tuple(nodes), tuple(offsets), degenerate)


def walk_multiset(graph: BipartiteGraph, root: NodeRef, depth: int) -> list[list[int]]:
    """Sorted node ids reached at each level by enumerating every walk from ``root``."""
    levels = [[root.index]]
    side = root.side
    for _ in range(depth):
        nxt = []
        for p in levels[-1]:
            nxt.extend(int(c) for c in graph.neighbors(side, p))
        levels.append(nxt)
        side = 1 - side
    return [sorted(level) for level in levels]


def k_hop_nodes(graph: BipartiteGraph, side: int, roots: np.ndarray, hops: int) -> tuple[np.ndarray, np.ndarray]:
    """Boolean masks (users, items) of nodes within ``hops`` of ``roots``."""
    masks = [np.zeros(graph.num_users, bool), np.zeros(graph.num_items, bool)]
    frontier = np.zeros(graph.size(side), bool)
    frontier[np.asarray(roots, dtype=np.int64)] = True
    masks[side] |= frontier
    a = graph.adjacency
    for h in range(hops):
        s = side ^ (h & 1)
        step = (a.T @ frontier.astype(np.float64)) if s == USER else (a @ frontier.astype(np.float64))
        frontier = step > 0
        masks[1 - s] |= frontier
    return masks[0], masks[1]


def density_from_counts(num_users: int, num_items: int, num_interactions: int) -> float:
    return num_interactions / (num_users * num_items)
