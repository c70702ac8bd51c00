"""Embeddings and the tree forward pass: guided attention, aggregation, combination."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graph import ITEM, USER, BipartiteGraph, NodeRef, SampledTree, sample_tree

GUIDE_MODES = ("interactive", "self_guided", "lightgcn_norm")
BETA_MODES = ("mean", "learned")
SNAPSHOT_MAGIC = "IAGCN1"


@dataclass(frozen=True)
class Hyperparams:
    dim: int = 64
    layers: int = 2
    tau: float = 1.0
    guide_mode: str = "interactive"
    beta_mode: str = "mean"
    l2: float = 1e-4
    lr: float = 1e-3
    fanout: int | None = None
    exclude_target: bool = False

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.layers < 0:
            raise ValueError("layers must be >= 0")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.l2 < 0:
            raise ValueError("l2 must be nonnegative")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.guide_mode not in GUIDE_MODES:
            raise ValueError(f"guide_mode must be one of {GUIDE_MODES}")
        if self.beta_mode not in BETA_MODES:
            raise ValueError(f"beta_mode must be one of {BETA_MODES}")
        if self.fanout is not None and self.fanout < 1:
            raise ValueError("fanout must be >= 1 or None")

    @property
    def full_fanout(self) -> bool:
        return self.fanout is None


@dataclass
class EmbeddingTable:
    """0-order embeddings; ``emb[USER]`` is ``n x d``, ``emb[ITEM]`` is ``m x d``."""

    user_emb: np.ndarray
    item_emb: np.ndarray

    def __post_init__(self):
        if self.user_emb.ndim != 2 or self.item_emb.ndim != 2 or self.user_emb.shape[1] != self.item_emb.shape[1]:
            raise ValueError("embedding matrices must be 2-d with equal widths")

    @property
    def emb(self) -> tuple[np.ndarray, np.ndarray]:
        return (self.user_emb, self.item_emb)

    @property
    def dim(self) -> int:
        return self.user_emb.shape[1]

    def row(self, node: NodeRef) -> np.ndarray:
        return self.emb[node.side][node.index]

    def copy(self) -> "EmbeddingTable":
        return EmbeddingTable(self.user_emb.copy(), self.item_emb.copy())


def init_embeddings(n: int, m: int, d: int, seed: int | np.random.Generator) -> EmbeddingTable:
    """Glorot-uniform rows with ``fan_in = fan_out = d``."""
    if min(n, m, d) < 1:
        raise ValueError("dimensions must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    bound = xavier_bound(d)
    return EmbeddingTable(rng.uniform(-bound, bound, (n, d)), rng.uniform(-bound, bound, (m, d)))


def xavier_bound(d: int) -> float:
    return float(np.sqrt(6.0 / (d + d)))


# -- layer weights ---------------------------------------------------------


def simplex(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits)
    if z.dtype.kind != "f":
        z = z.astype(np.float64)
    z = np.exp(z - z.max())
    return z / z.sum()


@dataclass
class LayerWeights:
    """Combination coefficients kept as free logits; :attr:`beta` is always on the simplex."""

    logits: np.ndarray
    learned: bool = False

    @classmethod
    def uniform(cls, layers: int, learned: bool = False) -> "LayerWeights":
        return cls(np.zeros(layers + 1), learned)

    @classmethod
    def from_beta(cls, beta, learned: bool = False) -> "LayerWeights":
        beta = np.asarray(beta, dtype=np.float64)
        if np.any(beta < 0) or abs(beta.sum() - 1.0) > 1e-9:
            raise ValueError("beta must lie on the simplex")
        with np.errstate(divide="ignore"):
            return cls(np.log(beta), learned)

    @property
    def beta(self) -> np.ndarray:
        return simplex(self.logits)

    def copy(self) -> "LayerWeights":
        return LayerWeights(self.logits.copy(), self.learned)


# -- aggregation primitives ------------------------------------------------


def attention_weights(guide_emb: np.ndarray, child_embs: np.ndarray, tau: float) -> np.ndarray:
    """Softmax of guide-child inner products over one parent's children."""
    child_embs = np.atleast_2d(np.asarray(child_embs, dtype=np.float64))
    guide_emb = np.asarray(guide_emb, dtype=np.float64)
    if len(child_embs) == 0:
        raise ValueError("need at least one child")
    if not tau > 0:
        raise ValueError("tau must be positive")
    if not (np.isfinite(guide_emb).all() and np.isfinite(child_embs).all()):
        raise ValueError("non-finite embedding in attention input")
    s = child_embs @ guide_emb / tau
    e = np.exp(s - s.max())
    return e / e.sum()


def lightgcn_weights(graph: BipartiteGraph, parent: NodeRef, children) -> np.ndarray:
    """``1/sqrt(|N_p| |N_c|)`` using full graph degrees."""
    children = np.asarray(children, dtype=np.int64)
    dp = graph.degree(parent.side, parent.index)
    dc = graph.degrees[1 - parent.side][children]
    if dp == 0 or np.any(dc == 0):
        raise ValueError("zero-degree node in LightGCN normalization")
    return 1.0 / np.sqrt(dp * dc.astype(np.float64))


def aggregate_level(child_vectors: np.ndarray, weights: np.ndarray) -> np.ndarray:
    child_vectors = np.asarray(child_vectors, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if len(child_vectors) != len(weights):
        raise ValueError("weights and child vectors differ in length")
    return weights @ child_vectors


def segment_sum(values: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Sum ``values[offsets[j]:offsets[j+1]]`` for every j; empty segments give 0."""
    out = np.zeros((len(offsets) - 1,) + values.shape[1:], dtype=np.result_type(values, np.float64))
    starts = offsets[:-1]
    nonempty = starts < offsets[1:]
    if nonempty.any():
        out[nonempty] = np.add.reduceat(values, starts[nonempty], axis=0)
    return out


def segment_softmax(scores: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    if len(scores) == 0:
        return scores.copy()
    starts = offsets[:-1]
    nonempty = starts < offsets[1:]
    mx = np.zeros(len(starts), dtype=scores.dtype)
    mx[nonempty] = np.maximum.reduceat(scores, starts[nonempty])
    seg = np.repeat(np.arange(len(starts)), np.diff(offsets))
    e = np.exp(scores - mx[seg])
    return e / segment_sum(e, offsets)[seg]


# -- tree forward ----------------------------------------------------------


@dataclass
class LevelRecord:
    """One level of aggregations: parents at ``level``, children at ``level + 1``."""

    parent_ids: np.ndarray
    parent_side: int
    child_ids: np.ndarray
    offsets: np.ndarray
    parent_of: np.ndarray
    weights: np.ndarray
    child_feats: np.ndarray  # (C, orders, d): child orders 0..K-level-1
    attention: bool


@dataclass
class TreeTape:
    tree: SampledTree
    guide: NodeRef | None
    guide_vec: np.ndarray | None
    tau: float
    levels: list = field(default_factory=list)


def tree_guide(tree: SampledTree, guide: NodeRef | None, mode: str) -> NodeRef | None:
    if mode == "lightgcn_norm":
        return None
    if mode == "self_guided":
        return tree.root
    if guide is None:
        raise ValueError("interactive mode needs a guide node")
    if guide.side == tree.root.side:
        raise ValueError("interactive guide must sit on the other side of the tree root")
    return guide


def propagate(
    tree: SampledTree,
    guide: NodeRef | None,
    table: EmbeddingTable,
    graph: BipartiteGraph,
    hp: Hyperparams,
    record: bool = False,
):
    """Bottom-up pass over ``tree``; returns the ``(K+1, d)`` root stack.

    Every tree position carries its own feature stack, so a graph node that
    recurs at several positions is aggregated independently at each. With
    ``record=True`` returns ``(stack, TreeTape)``.
    """
    K = hp.layers
    if tree.depth != K:
        raise ValueError(f"tree depth {tree.depth} does not match layers {K}")
    g = tree_guide(tree, guide, hp.guide_mode)
    gvec = table.row(g) if g is not None else None
    tape = TreeTape(tree, g, gvec, hp.tau) if record else None
    d = table.dim
    dtype = table.user_emb.dtype
    below = None
    records = []
    for level in range(K, -1, -1):
        side = tree.side(level)
        ids = tree.nodes[level]
        feats = np.empty((len(ids), K - level + 1, d), dtype=dtype)
        feats[:, 0] = table.emb[side][ids]
        if level < K:
            off = tree.offsets[level + 1]
            kids = tree.nodes[level + 1]
            parent_of = tree.parent_index(level + 1)
            if g is None:
                if len(kids):
                    w = 1.0 / np.sqrt(
                        graph.degrees[side][ids][parent_of].astype(np.float64)
                        * graph.degrees[1 - side][kids]
                    )
                else:
                    w = np.zeros(0)
            else:
                w = segment_softmax(below[:, 0] @ gvec / hp.tau, off)
            feats[:, 1:] = segment_sum(w[:, None, None] * below, off)
            if record:
                records.append(LevelRecord(ids, side, kids, off, parent_of, w, below, g is not None))
        below = feats
    stack = below[0]
    if not np.isfinite(stack).all():
        raise FloatingPointError("non-finite value in propagation")
    if record:
        tape.levels = records[::-1]
        return stack, tape
    return stack


def combine(stack: np.ndarray, beta) -> np.ndarray:
    stack = np.asarray(stack)
    beta = beta.beta if isinstance(beta, LayerWeights) else np.asarray(beta)
    if len(beta) != len(stack):
        raise ValueError(f"{len(beta)} layer weights for a stack of {len(stack)} layers")
    return np.tensordot(beta, stack, axes=(0, 0))


def pair_trees(graph: BipartiteGraph, u: int, i: int, hp: Hyperparams, rng=None):
    """The (user tree, item tree) pair used to score ``(u, i)``."""
    ur, ir = NodeRef(USER, u), NodeRef(ITEM, i)
    ut = sample_tree(graph, ur, hp.layers, hp.fanout, rng, exclude=ir if hp.exclude_target else None)
    it = sample_tree(graph, ir, hp.layers, hp.fanout, rng, exclude=ur if hp.exclude_target else None)
    return ut, it


def score_pair(
    u: int,
    i: int,
    table: EmbeddingTable,
    graph: BipartiteGraph,
    hp: Hyperparams,
    rng: np.random.Generator | None = None,
    beta: LayerWeights | None = None,
    trees=None,
) -> float:
    """``<e*_u|i, e*_i|u>``; user tree guided by ``i`` and item tree by ``u`` in interactive mode."""
    beta = beta if beta is not None else LayerWeights.uniform(hp.layers)
    ut, it = trees if trees is not None else pair_trees(graph, u, i, hp, rng)
    su = propagate(ut, NodeRef(ITEM, i), table, graph, hp)
    si = propagate(it, NodeRef(USER, u), table, graph, hp)
    return float(combine(su, beta) @ combine(si, beta))


# -- snapshot file -----------------------------------------------------------


@dataclass
class Snapshot:
    table: EmbeddingTable
    weights: LayerWeights

    @property
    def layers(self) -> int:
        return len(self.weights.logits) - 1


def save_snapshot(path: str | Path, snap: Snapshot):
    """Header line ``IAGCN1 n m d K`` then little-endian float64 users, items, betas."""
    t = snap.table
    n, d = t.user_emb.shape
    m = t.item_emb.shape[0]
    header = f"{SNAPSHOT_MAGIC} {n} {m} {d} {snap.layers}\n".encode("ascii")
    body = b"".join(
        np.ascontiguousarray(a, dtype="<f8").tobytes()
        for a in (t.user_emb, t.item_emb, snap.weights.beta)
    )
    Path(path).write_bytes(header + body)


class SnapshotError(ValueError):
    pass


def load_snapshot(path: str | Path, learned: bool = False) -> Snapshot:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise SnapshotError(f"{path}: missing header line")
    parts = raw[:nl].decode("ascii", errors="replace").split()
    if len(parts) != 5 or parts[0] != SNAPSHOT_MAGIC:
        raise SnapshotError(f"{path}: bad header {raw[:nl]!r}")
    n, m, d, K = (int(x) for x in parts[1:])
    need = (n * d + m * d + K + 1) * 8
    body = raw[nl + 1 :]
    if len(body) != need:
        raise SnapshotError(f"{path}: expected {need} payload bytes, found {len(body)}")
    vals = np.frombuffer(body, dtype="<f8").astype(np.float64)
    users = vals[: n * d].reshape(n, d)
    items = vals[n * d : n * d + m * d].reshape(m, d)
    beta = vals[n * d + m * d :]
    return Snapshot(EmbeddingTable(users, items), LayerWeights.from_beta(beta, learned))


def count_parameters(table: EmbeddingTable, weights: LayerWeights) -> int:
    return table.user_emb.size + table.item_emb.size + (len(weights.logits) if weights.learned else 0)
