"""BPR training: negative sampling, minibatch gradients, lazy Adam, early stopping."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .batched import light_backward, light_forward, pair_backward, pair_forward
from .data import InteractionDataset
from .evaluation import evaluate
from .grad import GradientBuffer, Triplet, backward_triplet, forward_triplet, sigmoid, softplus
from .graph import ITEM, USER, BipartiteGraph, build_graph, k_hop_nodes
from .model import EmbeddingTable, Hyperparams, LayerWeights, Snapshot, init_embeddings

_log = logging.getLogger(__name__)

STREAM_INIT, STREAM_DATA, STREAM_TREES = 0, 1, 2


def stream_rng(seed: int, stream: int) -> np.random.Generator:
    """Independent generator for ``(seed, stream)``; workers use ``stream = base + worker``."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(stream,)))


def sample_negatives(graph: BipartiteGraph, users, rng: np.random.Generator) -> np.ndarray:
    """One uniformly drawn unobserved item per user, by rejection."""
    users = np.asarray(users, dtype=np.int64)
    m = graph.num_items
    full = graph.degrees[USER][users] >= m
    if full.any():
        raise ValueError(f"user {int(users[full][0])} has interacted with every item")
    out = rng.integers(0, m, len(users))
    bad = graph.edge_mask(users, out)
    while bad.any():
        idx = np.flatnonzero(bad)
        out[idx] = rng.integers(0, m, len(idx))
        bad[idx] = graph.edge_mask(users[idx], out[idx])
    return out


def bpr_batch_loss(scores_pos, scores_neg, reg_terms, l2: float) -> float:
    """Mean ``-ln sigmoid(y+ - y-)`` plus ``l2`` times the mean anchor L2."""
    scores_pos = np.asarray(scores_pos, dtype=np.float64)
    scores_neg = np.asarray(scores_neg, dtype=np.float64)
    if len(scores_pos) != len(scores_neg) or len(scores_pos) == 0:
        raise ValueError("score arrays must be nonempty and of equal length")
    return float(np.mean(softplus(-(scores_pos - scores_neg))) + l2 * np.mean(reg_terms))


@dataclass
class AdamState:
    m: list
    v: list
    m_logits: np.ndarray
    v_logits: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, table: EmbeddingTable, num_logits: int) -> "AdamState":
        return cls(
            [np.zeros_like(table.user_emb), np.zeros_like(table.item_emb)],
            [np.zeros_like(table.user_emb), np.zeros_like(table.item_emb)],
            np.zeros(num_logits),
            np.zeros(num_logits),
        )


def adam_step(
    table: EmbeddingTable,
    weights: LayerWeights,
    grads: GradientBuffer,
    state: AdamState,
    lr: float,
):
    """Bias-corrected Adam; embedding rows absent from ``grads`` keep stale moments.

    Beta logits move only when ``weights.learned``.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for side in (USER, ITEM):
        ids, g = grads.rows(side)
        if not len(ids):
            continue
        m = state.m[side][ids] * state.beta1 + (1 - state.beta1) * g
        v = state.v[side][ids] * state.beta2 + (1 - state.beta2) * g * g
        state.m[side][ids] = m
        state.v[side][ids] = v
        table.emb[side][ids] -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    if weights.learned:
        g = grads.beta_logits
        state.m_logits = state.m_logits * state.beta1 + (1 - state.beta1) * g
        state.v_logits = state.v_logits * state.beta2 + (1 - state.beta2) * g * g
        weights.logits -= lr * (state.m_logits / c1) / (np.sqrt(state.v_logits / c2) + state.eps)
    return table, weights, state


# -- batch gradients ---------------------------------------------------------


def _touched(graph, hp, users, items):
    hops = hp.layers
    u1, i1 = k_hop_nodes(graph, USER, users, hops)
    u2, i2 = k_hop_nodes(graph, ITEM, items, hops)
    return np.flatnonzero(u1 | u2), np.flatnonzero(i1 | i2)


def _fast_batch(tr: np.ndarray, table: EmbeddingTable, graph: BipartiteGraph, hp: Hyperparams, weights: LayerWeights):
    u, p, q = tr[:, 0], tr[:, 1], tr[:, 2]
    B, K, tau = len(u), hp.layers, hp.tau
    emb = table.emb
    beta = weights.beta
    items = np.concatenate([p, q])
    dE = [np.zeros_like(emb[USER]), np.zeros_like(emb[ITEM])]

    if K == 0 or hp.guide_mode == "lightgcn_norm":
        lp = light_forward(graph, emb, K)
        su_p = su_q = lp.stacks[USER][u]
        sp_, sq = lp.stacks[ITEM][p], lp.stacks[ITEM][q]
    elif hp.guide_mode == "interactive":
        gi, inv_i = np.unique(items, return_inverse=True)
        pu = pair_forward(graph, emb, USER, emb[ITEM][gi], np.concatenate([u, u]), inv_i, K, tau)
        gu, inv_u = np.unique(u, return_inverse=True)
        pi = pair_forward(graph, emb, ITEM, emb[USER][gu], items, np.concatenate([inv_u, inv_u]), K, tau)
        su_p, su_q = pu.stacks[:B], pu.stacks[B:]
        sp_, sq = pi.stacks[:B], pi.stacks[B:]
    else:
        ru, inv_u = np.unique(u, return_inverse=True)
        pu = pair_forward(graph, emb, USER, emb[USER][ru], ru, np.arange(len(ru)), K, tau)
        ri, inv_i = np.unique(items, return_inverse=True)
        pi = pair_forward(graph, emb, ITEM, emb[ITEM][ri], ri, np.arange(len(ri)), K, tau)
        su_p = su_q = pu.stacks[inv_u]
        sp_, sq = pi.stacks[inv_i[:B]], pi.stacks[inv_i[B:]]

    def comb(stacks):
        return np.einsum("bkd,k->bd", stacks, beta)

    cu_p, cu_q, cp, cq = comb(su_p), comb(su_q), comb(sp_), comb(sq)
    y_pos = np.einsum("bd,bd->b", cu_p, cp)
    y_neg = np.einsum("bd,bd->b", cu_q, cq)
    reg = (emb[USER][u] ** 2).sum(1) + (emb[ITEM][p] ** 2).sum(1) + (emb[ITEM][q] ** 2).sum(1)
    loss = bpr_batch_loss(y_pos, y_neg, reg, hp.l2)

    g = -sigmoid(-(y_pos - y_neg)) / B  # d loss / d y_pos
    d_cu_p, d_cp = g[:, None] * cp, g[:, None] * cu_p
    d_cu_q, d_cq = -g[:, None] * cq, -g[:, None] * cu_q
    d_beta = (
        np.einsum("bkd,bd->k", su_p, d_cu_p) + np.einsum("bkd,bd->k", sp_, d_cp)
        + np.einsum("bkd,bd->k", su_q, d_cu_q) + np.einsum("bkd,bd->k", sq, d_cq)
    )

    def lift(dc):
        return beta[None, :, None] * dc[:, None, :]

    if K == 0 or hp.guide_mode == "lightgcn_norm":
        du = np.zeros_like(lp.stacks[USER])
        di = np.zeros_like(lp.stacks[ITEM])
        np.add.at(du, u, lift(d_cu_p + d_cu_q))
        np.add.at(di, p, lift(d_cp))
        np.add.at(di, q, lift(d_cq))
        gu_, gi_ = light_backward(lp, du, di)
        dE[USER] += gu_
        dE[ITEM] += gi_
    elif hp.guide_mode == "interactive":
        a, b, dg = pair_backward(pu, lift(np.concatenate([d_cu_p, d_cu_q])))
        dE[USER] += a
        dE[ITEM] += b
        np.add.at(dE[ITEM], gi, dg)
        a, b, dg = pair_backward(pi, lift(np.concatenate([d_cp, d_cq])))
        dE[USER] += a
        dE[ITEM] += b
        np.add.at(dE[USER], gu, dg)
    else:
        d_su = np.zeros((len(ru),) + su_p.shape[1:])
        np.add.at(d_su, inv_u, lift(d_cu_p + d_cu_q))
        a, b, dg = pair_backward(pu, d_su)
        dE[USER] += a
        dE[ITEM] += b
        np.add.at(dE[USER], ru, dg)
        d_si = np.zeros((len(ri),) + sp_.shape[1:])
        np.add.at(d_si, inv_i, lift(np.concatenate([d_cp, d_cq])))
        a, b, dg = pair_backward(pi, d_si)
        dE[USER] += a
        dE[ITEM] += b
        np.add.at(dE[ITEM], ri, dg)

    if hp.l2:
        c = 2.0 * hp.l2 / B
        np.add.at(dE[USER], u, c * emb[USER][u])
        np.add.at(dE[ITEM], p, c * emb[ITEM][p])
        np.add.at(dE[ITEM], q, c * emb[ITEM][q])

    buf = GradientBuffer(table.dim, K + 1)
    tu, ti = _touched(graph, hp, u, items)
    buf.add(USER, tu, dE[USER][tu])
    buf.add(ITEM, ti, dE[ITEM][ti])
    buf.beta_logits = beta * (d_beta - beta @ d_beta)
    return loss, buf


def _tree_batch(tr, table, graph, hp, weights, rng):
    buf = GradientBuffer(table.dim, hp.layers + 1)
    total = 0.0
    for row in tr:
        t = Triplet(int(row[0]), int(row[1]), int(row[2]))
        fwd = forward_triplet(t, table, graph, hp, weights, rng=rng)
        total += float(fwd.loss)
        buf.merge(backward_triplet(fwd, table, hp))
    return total / len(tr), buf.scale(1.0 / len(tr))


def batch_gradients(
    triplets: np.ndarray,
    table: EmbeddingTable,
    graph: BipartiteGraph,
    hp: Hyperparams,
    weights: LayerWeights,
    rng: np.random.Generator | None = None,
    use_trees: bool | None = None,
) -> tuple[float, GradientBuffer]:
    """Mean triplet loss and its gradient.

    Full-fanout configurations go through the vectorized propagation; sampled
    trees (or target exclusion) fall back to per-triplet tapes.
    """
    triplets = np.asarray(triplets, dtype=np.int64).reshape(-1, 3)
    if use_trees is None:
        use_trees = not hp.full_fanout or hp.exclude_target
    if use_trees:
        return _tree_batch(triplets, table, graph, hp, weights, rng)
    return _fast_batch(triplets, table, graph, hp, weights)


# -- training loop -------------------------------------------------------------


@dataclass
class Schedule:
    batch_size: int = 1024
    epochs: int = 1000
    eval_every: int = 10
    patience: int = 5
    deterministic: bool = True
    k: int = 20


@dataclass
class MetricsRow:
    epoch: int
    loss: float
    recall: float
    ndcg: float
    wall_seconds: float

    def format(self, deterministic: bool) -> str:
        # wall time is the one nondeterministic column
        wall = "nan" if deterministic else f"{self.wall_seconds:.3f}"
        return f"{self.epoch}\t{self.loss:.10f}\t{self.recall:.10f}\t{self.ndcg:.10f}\t{wall}"


@dataclass
class TrainResult:
    best: Snapshot
    best_epoch: int
    log: list = field(default_factory=list)
    epoch_losses: list = field(default_factory=list)
    final: Snapshot | None = None

    def metrics_text(self, deterministic: bool) -> str:
        return "".join(row.format(deterministic) + "\n" for row in self.log)


class TrainingDiverged(FloatingPointError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


def _diagnostics(epoch, batch, loss, table, weights):
    return {
        "epoch": epoch,
        "batch": batch,
        "loss": loss,
        "max_abs_user": float(np.nanmax(np.abs(table.user_emb))),
        "max_abs_item": float(np.nanmax(np.abs(table.item_emb))),
        "nonfinite_user_rows": int((~np.isfinite(table.user_emb).all(1)).sum()),
        "nonfinite_item_rows": int((~np.isfinite(table.item_emb).all(1)).sum()),
        "beta": weights.beta.tolist(),
    }


def train(
    dataset: InteractionDataset,
    hp: Hyperparams,
    schedule: Schedule,
    seed: int,
    graph: BipartiteGraph | None = None,
    on_eval=None,
) -> TrainResult:
    """Train with BPR + Adam and return the best snapshot by test Recall@k.

    Model selection uses the test split, as the LightGCN protocol does; there
    is no separate validation set.
    """
    graph = graph if graph is not None else build_graph(dataset)
    table = init_embeddings(dataset.num_users, dataset.num_items, hp.dim, stream_rng(seed, STREAM_INIT))
    weights = LayerWeights.uniform(hp.layers, learned=hp.beta_mode == "learned")
    state = AdamState.zeros(table, hp.layers + 1)
    data_rng = stream_rng(seed, STREAM_DATA)
    tree_rng = stream_rng(seed, STREAM_TREES)
    edges = dataset.train_edges
    result = TrainResult(Snapshot(table.copy(), weights.copy()), 0)
    best_recall = -np.inf
    stale = 0
    start = time.perf_counter()
    _log.info("model selection monitors the test split (no held-out validation set)")
    for epoch in range(1, schedule.epochs + 1):
        order = data_rng.permutation(len(edges))
        pos = edges[order]
        neg = sample_negatives(graph, pos[:, 0], data_rng)
        trip = np.column_stack([pos, neg])
        total = 0.0
        for b, s in enumerate(range(0, len(trip), schedule.batch_size)):
            chunk = trip[s : s + schedule.batch_size]
            loss, grads = batch_gradients(chunk, table, graph, hp, weights, tree_rng)
            if not np.isfinite(loss) or not grads.is_finite():
                diag = _diagnostics(epoch, b, loss, table, weights)
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {b}", diag)
            adam_step(table, weights, grads, state, hp.lr)
            total += loss * len(chunk)
        epoch_loss = total / len(trip)
        result.epoch_losses.append(epoch_loss)
        if epoch % schedule.eval_every == 0 or epoch == schedule.epochs:
            snap = Snapshot(table, weights)
            res = evaluate(snap, dataset, graph, hp, schedule.k)
            row = MetricsRow(epoch, epoch_loss, res.mean_recall, res.mean_ndcg, time.perf_counter() - start)
            result.log.append(row)
            _log.info("epoch %d loss %.5f recall@%d %.4f ndcg@%d %.4f", epoch, epoch_loss, schedule.k, row.recall, schedule.k, row.ndcg)
            if on_eval is not None:
                on_eval(row)
            if row.recall > best_recall:
                best_recall = row.recall
                result.best = Snapshot(table.copy(), weights.copy())
                result.best_epoch = epoch
                stale = 0
            else:
                stale += 1
                if stale >= schedule.patience:
                    _log.info("early stop at epoch %d (best %d)", epoch, result.best_epoch)
                    break
    result.final = Snapshot(table.copy(), weights.copy())
    return result
