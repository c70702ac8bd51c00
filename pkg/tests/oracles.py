"""Reference implementations written without the package's tree or batched code."""

import numpy as np


def dense_lightgcn(n, m, edges, user_emb, item_emb, K, beta=None):
    """Combined embeddings by dense normalized-adjacency powers on the (n+m) graph."""
    A = np.zeros((n + m, n + m))
    for u, i in edges:
        A[u, n + i] = A[n + i, u] = 1.0
    deg = A.sum(1)
    inv = np.zeros_like(deg)
    inv[deg > 0] = deg[deg > 0] ** -0.5
    L = inv[:, None] * A * inv[None, :]
    E = np.vstack([user_emb, item_emb])
    beta = np.full(K + 1, 1.0 / (K + 1)) if beta is None else np.asarray(beta)
    out = beta[0] * E
    cur = E
    for k in range(1, K + 1):
        cur = L @ cur
        out = out + beta[k] * cur
    return out[:n], out[n:]


def recursive_feature(adj, emb, side, node, k, guide_vec, tau):
    """k-order feature of ``node`` under attention toward ``guide_vec``; plain recursion."""
    if k == 0:
        return emb[side][node]
    kids = adj[side][node]
    logits = np.array([emb[1 - side][c] @ guide_vec / tau for c in kids])
    w = np.exp(logits - logits.max())
    w /= w.sum()
    return sum(wc * recursive_feature(adj, emb, 1 - side, c, k - 1, guide_vec, tau) for wc, c in zip(w, kids))


def adjacency_lists(n, m, edges):
    users = [[] for _ in range(n)]
    items = [[] for _ in range(m)]
    for u, i in sorted(map(tuple, edges)):
        users[u].append(i)
        items[i].append(u)
    return (users, items)


def brute_recall(ranked, test, k):
    return len(set(list(ranked)[:k]) & set(test)) / len(set(test))


def brute_ndcg(ranked, test, k):
    import math

    test = set(test)
    dcg = 0.0
    for r in range(1, min(k, len(ranked)) + 1):
        if ranked[r - 1] in test:
            dcg += 1.0 / math.log2(r + 1)
    idcg = sum(1.0 / math.log2(r + 1) for r in range(1, min(len(test), k) + 1))
    return dcg / idcg
