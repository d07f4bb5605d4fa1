"""Independent pure-Python reference computations (plain loops over lists,
``math`` only) used to check the vectorized code paths."""

import math


def dot(u, v):
    s = 0.0
    for a, b in zip(u, v):
        s += a * b
    return s


def normalize(v):
    norm = math.sqrt(dot(v, v))
    return [x / norm for x in v]


def matmul(A, B):
    cols = list(zip(*B))
    return [[dot(row, col) for col in cols] for row in A]


def similarity(fv, ft, tau):
    scale = math.exp(tau)
    return [[scale * dot(fv[i], ft[j]) for j in range(len(ft))] for i in range(len(fv))]


def cross_entropy(logits, targets):
    total = 0.0
    for row, t in zip(logits, targets):
        m = max(row)
        z = 0.0
        for x in row:
            z += math.exp(x - m)
        total += -(row[t] - m - math.log(z))
    return total / len(logits)


def symmetric(logits):
    n = len(logits)
    cols = [[logits[i][j] for i in range(n)] for j in range(n)]
    diag = list(range(n))
    return 0.5 * (cross_entropy(logits, diag) + cross_entropy(cols, diag))


def topk(ids, embeddings, query, k, exclude=None):
    scored = [(-dot(e, query), i) for i, e in zip(ids, embeddings) if i != exclude]
    scored.sort()
    return [(i, -s) for s, i in scored[:k]]


def avg_topk(ids, embeddings, queries, k, query_ids=None):
    means = []
    for qi, q in enumerate(queries):
        ex = query_ids[qi] if query_ids else None
        hits = topk(ids, embeddings, q, k, ex)
        means.append(sum(c for _, c in hits) / len(hits))
    return 100.0 * sum(means) / len(means)


def joint_embed(x, W1, b1, W2, b2, Wv, pool, E, Wt):
    """Two-step reference: explicit matmuls, then row-norm division."""
    hidden = [[max(0.0, v + b) for v, b in zip(row, b1[0])] for row in matmul(x, W1)]
    f_v = [[v + b for v, b in zip(row, b2[0])] for row in matmul(hidden, W2)]
    f_t = matmul(pool, E)
    return [normalize(r) for r in matmul(f_v, Wv)], [normalize(r) for r in matmul(f_t, Wt)]
