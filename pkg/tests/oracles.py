"""Independent slow reference implementations used as test oracles.

Plain Python loops over lists; nothing here calls into the package.
"""

import math


def cosine(u, v):
    dot = math.fsum(a * b for a, b in zip(u, v))
    nu = math.sqrt(math.fsum(a * a for a in u))
    nv = math.sqrt(math.fsum(b * b for b in v))
    return dot / (nu * nv)


def mean_rows(rows):
    n = len(rows)
    return [math.fsum(col) / n for col in zip(*rows)]


def greedy_hypersphere_oracle(rows, r, K):
    """Enumerate every hypersphere, sort by (cardinality desc, index asc),
    apply center exclusion, return [(center_index, member_indices, mean)]."""
    n = len(rows)
    sim = [[1.0 if i == j else cosine(rows[i], rows[j]) for j in range(n)] for i in range(n)]
    spheres = []
    for j in range(n):
        members = [i for i in range(n) if sim[i][j] > r]
        spheres.append((j, members))
    spheres.sort(key=lambda s: (-len(s[1]), s[0]))
    picked = []
    for j, members in spheres:
        if len(picked) == K:
            break
        if any(sim[j][p[0]] > r for p in picked):
            continue
        picked.append((j, members, mean_rows([rows[i] for i in members])))
    return picked


def lloyd_oracle(rows, init_indices, max_iter=300):
    """Textbook Lloyd iteration from given initial centroid rows."""
    cents = [list(rows[i]) for i in init_indices]
    assign = None
    for _ in range(max_iter):
        new = []
        for x in rows:
            d = [math.fsum((a - b) ** 2 for a, b in zip(x, c)) for c in cents]
            new.append(min(range(len(cents)), key=lambda k: (d[k], k)))
        if new == assign:
            break
        assign = new
        for k in range(len(cents)):
            members = [rows[i] for i in range(len(rows)) if assign[i] == k]
            if members:
                cents[k] = mean_rows(members)
    return cents, assign


def softmax_ce_sum(feats, labels, W, b):
    """Summed cross-entropy of rows through x @ W + b, straight-line."""
    total = 0.0
    C = len(b)
    for x, y in zip(feats, labels):
        z = [math.fsum(x[i] * W[i][c] for i in range(len(x))) + b[c] for c in range(C)]
        m = max(z)
        lse = m + math.log(math.fsum(math.exp(v - m) for v in z))
        total += lse - z[y]
    return total


def central_difference(f, arr, step=1e-5):
    """Gradient of scalar f() w.r.t. every entry of the numpy array ``arr`` (mutated in place)."""
    import numpy as np

    grad = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = arr[idx]
        arr[idx] = old + step
        fp = f()
        arr[idx] = old - step
        fm = f()
        arr[idx] = old
        grad[idx] = (fp - fm) / (2 * step)
    return grad


def affine(x, W, b):
    return [math.fsum(x[i] * W[i][j] for i in range(len(x))) + b[j] for j in range(len(b))]


def mlp_forward(x, trunk, cls, reg):
    """Feature, logits and regression of one input row; layers are (W, b) nested lists."""
    h = list(x)
    for W, b in trunk:
        h = [max(v, 0.0) for v in affine(h, W, b)]
    return h, affine(h, *cls), affine(h, *reg)
