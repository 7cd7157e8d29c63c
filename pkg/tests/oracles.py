"""Slow, obviously-correct reference implementations used as test oracles."""

import math

import numpy as np


def sqdist(p, q):
    dx, dy, dz = q[0] - p[0], q[1] - p[1], q[2] - p[2]
    return (dx * dx + dy * dy) + dz * dz


def radius_scan(xyz, point, r):
    return [i for i in range(len(xyz)) if sqdist(point, xyz[i]) <= r * r]


def knn_scan(xyz, point, k, exclude=None):
    cands = sorted((sqdist(point, xyz[i]), i) for i in range(len(xyz)) if i != exclude)
    return [i for _, i in cands[:k]], [d for d, _ in cands[:k]]


def sor_survivors(xyz, k, mult):
    """Indices kept by statistical outlier removal, by exhaustive distance scan."""
    n = len(xyz)
    d = np.zeros((n, n))
    for i in range(n):
        diff = xyz - xyz[i]
        d[i] = (diff[:, 0] * diff[:, 0] + diff[:, 1] * diff[:, 1]) + diff[:, 2] * diff[:, 2]
    mean_d = []
    for i in range(n):
        row = sorted((d[i, j], j) for j in range(n) if j != i)[:k]
        total = 0.0
        for dd, _ in row:
            total += math.sqrt(dd)
        mean_d.append(total / k)
    if all(m == mean_d[0] for m in mean_d):
        return list(range(n))
    mu = math.fsum(mean_d) / n
    sigma = math.sqrt(math.fsum((m - mu) ** 2 for m in mean_d) / n)
    return [i for i in range(n) if mean_d[i] <= mu + mult * sigma]


def merge_scan(clouds, r):
    """(candidate channel, candidate index, per-channel source indices) of every survivor."""
    out = []
    for c_own, cloud in enumerate(clouds):
        for i in range(len(cloud.xyz)):
            p = cloud.xyz[i]
            sources = []
            for other in clouds:
                best = None
                for j in range(len(other.xyz)):
                    dd = sqdist(p, other.xyz[j])
                    if dd <= r * r and (best is None or dd < best[0]):
                        best = (dd, j)
                if best is None:
                    break
                sources.append(best[1])
            if len(sources) == len(clouds):
                out.append((c_own, i, tuple(sources)))
    return out


def pairwise_sqdist(a, b):
    """Full squared-distance matrix, same operation order as `sqdist`."""
    dx = b[None, :, 0] - a[:, None, 0]
    dy = b[None, :, 1] - a[:, None, 1]
    dz = b[None, :, 2] - a[:, None, 2]
    return (dx * dx + dy * dy) + dz * dz


def sor_survivors_dense(xyz, k, mult):
    """`sor_survivors` on a dense distance matrix; same arithmetic, array speed."""
    n = len(xyz)
    d = pairwise_sqdist(xyz, xyz)
    np.fill_diagonal(d, np.inf)
    nearest = np.sqrt(np.sort(d, axis=1)[:, :k])
    total = np.zeros(n)
    for j in range(k):
        total = total + nearest[:, j]
    mean_d = (total / k).tolist()
    if all(m == mean_d[0] for m in mean_d):
        return list(range(n))
    mu = math.fsum(mean_d) / n
    sigma = math.sqrt(math.fsum((m - mu) ** 2 for m in mean_d) / n)
    return [i for i in range(n) if mean_d[i] <= mu + mult * sigma]


def merge_dense(clouds, r):
    """`merge_scan` on dense distance matrices; argmin returns the first minimum."""
    out = []
    for c_own, cloud in enumerate(clouds):
        picks = []
        for other in clouds:
            d = pairwise_sqdist(cloud.xyz, other.xyz)
            j = np.argmin(d, axis=1)
            picks.append(np.where(d[np.arange(len(j)), j] <= r * r, j, -1))
        picks = np.column_stack(picks)
        for i in np.flatnonzero(np.all(picks >= 0, axis=1)):
            out.append((c_own, int(i), tuple(int(v) for v in picks[i])))
    return out


def counting_confusion(truth, pred, k=6):
    cm = [[0] * k for _ in range(k)]
    for t, p in zip(truth, pred):
        cm[int(t)][int(p)] += 1
    return np.array(cm)


# ---------------------------------------------------------------------------
# CART reference

MASK = (1 << 64) - 1


def splitmix(x):
    x = (x + 0x9E3779B97F4A7C15) & MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK
    return x ^ (x >> 31)


def node_features(key, node, d, mtry):
    perm = list(range(d))
    h = splitmix(key ^ splitmix(node))
    for j in range(mtry):
        h = splitmix((h + j) & MASK)
        kk = j + h % (d - j)
        perm[j], perm[kk] = perm[kk], perm[j]
    return sorted(perm[:mtry])


def gini_score(weights_by_class):
    total = sum(weights_by_class)
    return sum(w * w for w in weights_by_class) / total


def cart_tree(X, y, counts, class_w, n_classes, max_depth, mtry, min_split, min_leaf, key):
    """Exhaustive weighted-Gini CART; returns nested dicts.

    Every candidate threshold is scored from scratch. The best split must beat
    the parent's score; ties keep the lowest feature, then lowest threshold.
    """
    rows = [i for i in range(len(y)) if counts[i] > 0]
    n_nodes = [1]

    def weights(idx):
        w = [0.0] * n_classes
        for i in idx:
            w[y[i]] += class_w[y[i]] * counts[i]
        return w

    def build(idx, node, depth):
        tot = weights(idx)
        draws = sum(counts[i] for i in idx)
        present = sum(1 for w in tot if w > 0)
        best = None
        if depth < max_depth and present > 1 and draws >= min_split and draws >= 2 * min_leaf:
            parent = gini_score(tot)
            bar = parent * (1 + 1e-12)
            for f in node_features(key, node, X.shape[1], mtry):
                vals = sorted(set(X[i, f] for i in idx))
                for a, b in zip(vals, vals[1:]):
                    t = 0.5 * (a + b)
                    if t >= b:
                        t = a
                    left = [i for i in idx if X[i, f] <= t]
                    right = [i for i in idx if X[i, f] > t]
                    nl = sum(counts[i] for i in left)
                    if nl < min_leaf or draws - nl < min_leaf:
                        continue
                    g = gini_score(weights(left)) + gini_score(weights(right))
                    if g > bar and (best is None or g > best[0] * (1 + 1e-12)):
                        best = (g, f, t, left, right)
        if best is None:
            return {"leaf": tot}
        _, f, t, left, right = best
        lid, rid = n_nodes[0], n_nodes[0] + 1
        n_nodes[0] += 2
        # Depth-first, right subtree pushed first so the left one is built first.
        lnode = build(left, lid, depth + 1)
        rnode = build(right, rid, depth + 1)
        return {"feature": f, "threshold": t, "left": lnode, "right": rnode}

    return build(rows, 0, 0)
