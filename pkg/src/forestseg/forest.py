"""Random forest classifier with class-balanced weighted Gini splits.

Trees are exact CART: at every node a fixed number of features is drawn
without replacement, every midpoint between consecutive distinct values is a
candidate threshold, and the split maximising the weighted Gini decrease wins.
Ties go to the lower feature index and then the lower threshold.

Randomness is schedule independent. Tree ``t`` draws its bootstrap from a
Philox stream keyed by ``(seed, t)``; per-node feature draws come from a
SplitMix64 hash of the tree key and the node id. Training the trees on any
number of threads therefore gives the same forest.

Model file layout (little endian)::

    8 bytes   magic b"FSEGMODL"
    u32       format version
    u64       JSON header length, then the UTF-8 JSON header
              (params, feature_schema, class_weights, n_classes, n_trees)
    per tree  u64 n_nodes, u64 n_leaves,
              i32 feature[n_nodes], f64 threshold[n_nodes],
              i32 left[n_nodes], i32 right[n_nodes],
              f64 leaf_values[n_leaves * n_classes]
    u32       CRC-32 of every preceding byte

Leaves have ``feature == -1`` and ``left`` holding their row in leaf_values.
A sample goes left when ``value <= threshold``.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numba as nb
import numpy as np

from .model import N_CLASSES, UNLABELED

MODEL_MAGIC = b"FSEGMODL"
MODEL_VERSION = 1
_MASK64 = (1 << 64) - 1


class ForestError(ValueError):
    pass


@dataclass(frozen=True)
class ForestParams:
    n_estimators: int = 200
    max_depth: int = 50
    max_features: str = "log2"
    min_samples_split: int = 2
    min_samples_leaf: int = 10
    class_weight: str = "balanced"
    seed: int = 0

    def __post_init__(self):
        if self.n_estimators < 1:
            raise ValueError("n_estimators must be >= 1")
        if self.max_depth < 0:
            raise ValueError("max_depth must be >= 0")
        if self.max_features not in ("log2", "sqrt", "all"):
            raise ValueError("max_features must be 'log2', 'sqrt' or 'all'")
        if self.min_samples_split < 2:
            raise ValueError("min_samples_split must be >= 2")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")
        if self.class_weight not in ("balanced", "uniform"):
            raise ValueError("class_weight must be 'balanced' or 'uniform'")

    def n_split_features(self, n_features: int) -> int:
        if self.max_features == "all":
            return n_features
        if self.max_features == "sqrt":
            k = math.ceil(math.sqrt(n_features))
        else:
            k = math.ceil(math.log2(n_features)) if n_features > 1 else 1
        return min(max(k, 1), n_features)


@dataclass(frozen=True, eq=False)
class DecisionTree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    leaf_values: np.ndarray

    def __post_init__(self):
        n = len(self.feature)
        if n == 0:
            raise ForestError("a tree needs at least one node")
        for name in ("threshold", "left", "right"):
            if len(getattr(self, name)) != n:
                raise ForestError(f"tree array {name} has the wrong length")
        internal = self.feature >= 0
        kids = np.concatenate([self.left[internal], self.right[internal]])
        if kids.size and (kids.min() < 0 or kids.max() >= n):
            raise ForestError("internal node with a missing child")
        leaves = self.left[~internal]
        lv = self.leaf_values
        if lv.ndim != 2 or leaves.size and (leaves.min() < 0 or leaves.max() >= len(lv)):
            raise ForestError("leaf node without a weight vector")
        if np.any(lv < 0) or np.any(lv.sum(axis=1) <= 0):
            raise ForestError("leaf weight vectors must be non-negative and not all zero")

    @property
    def node_count(self) -> int:
        return len(self.feature)


@dataclass(frozen=True, eq=False)
class ForestModel:
    trees: tuple
    params: ForestParams
    feature_schema: tuple
    class_weights: np.ndarray

    def __post_init__(self):
        if len(self.trees) == 0:
            raise ForestError("a forest needs at least one tree")
        if len(self.trees) != self.params.n_estimators:
            raise ForestError(f"model has {len(self.trees)} trees but n_estimators={self.params.n_estimators}")
        object.__setattr__(self, "trees", tuple(self.trees))
        object.__setattr__(self, "feature_schema", tuple(self.feature_schema))
        object.__setattr__(self, "class_weights", np.asarray(self.class_weights, dtype=np.float64))


def class_weights_balanced(labels) -> np.ndarray:
    """``N / (K_present * count_c)`` per class; absent classes weigh 0."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ForestError("cannot weight an empty label set")
    counts = np.bincount(labels, minlength=N_CLASSES).astype(np.float64)
    present = counts > 0
    weights = np.zeros(N_CLASSES)
    weights[present] = labels.size / (present.sum() * counts[present])
    return weights


# ---------------------------------------------------------------------------
# tree construction


@nb.njit(cache=True, nogil=True)
def _splitmix(x):
    x = x + np.uint64(0x9E3779B97F4A7C15)
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


@nb.njit(cache=True, nogil=True)
def _build_tree(X, sorted_rows, sorted_vals, y, class_w, counts, n_classes,
                max_depth, mtry, min_split, min_leaf, key):
    d, n = X.shape
    nu = 0
    for r in range(n):
        if counts[r] > 0:
            nu += 1
    pos = np.full(n, -1, np.int32)
    lab = np.empty(nu, np.int32)
    cnt = np.empty(nu, np.int64)
    wt = np.empty(nu)
    k = 0
    for r in range(n):
        if counts[r] > 0:
            pos[r] = k
            lab[k] = y[r]
            cnt[k] = counts[r]
            wt[k] = class_w[y[r]] * counts[r]
            k += 1
    # Per feature: bootstrap members in ascending value order, kept node-contiguous.
    ordr = np.empty((d, nu), np.int32)
    vals = np.empty((d, nu))
    for f in range(d):
        k = 0
        for q in range(n):
            p = pos[sorted_rows[f, q]]
            if p >= 0:
                ordr[f, k] = p
                vals[f, k] = sorted_vals[f, q]
                k += 1

    draws = 0
    for i in range(nu):
        draws += cnt[i]
    cap_leaf = draws // min_leaf + 2
    cap = 2 * cap_leaf
    feat = np.full(cap, -1, np.int32)
    thr = np.zeros(cap)
    left = np.full(cap, -1, np.int32)
    right = np.full(cap, -1, np.int32)
    leaf_vals = np.zeros((cap_leaf, n_classes))
    stack_cap = min(cap, max_depth + 3)
    st_s = np.empty(stack_cap, np.int64)
    st_e = np.empty(stack_cap, np.int64)
    st_n = np.empty(stack_cap, np.int64)
    st_d = np.empty(stack_cap, np.int64)
    st_s[0] = 0
    st_e[0] = nu
    st_n[0] = 0
    st_d[0] = 0
    sp = 1
    n_nodes = 1
    n_leaves = 0

    goleft = np.zeros(nu, np.uint8)
    buf = np.empty(nu, np.int32)
    vbuf = np.empty(nu)
    perm = np.arange(d)
    tot = np.zeros(n_classes)
    lw = np.zeros(n_classes)

    while sp > 0:
        sp -= 1
        s = st_s[sp]
        e = st_e[sp]
        node = st_n[sp]
        depth = st_d[sp]
        tot[:] = 0.0
        ndraw = 0
        o0 = ordr[0]
        for i in range(s, e):
            p = o0[i]
            tot[lab[p]] += wt[p]
            ndraw += cnt[p]
        W = 0.0
        n_present = 0
        parent = 0.0
        for c in range(n_classes):
            W += tot[c]
            if tot[c] > 0:
                n_present += 1
            parent += tot[c] * tot[c]

        best_f = -1
        best_t = 0.0
        if depth < max_depth and n_present > 1 and ndraw >= min_split and ndraw >= 2 * min_leaf:
            parent /= W
            for j in range(d):
                perm[j] = j
            h = _splitmix(key ^ _splitmix(np.uint64(node)))
            for j in range(mtry):
                h = _splitmix(h + np.uint64(j))
                kk = j + np.int64(h % np.uint64(d - j))
                t = perm[j]
                perm[j] = perm[kk]
                perm[kk] = t
            chosen = np.sort(perm[:mtry])
            # Split score sum_c wl_c^2/WL + sum_c wr_c^2/WR; must beat the parent.
            # Scores within a relative 1e-12 count as ties and keep the earlier split.
            bar = parent * (1.0 + 1e-12)
            best = bar
            for f in chosen:
                lw[:] = 0.0
                nl = 0
                WL = 0.0
                sl = 0.0
                sr = parent * W
                of = ordr[f]
                vf = vals[f]
                for q in range(s, e - 1):
                    p = of[q]
                    a = wt[p]
                    cl = lab[p]
                    sl += a * (2.0 * lw[cl] + a)
                    sr += a * (a - 2.0 * (tot[cl] - lw[cl]))
                    lw[cl] += a
                    WL += a
                    nl += cnt[p]
                    if nl < min_leaf:
                        continue
                    if ndraw - nl < min_leaf:
                        break
                    v0 = vf[q]
                    v1 = vf[q + 1]
                    if v1 <= v0:
                        continue
                    g = sl / WL + sr / (W - WL)
                    if g > bar and (best_f < 0 or g > best * (1.0 + 1e-12)):
                        best = g
                        best_f = f
                        best_t = 0.5 * (v0 + v1)
                        if best_t >= v1:
                            best_t = v0

        if best_f < 0:
            feat[node] = -1
            left[node] = n_leaves
            leaf_vals[n_leaves, :] = tot
            n_leaves += 1
            continue

        ob = ordr[best_f]
        vb = vals[best_f]
        nlft = 0
        for i in range(s, e):
            gl = np.uint8(vb[i] <= best_t)
            goleft[ob[i]] = gl
            nlft += gl
        for f in range(d):
            of = ordr[f]
            vf = vals[f]
            a = s
            b = 0
            for i in range(s, e):
                p = of[i]
                v = vf[i]
                gl = goleft[p]
                of[a] = p
                vf[a] = v
                buf[b] = p
                vbuf[b] = v
                a += gl
                b += 1 - gl
            for i in range(b):
                of[a + i] = buf[i]
                vf[a + i] = vbuf[i]
        mid = s + nlft
        feat[node] = best_f
        thr[node] = best_t
        lchild = n_nodes
        rchild = n_nodes + 1
        n_nodes += 2
        left[node] = lchild
        right[node] = rchild
        st_s[sp] = mid
        st_e[sp] = e
        st_n[sp] = rchild
        st_d[sp] = depth + 1
        sp += 1
        st_s[sp] = s
        st_e[sp] = mid
        st_n[sp] = lchild
        st_d[sp] = depth + 1
        sp += 1

    return (feat[:n_nodes].copy(), thr[:n_nodes].copy(), left[:n_nodes].copy(),
            right[:n_nodes].copy(), leaf_vals[:n_leaves].copy())


def _tree_key(seed: int, tree_index: int) -> np.uint64:
    return np.uint64(((seed & _MASK64) * 0x9E3779B97F4A7C15 + tree_index * 0xD1B54A32D192ED03) & _MASK64)


def bootstrap_counts(n: int, seed: int, tree_index: int) -> np.ndarray:
    """How often each row is drawn into tree ``tree_index``'s bootstrap sample."""
    rng = np.random.Generator(np.random.Philox(key=np.array([tree_index, seed & _MASK64], dtype=np.uint64)))
    return np.bincount(rng.integers(0, n, size=n), minlength=n).astype(np.int64)


def train_forest(table, labels=None, params: ForestParams = ForestParams(), threads: int = 1) -> ForestModel:
    """Fit a forest to a feature table.

    ``labels`` defaults to the labels attached to ``table``. Sample weight is
    the class weight of the sample's label times its bootstrap multiplicity;
    ``min_samples_split`` and ``min_samples_leaf`` count bootstrap draws.
    """
    labels = table.labels if labels is None else labels
    if labels is None:
        raise ForestError("training needs labels")
    y = np.asarray(labels, dtype=np.int32)
    X = np.ascontiguousarray(np.asarray(table.values, dtype=np.float64).T)
    d, n = X.shape
    if y.shape != (n,):
        raise ForestError(f"{n} feature rows but {y.size} labels")
    if np.any((y == UNLABELED) | (y < 0) | (y >= N_CLASSES)):
        raise ForestError("every training row needs a valid class label")
    if n < params.min_samples_split:
        raise ForestError(f"need at least min_samples_split={params.min_samples_split} rows, got {n}")
    if np.unique(y).size < 2:
        raise ForestError("training data holds a single class")
    if d == 0:
        raise ForestError("feature table has no columns")

    if params.class_weight == "balanced":
        cw = class_weights_balanced(y)
    else:
        cw = (np.bincount(y, minlength=N_CLASSES) > 0).astype(np.float64)
    sorted_rows = np.argsort(X, axis=1, kind="stable").astype(np.int32)
    sorted_vals = np.take_along_axis(X, sorted_rows, axis=1)
    mtry = params.n_split_features(d)

    def fit_one(t: int) -> DecisionTree:
        counts = bootstrap_counts(n, params.seed, t)
        arrays = _build_tree(X, sorted_rows, sorted_vals, y, cw, counts, N_CLASSES,
                             params.max_depth, mtry, params.min_samples_split,
                             params.min_samples_leaf, _tree_key(params.seed, t))
        return DecisionTree(*arrays)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            trees = list(pool.map(fit_one, range(params.n_estimators)))
    else:
        trees = [fit_one(t) for t in range(params.n_estimators)]
    return ForestModel(tuple(trees), params, tuple(table.columns), cw)


# ---------------------------------------------------------------------------
# prediction


@nb.njit(cache=True, parallel=True)
def _forest_scores(X, feat, thr, left, right, leaf_vals, node_off, leaf_off, n_classes):
    m = X.shape[0]
    n_trees = node_off.shape[0] - 1
    out = np.zeros((m, n_classes))
    for i in nb.prange(m):
        for t in range(n_trees):
            base = node_off[t]
            node = 0
            while feat[base + node] >= 0:
                if X[i, feat[base + node]] <= thr[base + node]:
                    node = left[base + node]
                else:
                    node = right[base + node]
            leaf = leaf_off[t] + left[base + node]
            for c in range(n_classes):
                out[i, c] += leaf_vals[leaf, c]
    return out


def _flatten(model: ForestModel):
    trees = model.trees
    node_off = np.concatenate([[0], np.cumsum([t.node_count for t in trees])]).astype(np.int64)
    leaf_off = np.concatenate([[0], np.cumsum([len(t.leaf_values) for t in trees])]).astype(np.int64)
    return (
        np.concatenate([t.feature for t in trees]).astype(np.int32),
        np.concatenate([t.threshold for t in trees]).astype(np.float64),
        np.concatenate([t.left for t in trees]).astype(np.int32),
        np.concatenate([t.right for t in trees]).astype(np.int32),
        np.concatenate([t.leaf_values for t in trees]).astype(np.float64),
        node_off,
        leaf_off,
    )


def predict(model: ForestModel, table, return_scores: bool = False):
    """Labels from the normalised sum of leaf weight vectors over all trees.

    Ties resolve to the lowest class code. With ``return_scores`` also
    returns the per-class score rows (each summing to 1).
    """
    if tuple(table.columns) != model.feature_schema:
        raise ForestError(
            f"feature schema mismatch: model expects {list(model.feature_schema)}, got {list(table.columns)}")
    X = np.ascontiguousarray(table.values, dtype=np.float64)
    n_classes = model.trees[0].leaf_values.shape[1]
    raw = _forest_scores(X, *_flatten(model), n_classes)
    scores = raw / raw.sum(axis=1, keepdims=True) if len(raw) else raw
    pred = np.argmax(scores, axis=1).astype(np.int8) if len(raw) else np.empty(0, np.int8)
    return (pred, scores) if return_scores else pred


# ---------------------------------------------------------------------------
# serialisation


def model_to_bytes(model: ForestModel) -> bytes:
    header = json.dumps({
        "params": asdict(model.params),
        "feature_schema": list(model.feature_schema),
        "class_weights": [float(w) for w in model.class_weights],
        "n_classes": int(model.trees[0].leaf_values.shape[1]),
        "n_trees": len(model.trees),
    }, sort_keys=True).encode("utf-8")
    parts = [MODEL_MAGIC, struct.pack("<IQ", MODEL_VERSION, len(header)), header]
    for t in model.trees:
        parts.append(struct.pack("<QQ", t.node_count, len(t.leaf_values)))
        parts.append(t.feature.astype("<i4").tobytes())
        parts.append(t.threshold.astype("<f8").tobytes())
        parts.append(t.left.astype("<i4").tobytes())
        parts.append(t.right.astype("<i4").tobytes())
        parts.append(np.ascontiguousarray(t.leaf_values, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def model_from_bytes(data: bytes) -> ForestModel:
    if len(data) < len(MODEL_MAGIC) + 16 or not data.startswith(MODEL_MAGIC):
        raise ForestError("not a forest model file")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise ForestError("model file is corrupt or truncated (checksum mismatch)")
    version, hlen = struct.unpack_from("<IQ", body, len(MODEL_MAGIC))
    if version != MODEL_VERSION:
        raise ForestError(f"unsupported model format version {version}")
    off = len(MODEL_MAGIC) + 12
    try:
        header = json.loads(body[off:off + hlen].decode("utf-8"))
        off += hlen
        k = header["n_classes"]
        trees = []
        for _ in range(header["n_trees"]):
            n_nodes, n_leaves = struct.unpack_from("<QQ", body, off)
            off += 16

            def take(dtype, count):
                nonlocal off
                arr = np.frombuffer(body, dtype=dtype, count=count, offset=off)
                off += arr.nbytes
                return arr.copy()

            feat = take("<i4", n_nodes)
            thr = take("<f8", n_nodes)
            left = take("<i4", n_nodes)
            right = take("<i4", n_nodes)
            lv = take("<f8", n_leaves * k).reshape(n_leaves, k)
            trees.append(DecisionTree(feat, thr, left, right, lv))
        if off != len(body):
            raise ForestError("trailing bytes after the last tree")
        params = ForestParams(**header["params"])
        return ForestModel(tuple(trees), params, tuple(header["feature_schema"]),
                           np.array(header["class_weights"]))
    except (KeyError, ValueError, struct.error, TypeError) as e:
        if isinstance(e, ForestError):
            raise
        raise ForestError(f"invalid model file: {e}") from e


def save_model(model: ForestModel, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path) -> ForestModel:
    return model_from_bytes(Path(path).read_bytes())


def node_count(model: ForestModel) -> int:
    return sum(t.node_count for t in model.trees)


def forest_summary(model: ForestModel) -> dict:
    return {
        "n_trees": len(model.trees),
        "nodes": node_count(model),
        "features": list(model.feature_schema),
        "class_weights": [round(float(w), 6) for w in model.class_weights],
    }
