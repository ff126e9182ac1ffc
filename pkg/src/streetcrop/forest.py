"""Random-forest crop classifier.

Trees are CART classifiers grown on bootstrap resamples with Gini
impurity, a random subset of features per split, and class-distribution
leaves. Tree construction and traversal are numba kernels released from
the GIL, so trees train and predict in parallel threads.

Every tree draws its randomness from streams derived from ``(seed,
tree_index)`` only, so results do not depend on thread count or on the
order trees finish in.
"""

from __future__ import annotations

import io
import json
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numba
import numpy as np

from .labeling import CLASS_LABELS, N_CLASSES, CropClass

MAGIC = b"SCRF"
FORMAT_VERSION = 1


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 500
    max_features: int | None = None  # None -> ceil(sqrt(n_features))
    min_leaf: int = 1
    max_depth: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be at least 1")
        if self.min_leaf < 1:
            raise ValueError("min_leaf must be at least 1")
        if self.max_features is not None and self.max_features < 1:
            raise ValueError("max_features must be at least 1")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a non-negative 64-bit integer")

    def features_per_split(self, n_features: int) -> int:
        k = self.max_features or math.ceil(math.sqrt(n_features))
        if k > n_features:
            raise ValueError(f"max_features {k} exceeds the {n_features} available features")
        return k


@dataclass(frozen=True, eq=False)
class Tree:
    feature: np.ndarray    # int32, -1 at leaves
    threshold: np.ndarray  # float64; go left when x <= threshold
    left: np.ndarray       # int32 child index within the tree, -1 at leaves
    right: np.ndarray
    value: np.ndarray      # (n_nodes, n_classes) class distribution

    @property
    def n_nodes(self) -> int:
        return self.feature.shape[0]

    def depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=np.int64)
        for i in range(self.n_nodes):
            if self.left[i] >= 0:
                depth[self.left[i]] = depth[self.right[i]] = depth[i] + 1
        return int(depth.max())


# -- numba kernels ---------------------------------------------------------

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


@numba.njit(nogil=True, cache=True)
def _splitmix64(state):
    state[0] = state[0] + _GOLDEN
    z = state[0]
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


@numba.njit(nogil=True, cache=True)
def _build_tree(X, y, sample, n_classes, max_features, min_leaf, max_depth, seed):
    n = sample.shape[0]
    d = X.shape[1]
    cap = 2 * n + 1
    feature = np.full(cap, -1, np.int32)
    threshold = np.zeros(cap, np.float64)
    left = np.full(cap, -1, np.int32)
    right = np.full(cap, -1, np.int32)
    value = np.zeros((cap, n_classes), np.float64)

    idx = sample.copy()
    buf = np.empty(n, np.int64)
    vals = np.empty(n, np.float64)
    counts = np.zeros(n_classes, np.int64)
    lcounts = np.zeros(n_classes, np.int64)
    feats = np.arange(d)
    state = np.empty(1, np.uint64)
    state[0] = seed

    st_start = np.empty(cap, np.int64)
    st_end = np.empty(cap, np.int64)
    st_depth = np.empty(cap, np.int64)
    st_node = np.empty(cap, np.int64)
    sp = 0
    st_start[0] = 0
    st_end[0] = n
    st_depth[0] = 0
    st_node[0] = 0
    sp = 1
    n_nodes = 1

    while sp > 0:
        sp -= 1
        start = st_start[sp]
        end = st_end[sp]
        depth = st_depth[sp]
        node = st_node[sp]
        m = end - start

        counts[:] = 0
        for i in range(start, end):
            counts[y[idx[i]]] += 1
        present = 0
        sumsq = 0
        for k in range(n_classes):
            value[node, k] = counts[k] / m
            if counts[k] > 0:
                present += 1
            sumsq += counts[k] * counts[k]
        if present <= 1 or m < 2 * min_leaf or (max_depth >= 0 and depth >= max_depth):
            continue

        # Fisher-Yates: features are examined in this order
        for i in range(d - 1, 0, -1):
            j = np.int64(_splitmix64(state) % np.uint64(i + 1))
            tmp = feats[i]
            feats[i] = feats[j]
            feats[j] = tmp

        best_score = np.inf
        best_f = -1
        best_t = 0.0
        visited = 0
        for fi in range(d):
            if visited >= max_features and best_f >= 0:
                break
            f = feats[fi]
            for i in range(m):
                vals[i] = X[idx[start + i], f]
            order = np.argsort(vals[:m], kind="mergesort")
            if vals[order[0]] == vals[order[m - 1]]:
                continue
            visited += 1
            lcounts[:] = 0
            sl = 0
            sr = sumsq
            for i in range(m - 1):
                c = y[idx[start + order[i]]]
                sl += 2 * lcounts[c] + 1
                lcounts[c] += 1
                rc = counts[c] - lcounts[c]
                sr -= 2 * rc + 1
                nl = i + 1
                nr = m - nl
                if nl < min_leaf or nr < min_leaf:
                    continue
                v0 = vals[order[i]]
                v1 = vals[order[i + 1]]
                if v0 == v1:
                    continue
                # n * weighted Gini = m - (sl/nl + sr/nr)
                score = -(sl / nl + sr / nr)
                if score < best_score:
                    best_score = score
                    best_f = f
                    t = 0.5 * (v0 + v1)
                    if t >= v1:
                        t = v0
                    best_t = t
        if best_f < 0:
            continue

        # stable partition of idx[start:end]
        nl = 0
        for i in range(start, end):
            if X[idx[i], best_f] <= best_t:
                buf[nl] = idx[i]
                nl += 1
        nr = 0
        for i in range(start, end):
            if X[idx[i], best_f] > best_t:
                buf[nl + nr] = idx[i]
                nr += 1
        for i in range(m):
            idx[start + i] = buf[i]

        feature[node] = best_f
        threshold[node] = best_t
        left[node] = n_nodes
        right[node] = n_nodes + 1
        # push right first so the left subtree is numbered first
        st_start[sp] = start + nl
        st_end[sp] = end
        st_depth[sp] = depth + 1
        st_node[sp] = n_nodes + 1
        sp += 1
        st_start[sp] = start
        st_end[sp] = start + nl
        st_depth[sp] = depth + 1
        st_node[sp] = n_nodes
        sp += 1
        n_nodes += 2

    return (
        feature[:n_nodes].copy(),
        threshold[:n_nodes].copy(),
        left[:n_nodes].copy(),
        right[:n_nodes].copy(),
        value[:n_nodes].copy(),
    )


@numba.njit(nogil=True, cache=True)
def _accumulate(X, feature, threshold, left, right, value, offsets, out):
    n = X.shape[0]
    for t in range(offsets.shape[0] - 1):
        base = offsets[t]
        for i in range(n):
            node = 0
            while left[base + node] >= 0:
                if X[i, feature[base + node]] <= threshold[base + node]:
                    node = left[base + node]
                else:
                    node = right[base + node]
            for k in range(out.shape[1]):
                out[i, k] += value[base + node, k]


# -- model -----------------------------------------------------------------


def _tree_streams(seed: int, tree_index: int, n: int) -> tuple[np.ndarray, np.uint64]:
    """Bootstrap indices and split-sampling seed for one tree; depends on (seed, tree_index, n) only."""
    ss = np.random.SeedSequence(seed, spawn_key=(tree_index,))
    boot_ss, split_ss = ss.spawn(2)
    boot = np.random.default_rng(boot_ss).integers(0, n, size=n)
    return boot.astype(np.int64), split_ss.generate_state(1, np.uint64)[0]


@dataclass(eq=False)
class RandomForestModel:
    trees: list[Tree]
    params: ForestParams
    n_features: int
    classes: list[str] = field(default_factory=lambda: list(CLASS_LABELS))
    _packed: tuple | None = field(default=None, repr=False)

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def _pack(self):
        if self._packed is None:
            offsets = np.zeros(len(self.trees) + 1, dtype=np.int64)
            offsets[1:] = np.cumsum([t.n_nodes for t in self.trees])
            self._packed = (
                np.concatenate([t.feature for t in self.trees]),
                np.concatenate([t.threshold for t in self.trees]),
                np.concatenate([t.left for t in self.trees]),
                np.concatenate([t.right for t in self.trees]),
                np.ascontiguousarray(np.concatenate([t.value for t in self.trees])),
                offsets,
            )
        return self._packed

    def predict_proba(self, X, threads: int = 1) -> np.ndarray:
        X = np.ascontiguousarray(np.asarray(X, dtype=np.float64))
        if X.ndim == 1:
            X = X[None, :]
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ShapeError(f"expected {self.n_features} features per row, got shape {X.shape}")
        feature, threshold, left, right, value, offsets = self._pack()
        out = np.zeros((X.shape[0], self.n_classes), dtype=np.float64)
        if threads <= 1 or X.shape[0] < 1024:
            _accumulate(X, feature, threshold, left, right, value, offsets, out)
        else:
            bounds = np.linspace(0, X.shape[0], threads + 1).astype(int)
            with ThreadPoolExecutor(threads) as pool:
                list(pool.map(
                    lambda ab: _accumulate(X[ab[0]:ab[1]], feature, threshold, left, right, value,
                                           offsets, out[ab[0]:ab[1]]),
                    zip(bounds[:-1], bounds[1:]),
                ))
        return out / len(self.trees)

    def predict_classes(self, X, threads: int = 1) -> np.ndarray:
        # argmax returns the first maximum: ties go to the lowest class index
        return self.predict_proba(X, threads).argmax(axis=1)

    def split_counts(self) -> np.ndarray:
        counts = np.zeros(self.n_features, dtype=np.int64)
        for t in self.trees:
            f = t.feature[t.feature >= 0]
            counts += np.bincount(f, minlength=self.n_features)
        return counts

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        p = self.params
        buf.write(struct.pack(
            "<4sHHIIIIIiQ",
            MAGIC, FORMAT_VERSION, 0,
            len(self.trees), self.n_features, self.n_classes,
            p.features_per_split(self.n_features), p.min_leaf,
            -1 if p.max_depth is None else p.max_depth, p.seed,
        ))
        legend = json.dumps(self.classes).encode()
        buf.write(struct.pack("<I", len(legend)))
        buf.write(legend)
        for t in self.trees:
            buf.write(struct.pack("<I", t.n_nodes))
            buf.write(t.feature.astype("<i4").tobytes())
            buf.write(t.threshold.astype("<f8").tobytes())
            buf.write(t.left.astype("<i4").tobytes())
            buf.write(t.right.astype("<i4").tobytes())
            buf.write(t.value.astype("<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "RandomForestModel":
        head = struct.Struct("<4sHHIIIIIiQ")
        (magic, version, _, n_trees, n_features, n_classes, max_features,
         min_leaf, max_depth, seed) = head.unpack_from(data, 0)
        if magic != MAGIC:
            raise ValueError("not a forest model file")
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported model format version {version}")
        pos = head.size
        (n_legend,) = struct.unpack_from("<I", data, pos)
        pos += 4
        classes = json.loads(data[pos:pos + n_legend].decode())
        pos += n_legend
        trees = []
        for _ in range(n_trees):
            (nn,) = struct.unpack_from("<I", data, pos)
            pos += 4

            def take(dtype, native, count):
                nonlocal pos
                arr = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
                pos += arr.nbytes
                return arr.astype(native)

            feature = take("<i4", np.int32, nn)
            threshold = take("<f8", np.float64, nn)
            left = take("<i4", np.int32, nn)
            right = take("<i4", np.int32, nn)
            value = take("<f8", np.float64, nn * n_classes).reshape(nn, n_classes)
            trees.append(Tree(feature, threshold, left, right, value))
        params = ForestParams(n_trees, max_features, min_leaf, None if max_depth < 0 else max_depth, seed)
        return cls(trees, params, n_features, classes)

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "RandomForestModel":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())

    def summary(self, feature_names: Sequence[str] | None = None) -> str:
        nodes = [t.n_nodes for t in self.trees]
        leaves = [int((t.left < 0).sum()) for t in self.trees]
        depths = [t.depth() for t in self.trees]
        p = self.params
        lines = [
            f"random forest, format v{FORMAT_VERSION}",
            f"trees: {len(self.trees)}  features: {self.n_features}  classes: {','.join(self.classes)}",
            f"max_features: {p.features_per_split(self.n_features)}  min_leaf: {p.min_leaf}  "
            f"max_depth: {'unlimited' if p.max_depth is None else p.max_depth}  seed: {p.seed}",
            f"nodes per tree: min {min(nodes)} mean {np.mean(nodes):.1f} max {max(nodes)}",
            f"leaves per tree: mean {np.mean(leaves):.1f}  depth: mean {np.mean(depths):.1f} max {max(depths)}",
            "split counts by feature:",
        ]
        names = feature_names or [f"f{i}" for i in range(self.n_features)]
        for name, c in zip(names, self.split_counts()):
            lines.append(f"  {name}: {c}")
        return "\n".join(lines) + "\n"


def train(
    X,
    y,
    params: ForestParams = ForestParams(),
    classes: Sequence[str] = CLASS_LABELS,
    threads: int = 1,
) -> RandomForestModel:
    """Grow ``params.n_trees`` trees on bootstrap resamples of ``(X, y)``."""
    X = np.ascontiguousarray(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("training data is empty")
    if y.shape != (X.shape[0],):
        raise ShapeError(f"{X.shape[0]} feature rows but {y.shape} labels")
    if not np.all(np.isfinite(X)):
        raise ValueError("training features must be finite")
    n_classes = len(classes)
    if y.min() < 0 or y.max() >= n_classes:
        raise ValueError(f"labels must lie in [0, {n_classes})")
    n, d = X.shape
    k = params.features_per_split(d)
    max_depth = -1 if params.max_depth is None else params.max_depth

    def grow(t: int) -> Tree:
        boot, split_seed = _tree_streams(params.seed, t, n)
        return Tree(*_build_tree(X, y, boot, n_classes, k, params.min_leaf, max_depth, split_seed))

    if threads <= 1:
        trees = [grow(t) for t in range(params.n_trees)]
    else:
        with ThreadPoolExecutor(threads) as pool:
            trees = list(pool.map(grow, range(params.n_trees)))
    return RandomForestModel(trees, params, d, list(classes))


def predict(model: RandomForestModel, x) -> tuple[CropClass | int, np.ndarray]:
    """Class and probability vector for one feature vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError("predict takes a single feature vector")
    proba = model.predict_proba(x)[0]
    cls = int(proba.argmax())
    if model.n_classes == N_CLASSES:
        return CropClass(cls), proba
    return cls, proba


# -- metrics ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Metrics:
    confusion: np.ndarray  # rows = truth, columns = prediction
    overall_accuracy: float
    per_class_f1: np.ndarray
    macro_f1: float
    weighted_f1: float
    precision: np.ndarray
    recall: np.ndarray


def confusion_matrix(y_true, y_pred, n_classes: int = N_CLASSES) -> np.ndarray:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def metrics_from_confusion(cm: np.ndarray) -> Metrics:
    cm = np.asarray(cm, dtype=np.int64)
    total = cm.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    tp = np.diag(cm).astype(np.float64)
    pred_pos = cm.sum(axis=0).astype(np.float64)
    support = cm.sum(axis=1).astype(np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(pred_pos > 0, tp / pred_pos, 0.0)
        recall = np.where(support > 0, tp / support, 0.0)
        f1 = np.where(precision + recall > 0, 2 * precision * recall / (precision + recall), 0.0)
    return Metrics(
        confusion=cm,
        overall_accuracy=float(tp.sum() / total),
        per_class_f1=f1,
        macro_f1=float(f1.mean()),
        weighted_f1=float((f1 * support).sum() / total),
        precision=precision,
        recall=recall,
    )


def evaluate_predictions(y_true, y_pred, n_classes: int = N_CLASSES) -> Metrics:
    if len(y_true) == 0:
        raise ValueError("empty test set")
    return metrics_from_confusion(confusion_matrix(y_true, y_pred, n_classes))


def evaluate(model: RandomForestModel, X_test, y_test, threads: int = 1) -> Metrics:
    if len(y_test) == 0:
        raise ValueError("empty test set")
    return evaluate_predictions(y_test, model.predict_classes(X_test, threads), model.n_classes)


REPORT_HEADER = ["overall_acc", "overall_f1", "weighted_f1"] + [f"{c}_f1" for c in CLASS_LABELS]


def write_report(path, metrics: Metrics, extra: dict | None = None) -> None:
    """Evaluation report with Table-5 style columns; ``overall_f1`` is the macro mean."""
    cols = list(REPORT_HEADER)
    vals = [metrics.overall_accuracy, metrics.macro_f1, metrics.weighted_f1] + list(metrics.per_class_f1)
    for k, v in (extra or {}).items():
        cols.append(k)
        vals.append(v)
    with open(path, "w") as f:
        f.write(",".join(cols) + "\n")
        f.write(",".join(f"{v:.6f}" if isinstance(v, (float, np.floating)) else str(v) for v in vals) + "\n")
