"""Utility prediction backends behind one interface: a keyed lookup table plus
regression-tree and random-forest estimators trained on aggregated observations."""

from __future__ import annotations

import json
import math
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin

from .events import StreamSchema
from .stats import ObsKey
from .validation import check_matrix, check_sample_weight, check_vector
from .zobrist import ZobristKeys

DEFAULT_MODES = ("mean", "zero", "one")


class UtilityTable:
    """Per-type hash tables from 64-bit feature keys to utilities.

    Lookups of combinations never seen in training return the type's default:
    its occurrence-weighted mean utility (or a constant 0/1, per ``default``).
    With ``debug=True`` the full feature tuple is kept per key so tests can
    detect key collisions.
    """

    def __init__(self, keys: ZobristKeys, n_types: int, default: str = "mean", debug: bool = False):
        if default not in DEFAULT_MODES:
            raise ValueError(f"default must be one of {DEFAULT_MODES}")
        self.keys = keys
        self.n_types = n_types
        self.default_mode = default
        self.debug = debug
        self.tables: list[dict[int, float]] = [{} for _ in range(n_types)]
        self.defaults: list[float] = [self._constant_default()] * n_types
        self._debug_tuples: list[dict[int, ObsKey]] = [{} for _ in range(n_types)]

    def _constant_default(self) -> float:
        return 1.0 if self.default_mode == "one" else 0.0

    @classmethod
    def from_stats(
        cls,
        agg: dict[ObsKey, tuple[float, int]],
        utilities: dict[ObsKey, float],
        keys: ZobristKeys,
        n_types: int,
        default: str = "mean",
        debug: bool = False,
    ) -> "UtilityTable":
        table = cls(keys, n_types, default, debug)
        mass = [0.0] * n_types
        occ = [0] * n_types
        for key, u in utilities.items():
            tid, count_bins, attr_bins = key
            k = keys.key_for(count_bins, attr_bins)
            if debug:
                prior = table._debug_tuples[tid].get(k)
                if prior is not None and prior != key:
                    raise ValueError(f"key collision between {prior} and {key}")
                table._debug_tuples[tid][k] = key
            table.tables[tid][k] = u
            m, o = agg[key]
            mass[tid] += m
            occ[tid] += o
        if default == "mean":
            total_mass = sum(mass)
            total_occ = sum(occ)
            global_mean = total_mass / total_occ if total_occ else 0.0
            table.defaults = [
                (mass[t] / occ[t]) if occ[t] else global_mean for t in range(n_types)
            ]
        return table

    def lookup(self, type_id: int, key: int) -> float:
        return self.tables[type_id].get(key, self.defaults[type_id])

    def utility_for(self, type_id: int, count_bins: Sequence[int], attr_bins: Sequence[int]) -> float:
        """Offline path: rebuilds the key from scratch."""
        return self.lookup(type_id, self.keys.key_for(count_bins, attr_bins))

    @property
    def n_entries(self) -> int:
        return sum(len(t) for t in self.tables)

    def to_payload(self) -> dict:
        return {
            "zobrist_seed": self.keys.seed,
            "n_types": self.n_types,
            "max_count_bin": self.keys.max_count_bin,
            "attr_n_bins": list(self.keys.attr_n_bins),
            "default_mode": self.default_mode,
            "defaults": self.defaults,
            "tables": [{format(k, "x"): u for k, u in sorted(t.items())} for t in self.tables],
        }

    @classmethod
    def from_payload(cls, payload: dict) -> "UtilityTable":
        keys = ZobristKeys(
            payload["n_types"],
            payload["max_count_bin"],
            payload["attr_n_bins"],
            payload["zobrist_seed"],
        )
        table = cls(keys, payload["n_types"], payload["default_mode"])
        table.defaults = [float(d) for d in payload["defaults"]]
        table.tables = [
            {int(k, 16): float(u) for k, u in t.items()} for t in payload["tables"]
        ]
        return table


class FeatureEncoder:
    """Maps (type, count bins, attribute bins) to the flat numeric vector the
    tree models consume: one-hot type, then count bins, then attribute bins."""

    def __init__(self, n_types: int, n_attrs: int):
        self.n_types = n_types
        self.n_attrs = n_attrs

    @property
    def n_features(self) -> int:
        return 2 * self.n_types + self.n_attrs

    def encode(self, type_id: int, count_bins: Sequence[int], attr_bins: Sequence[int]) -> list[float]:
        row = [0.0] * self.n_types
        row[type_id] = 1.0
        row.extend(float(c) for c in count_bins)
        row.extend(float(b) for b in attr_bins)
        return row

    def matrix(self, keys: Sequence[ObsKey]) -> np.ndarray:
        return np.array([self.encode(t, c, a) for t, c, a in keys], dtype=np.float64)

    def feature_names(self, schema: StreamSchema) -> list[str]:
        names = [f"is_{t.name}" for t in schema.types]
        names += [f"count_{t.name}" for t in schema.types]
        names += [f"bin_{a.name}" for a in schema.attributes]
        return names


class _Tree:
    """Flat-array binary regression tree (index 0 is the root)."""

    __slots__ = ("feature", "threshold", "left", "right", "value")

    def __init__(self):
        self.feature: list[int] = []
        self.threshold: list[float] = []
        self.left: list[int] = []
        self.right: list[int] = []
        self.value: list[float] = []

    def add_leaf(self, value: float) -> int:
        idx = len(self.feature)
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(float(value))
        return idx

    def add_split(self, feature: int, threshold: float) -> int:
        idx = len(self.feature)
        self.feature.append(int(feature))
        self.threshold.append(float(threshold))
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(0.0)
        return idx

    def predict_one(self, x: Sequence[float]) -> float:
        idx = 0
        feature = self.feature
        while feature[idx] >= 0:
            if x[feature[idx]] <= self.threshold[idx]:
                idx = self.left[idx]
            else:
                idx = self.right[idx]
        return self.value[idx]

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.array([self.predict_one(row) for row in X], dtype=np.float64)

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def depth(self) -> int:
        depths = [0] * self.n_nodes
        best = 0
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                depths[self.left[i]] = depths[i] + 1
                depths[self.right[i]] = depths[i] + 1
            else:
                best = max(best, depths[i])
        return best

    def to_preorder(self) -> list[dict]:
        out: list[dict] = []

        def walk(idx: int) -> None:
            if self.feature[idx] < 0:
                out.append({"leaf": self.value[idx]})
            else:
                out.append({"feature": self.feature[idx], "threshold": self.threshold[idx]})
                walk(self.left[idx])
                walk(self.right[idx])

        if self.n_nodes:
            walk(0)
        return out

    @classmethod
    def from_preorder(cls, nodes: list[dict]) -> "_Tree":
        tree = cls()
        pos = 0

        def build() -> int:
            nonlocal pos
            node = nodes[pos]
            pos += 1
            if "leaf" in node:
                return tree.add_leaf(float(node["leaf"]))
            idx = tree.add_split(int(node["feature"]), float(node["threshold"]))
            tree.left[idx] = build()
            tree.right[idx] = build()
            return idx

        if nodes:
            build()
        return tree


def _best_split(X: np.ndarray, y: np.ndarray, w: np.ndarray, rows: np.ndarray, features: Sequence[int]):
    """Lowest combined weighted SSE split; returns (feature, threshold) or None.

    Ties resolve to the first candidate in ascending (feature, threshold) order.
    """
    best_sse = math.inf
    best = None
    yr = y[rows]
    wr = w[rows]
    wy = wr * yr
    wy2 = wy * yr
    tot_w = float(wr.sum())
    tot_wy = float(wy.sum())
    tot_wy2 = float(wy2.sum())
    for f in features:
        vals = X[rows, f]
        order = np.argsort(vals, kind="stable")
        vs = vals[order]
        if vs[0] == vs[-1]:
            continue
        cw = np.cumsum(wr[order])[:-1]
        cwy = np.cumsum(wy[order])[:-1]
        cwy2 = np.cumsum(wy2[order])[:-1]
        boundary = np.nonzero(np.diff(vs) > 0)[0]
        bw = cw[boundary]
        bwy = cwy[boundary]
        bwy2 = cwy2[boundary]
        with np.errstate(divide="ignore", invalid="ignore"):
            sse_l = bwy2 - np.where(bw > 0, bwy * bwy / bw, 0.0)
            rw = tot_w - bw
            rwy = tot_wy - bwy
            sse_r = (tot_wy2 - bwy2) - np.where(rw > 0, rwy * rwy / rw, 0.0)
        sse = sse_l + sse_r
        i = int(np.argmin(sse))
        if best is None or sse[i] < best_sse - 1e-12 * max(1.0, abs(best_sse)):
            best_sse = float(sse[i])
            b = boundary[i]
            best = (f, float((vs[b] + vs[b + 1]) / 2.0))
    return best


def _build_tree(
    X: np.ndarray,
    y: np.ndarray,
    w: np.ndarray,
    max_depth: int | None,
    min_samples_split: int,
    feature_rng: np.random.Generator | None,
    max_features: int | None,
) -> _Tree:
    """Grow a tree with an explicit stack (unlimited depth must not hit the
    interpreter recursion limit). Children are expanded left before right so
    node numbering and feature-subset draws are deterministic."""
    tree = _Tree()
    n_features = X.shape[1]
    # (rows, depth, parent index, is_left); parent -1 marks the root
    stack: list[tuple[np.ndarray, int, int, bool]] = [(np.arange(len(y)), 0, -1, False)]
    while stack:
        rows, depth, parent, is_left = stack.pop()
        wr = w[rows]
        yr = y[rows]
        if yr.min() == yr.max():
            # constant leaf predicts the label itself, bitwise
            mean = float(yr[0])
            variance = 0.0
        else:
            tw = wr.sum()
            mean = float((wr * yr).sum() / tw)
            variance = float((wr * (yr - mean) ** 2).sum() / tw)
        idx: int | None = None
        if (
            len(rows) >= min_samples_split
            and (max_depth is None or depth < max_depth)
            and variance > 1e-12
        ):
            if feature_rng is not None and max_features is not None and max_features < n_features:
                feats = np.sort(feature_rng.choice(n_features, size=max_features, replace=False))
            else:
                feats = range(n_features)
            split = _best_split(X, y, w, rows, feats)
            if split is not None:
                f, thr = split
                mask = X[rows, f] <= thr
                idx = tree.add_split(f, thr)
                # push right first so the left child is expanded next
                stack.append((rows[~mask], depth + 1, idx, False))
                stack.append((rows[mask], depth + 1, idx, True))
        if idx is None:
            idx = tree.add_leaf(mean)
        if parent >= 0:
            if is_left:
                tree.left[parent] = idx
            else:
                tree.right[parent] = idx
    return tree


class UtilityTreeRegressor(BaseEstimator, RegressorMixin):
    """Variance-reduction regression tree with occurrence-weighted leaves.

    Leaves predict the weighted mean label, so predictions stay within the
    label range; training rows are typically the aggregated observation keys
    weighted by their occurrence counts.
    """

    def __init__(self, max_depth: int | None = 12, min_samples_split: int = 4):
        self.max_depth = max_depth
        self.min_samples_split = min_samples_split

    def fit(self, X, y, sample_weight=None):
        X = check_matrix(X)
        y = check_vector(y, len(X))
        w = check_sample_weight(sample_weight, len(X))
        if len(X) == 0:
            raise ValueError("empty training set")
        if self.min_samples_split < 2:
            raise ValueError("min_samples_split must be >= 2")
        self.n_features_in_ = X.shape[1]
        self.tree_ = _build_tree(X, y, w, self.max_depth, self.min_samples_split, None, None)
        return self

    def predict(self, X):
        X = check_matrix(X)
        return self.tree_.predict(X)

    def predict_one(self, x: Sequence[float]) -> float:
        return self.tree_.predict_one(x)


class UtilityForestRegressor(BaseEstimator, RegressorMixin):
    """Bagged regression trees: weight-proportional bootstrap resampling plus
    per-split random feature subsets of size ceil(sqrt(n_features)); the
    prediction is the plain mean over trees."""

    def __init__(
        self,
        n_estimators: int = 10,
        max_depth: int | None = 12,
        min_samples_split: int = 4,
        random_state: int = 0,
    ):
        self.n_estimators = n_estimators
        self.max_depth = max_depth
        self.min_samples_split = min_samples_split
        self.random_state = random_state

    def fit(self, X, y, sample_weight=None):
        X = check_matrix(X)
        y = check_vector(y, len(X))
        w = check_sample_weight(sample_weight, len(X))
        if len(X) == 0:
            raise ValueError("empty training set")
        if self.n_estimators < 1:
            raise ValueError("n_estimators must be >= 1")
        self.n_features_in_ = X.shape[1]
        n = len(X)
        p = w / w.sum()
        k = int(math.ceil(math.sqrt(X.shape[1])))
        rng = np.random.default_rng(self.random_state)
        self.trees_: list[_Tree] = []
        ones = np.ones(n, dtype=np.float64)
        for _ in range(self.n_estimators):
            rows = rng.choice(n, size=n, replace=True, p=p)
            Xi, yi = X[rows], y[rows]
            self.trees_.append(
                _build_tree(Xi, yi, ones, self.max_depth, self.min_samples_split, rng, k)
            )
        return self

    def predict(self, X):
        X = check_matrix(X)
        preds = np.zeros(len(X), dtype=np.float64)
        for tree in self.trees_:
            preds += tree.predict(X)
        return preds / len(self.trees_)

    def predict_one(self, x: Sequence[float]) -> float:
        return sum(t.predict_one(x) for t in self.trees_) / len(self.trees_)


class MlUtilityModel:
    """Adapter giving tree/forest estimators the same per-event utility call the
    keyed table provides."""

    def __init__(self, encoder: FeatureEncoder, estimator):
        self.encoder = encoder
        self.estimator = estimator

    def utility_for(self, type_id: int, count_bins: Sequence[int], attr_bins: Sequence[int]) -> float:
        return float(self.estimator.predict_one(self.encoder.encode(type_id, count_bins, attr_bins)))

    def to_payload(self) -> dict:
        est = self.estimator
        payload = {
            "n_types": self.encoder.n_types,
            "n_attrs": self.encoder.n_attrs,
        }
        if isinstance(est, UtilityTreeRegressor):
            payload["estimator"] = "tree"
            payload["params"] = est.get_params()
            payload["nodes"] = est.tree_.to_preorder()
        elif isinstance(est, UtilityForestRegressor):
            payload["estimator"] = "forest"
            payload["params"] = est.get_params()
            payload["trees"] = [t.to_preorder() for t in est.trees_]
        else:
            raise TypeError(f"cannot serialize estimator {type(est).__name__}")
        return payload

    @classmethod
    def from_payload(cls, payload: dict) -> "MlUtilityModel":
        encoder = FeatureEncoder(payload["n_types"], payload["n_attrs"])
        if payload["estimator"] == "tree":
            est = UtilityTreeRegressor(**payload["params"])
            est.tree_ = _Tree.from_preorder(payload["nodes"])
            est.n_features_in_ = encoder.n_features
        elif payload["estimator"] == "forest":
            est = UtilityForestRegressor(**payload["params"])
            est.trees_ = [_Tree.from_preorder(nodes) for nodes in payload["trees"]]
            est.n_features_in_ = encoder.n_features
        else:
            raise ValueError(f"unknown estimator kind {payload['estimator']!r}")
        return cls(encoder, est)


MODEL_SCHEMA_ID = "shed-model/v1"


def save_model_file(path: str, kind: str, payload: dict, extra: dict | None = None) -> None:
    doc = {"schema": MODEL_SCHEMA_ID, "kind": kind, "model": payload}
    if extra:
        doc.update(extra)
    with open(path, "w") as f:
        json.dump(doc, f, sort_keys=True, indent=2)
        f.write("\n")


def load_model_file(path: str) -> dict:
    with open(path) as f:
        doc = json.load(f)
    if doc.get("schema") != MODEL_SCHEMA_ID:
        raise ValueError(f"{path}: unsupported model schema {doc.get('schema')!r}")
    return doc
