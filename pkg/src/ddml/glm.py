"""Generalized linear models: feature expansion, links, gradients and losses.

Weights are stored as a 2-D float array of shape ``(rows, p + 1)``; column 0
holds the intercept and ``rows`` is 1 for the linear and logistic families
and ``num_classes`` for multiclass.  Feature matrices are ``(n, p)`` with every
entry in [0, 1].
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from itertools import combinations
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import EmptyBatch, EmptyList, ShapeMismatch, UnknownFeature, UnknownLevel

FAMILIES = ("linear", "logistic", "multiclass")
KINDS = ("numeric", "categorical", "boolean")
LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class FeatureDef:
    """One raw client-side field.

    ``drop_first`` switches a categorical to reference coding (the first
    level encodes as all zeros), which is how the 33-weight known model
    counts its dummies.
    """

    name: str
    kind: str
    min: float | None = None
    max: float | None = None
    levels: tuple[str, ...] = ()
    drop_first: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown feature kind {self.kind!r}")
        if self.kind == "numeric":
            if self.min is None or self.max is None or not self.min < self.max:
                raise ValueError(f"numeric feature {self.name!r} needs min < max")
        if self.kind == "categorical":
            object.__setattr__(self, "levels", tuple(self.levels))
            if len(set(self.levels)) < 2 or len(set(self.levels)) != len(self.levels):
                raise ValueError(f"categorical feature {self.name!r} needs >=2 distinct levels")

    @property
    def width(self) -> int:
        if self.kind == "categorical":
            return len(self.levels) - (1 if self.drop_first else 0)
        return 1

    def column_names(self) -> list[str]:
        if self.kind != "categorical":
            return [self.name]
        levels = self.levels[1:] if self.drop_first else self.levels
        return [f"{self.name}={lvl}" for lvl in levels]

    def encode(self, value) -> np.ndarray:
        if self.kind == "numeric":
            v = min(max(float(value), self.min), self.max)
            return np.array([(v - self.min) / (self.max - self.min)])
        if self.kind == "boolean":
            return np.array([1.0 if _truthy(value) else 0.0])
        if value not in self.levels:
            raise UnknownLevel(f"{self.name}: unknown level {value!r}")
        onehot = np.zeros(len(self.levels))
        onehot[self.levels.index(value)] = 1.0
        return onehot[1:] if self.drop_first else onehot

    def to_dict(self) -> dict:
        out = {"name": self.name, "kind": self.kind}
        if self.kind == "numeric":
            out.update(min=self.min, max=self.max)
        if self.kind == "categorical":
            out["levels"] = list(self.levels)
            if self.drop_first:
                out["drop_first"] = True
        return out

    @classmethod
    def from_dict(cls, d: Mapping) -> FeatureDef:
        return cls(
            name=d["name"],
            kind=d["kind"],
            min=d.get("min"),
            max=d.get("max"),
            levels=tuple(d.get("levels") or ()),
            drop_first=bool(d.get("drop_first", False)),
        )


def _truthy(value) -> bool:
    if isinstance(value, str):
        return value.strip().lower() in ("1", "true", "t", "yes", "y")
    return bool(value)


@dataclass(frozen=True)
class ModelSpec:
    family: str
    features: tuple[FeatureDef, ...]
    crosses: tuple[tuple[str, str], ...] = ()
    num_classes: int = 1
    version: int = 0
    _index: dict = field(default=None, init=False, repr=False, compare=False)
    _dim: int = field(default=0, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if self.family == "multiclass" and self.num_classes < 2:
            raise ValueError("multiclass needs num_classes >= 2")
        if self.family != "multiclass" and self.num_classes != 1:
            object.__setattr__(self, "num_classes", 1)
        if self.version < 0:
            raise ValueError("version must be non-negative")
        object.__setattr__(self, "features", tuple(self.features))
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise ValueError("duplicate feature names")
        crosses = tuple(tuple(c) for c in self.crosses)
        for a, b in crosses:
            if a == b:
                raise ValueError(f"cross ({a}, {b}) must reference two distinct features")
            for n in (a, b):
                if n not in names:
                    raise UnknownFeature(f"cross references unknown feature {n!r}")
        object.__setattr__(self, "crosses", crosses)
        index = {f.name: f for f in self.features}
        object.__setattr__(self, "_index", index)
        dim = sum(f.width for f in self.features) + sum(index[a].width * index[b].width for a, b in crosses)
        object.__setattr__(self, "_dim", dim)

    @property
    def dim(self) -> int:
        """Expanded feature dimension p (intercept excluded)."""
        return self._dim

    @property
    def rows(self) -> int:
        return self.num_classes if self.family == "multiclass" else 1

    @property
    def weight_shape(self) -> tuple[int, int]:
        return (self.rows, self.dim + 1)

    def zeros(self) -> np.ndarray:
        return np.zeros(self.weight_shape)

    def column_names(self) -> list[str]:
        names = [n for f in self.features for n in f.column_names()]
        for a, b in self.crosses:
            for u in self._index[a].column_names():
                for v in self._index[b].column_names():
                    names.append(f"{u}*{v}")
        return names

    def revised(self, **changes) -> ModelSpec:
        """Copy with ``changes`` applied and the schema version bumped."""
        changes.setdefault("version", self.version + 1)
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "num_classes": self.num_classes,
            "features": [f.to_dict() for f in self.features],
            "crosses": [list(c) for c in self.crosses],
            "version": self.version,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> ModelSpec:
        return cls(
            family=d["family"],
            features=tuple(FeatureDef.from_dict(f) for f in d["features"]),
            crosses=tuple(tuple(c) for c in d.get("crosses", ())),
            num_classes=int(d.get("num_classes") or 1),
            version=int(d.get("version", 0)),
        )

    @classmethod
    def dense(cls, family: str, p: int, num_classes: int = 1, version: int = 0) -> ModelSpec:
        """Spec of ``p`` numeric features already scaled to [0, 1]."""
        feats = tuple(FeatureDef(f"x{i}", "numeric", 0.0, 1.0) for i in range(p))
        return cls(family, feats, num_classes=num_classes, version=version)

    @classmethod
    def all_crosses(cls, family: str, features: Sequence[FeatureDef], **kw) -> ModelSpec:
        pairs = tuple((a.name, b.name) for a, b in combinations(features, 2))
        return cls(family, tuple(features), crosses=pairs, **kw)


def expand_features(spec: ModelSpec, raw: Mapping) -> np.ndarray:
    """Map one raw record onto its length-p vector in [0, 1]."""
    for name in raw:
        if name not in spec._index:
            raise UnknownFeature(f"unknown feature {name!r}")
    blocks = {}
    for f in spec.features:
        if f.name not in raw:
            raise UnknownFeature(f"missing value for feature {f.name!r}")
        blocks[f.name] = f.encode(raw[f.name])
    parts = [blocks[f.name] for f in spec.features]
    parts += [np.outer(blocks[a], blocks[b]).ravel() for a, b in spec.crosses]
    return np.concatenate(parts)


def expand_many(spec: ModelSpec, raws: Iterable[Mapping]) -> np.ndarray:
    rows = [expand_features(spec, r) for r in raws]
    if not rows:
        return np.zeros((0, spec.dim))
    return np.vstack(rows)


def _encode_column(f: FeatureDef, values) -> np.ndarray:
    if f.kind == "numeric":
        v = np.clip(np.asarray(values, dtype=float), f.min, f.max)
        return ((v - f.min) / (f.max - f.min))[:, None]
    if f.kind == "boolean":
        return np.array([_truthy(v) for v in values], dtype=float)[:, None]
    lookup = {lvl: i for i, lvl in enumerate(f.levels)}
    try:
        idx = np.array([lookup[v] for v in values], dtype=int)
    except KeyError as e:
        raise UnknownLevel(f"{f.name}: unknown level {e.args[0]!r}") from None
    onehot = np.zeros((len(idx), len(f.levels)))
    onehot[np.arange(len(idx)), idx] = 1.0
    return onehot[:, 1:] if f.drop_first else onehot


def expand_table(spec: ModelSpec, table: Mapping[str, Sequence]) -> np.ndarray:
    """Column-oriented ``expand_features``: one value sequence per feature."""
    for name in table:
        if name not in spec._index:
            raise UnknownFeature(f"unknown feature {name!r}")
    blocks = {}
    for f in spec.features:
        if f.name not in table:
            raise UnknownFeature(f"missing column for feature {f.name!r}")
        blocks[f.name] = _encode_column(f, table[f.name])
    parts = [blocks[f.name] for f in spec.features]
    for a, b in spec.crosses:
        u, v = blocks[a], blocks[b]
        parts.append((u[:, :, None] * v[:, None, :]).reshape(len(u), -1))
    return np.hstack(parts)


def check_weights(spec: ModelSpec, w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if w.shape != spec.weight_shape:
        raise ShapeMismatch(f"weights shape {w.shape} != {spec.weight_shape}")
    return w


def _features(spec: ModelSpec, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != spec.dim:
        raise ShapeMismatch(f"feature length {x.shape[-1]} != {spec.dim}")
    return x


def scores(w: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Linear predictor, shape ``(n, rows)``."""
    return X @ w[:, 1:].T + w[:, 0]


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=float)))


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _mean_response(spec: ModelSpec, w: np.ndarray, X: np.ndarray) -> np.ndarray:
    eta = scores(w, X)
    if spec.family == "linear":
        return eta[:, 0]
    if spec.family == "logistic":
        return sigmoid(eta[:, 0])
    return softmax(eta)


def predict(spec: ModelSpec, w, x):
    """Expected response for one feature vector or a matrix of them.

    Scalar families return a float (or an ``(n,)`` array); multiclass returns
    class probabilities.
    """
    w = check_weights(spec, w)
    x = _features(spec, x)
    out = _mean_response(spec, w, np.atleast_2d(x))
    if x.ndim == 1:
        return float(out[0]) if spec.family != "multiclass" else out[0]
    return out


def _residual(spec: ModelSpec, w: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    mu = _mean_response(spec, w, X)
    if spec.family == "multiclass":
        r = mu.copy()
        r[np.arange(len(y)), y.astype(int)] -= 1.0
        return r
    return (mu - y)[:, None]


def _batch(spec: ModelSpec, X, y):
    X = np.atleast_2d(_features(spec, X))
    y = np.atleast_1d(np.asarray(y))
    if len(X) == 0:
        raise EmptyBatch("batch is empty")
    if len(y) != len(X):
        raise ShapeMismatch(f"{len(X)} feature rows but {len(y)} responses")
    if spec.family == "multiclass" and (y.min() < 0 or y.max() >= spec.num_classes):
        raise ValueError("class index out of range")
    return X, y


def average_gradient(spec: ModelSpec, w, X, y) -> np.ndarray:
    """Batch mean of ``(y_hat - y) * x`` per coordinate, intercept using x = 1."""
    w = check_weights(spec, w)
    X, y = _batch(spec, X, y)
    r = _residual(spec, w, X, y)
    n = len(X)
    grad = np.empty_like(w)
    grad[:, 0] = r.sum(axis=0) / n
    grad[:, 1:] = r.T @ X / n
    return grad


def loss(spec: ModelSpec, w, X, y) -> float:
    """Mean per-example loss: half squared error (linear) or cross-entropy."""
    w = check_weights(spec, w)
    X, y = _batch(spec, X, y)
    mu = _mean_response(spec, w, X)
    if spec.family == "linear":
        return float(0.5 * np.mean((mu - y) ** 2))
    if spec.family == "logistic":
        y = y.astype(float)
        p1 = np.maximum(mu, LOG_FLOOR)
        p0 = np.maximum(1.0 - mu, LOG_FLOOR)
        return float(-np.mean(y * np.log(p1) + (1.0 - y) * np.log(p0)))
    picked = mu[np.arange(len(y)), y.astype(int)]
    return float(-np.mean(np.log(np.maximum(picked, LOG_FLOOR))))


def accuracy(spec: ModelSpec, w, X, y) -> float:
    w = check_weights(spec, w)
    X, y = _batch(spec, X, y)
    mu = _mean_response(spec, w, X)
    if spec.family == "multiclass":
        return float(np.mean(mu.argmax(axis=1) == y))
    return float(np.mean((mu >= 0.5) == (np.asarray(y, dtype=float) >= 0.5)))


def average_models(models: Sequence[np.ndarray]) -> np.ndarray:
    if len(models) == 0:
        raise EmptyList("no models to average")
    arrs = [np.asarray(m, dtype=float) for m in models]
    shape = arrs[0].shape
    if any(a.shape != shape for a in arrs):
        raise ShapeMismatch("models differ in shape")
    return np.mean(np.stack(arrs), axis=0)
