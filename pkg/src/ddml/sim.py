"""Deterministic end-to-end simulation of clients feeding a model pool.

A run partitions the training split into clients of ``examples_per_client``
records, visits ``passes * n_clients`` clients sampled with replacement, and
for each visit performs draw -> private client update -> submit.  Every
``eval_every`` ingested samples a :class:`MetricsRow` is emitted for the pool
average.  All randomness derives from ``SimConfig.seed``; data partition and
client order use their own streams so that configurations differing only in
strategy, k or epsilon see the same client sequence.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import itertools
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .client import PrivacyParams, client_update, clip
from .errors import BadMagic, CountMismatch, ShapeMismatch, TruncatedFile
from .glm import (
    FeatureDef,
    ModelSpec,
    _mean_response,
    accuracy,
    average_gradient,
    check_weights,
    expand_table,
    loss,
    scores,
)
from .pool import InstancePool, SpamPolicy, Strategy, init_pool

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
CSV_HEADER = ["samples_ingested", "updates_applied", "train_loss", "test_accuracy", "pool_variance_mean"]


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray

    def __len__(self):
        return len(self.y)

    def subset(self, idx) -> Dataset:
        return Dataset(self.X[idx], self.y[idx])


@dataclass
class MetricsRow:
    samples_ingested: int
    updates_applied: int
    train_loss: float
    test_accuracy: float
    pool_variance_mean: float

    def as_list(self) -> list:
        return [getattr(self, h) for h in CSV_HEADER]


# --- data -----------------------------------------------------------------


def _draw_raw(f: FeatureDef, n: int, rng: np.random.Generator):
    if f.kind == "numeric":
        return rng.uniform(f.min, f.max, n)
    if f.kind == "boolean":
        return rng.random(n) < 0.5
    return np.asarray(f.levels, dtype=object)[rng.integers(0, len(f.levels), n)]


def sample_response(spec: ModelSpec, w, X, rng: np.random.Generator, noise: float = 0.1) -> np.ndarray:
    mu = _mean_response(spec, check_weights(spec, w), X)
    if spec.family == "logistic":
        return (rng.random(len(X)) < mu).astype(float)
    if spec.family == "linear":
        return mu + rng.normal(0.0, noise, len(X)) if noise > 0 else mu
    cum = mu.cumsum(axis=1)
    u = rng.random((len(X), 1))
    return np.minimum((u > cum).sum(axis=1), spec.num_classes - 1)


def gen_synthetic(spec: ModelSpec, true_weights, n: int, seed: int, noise: float = 0.1) -> Dataset:
    """Features uniform per FeatureDef, responses drawn from the GLM itself.

    ``noise`` is the Gaussian residual sd for the linear family (0 gives a
    noiseless response).
    """
    w = np.asarray(true_weights, dtype=float)
    if w.shape != spec.weight_shape:
        raise ShapeMismatch(f"true weights shape {w.shape} != {spec.weight_shape}")
    rng = np.random.default_rng(seed)
    table = {f.name: _draw_raw(f, n, rng) for f in spec.features}
    X = expand_table(spec, table)
    return Dataset(X, sample_response(spec, w, X, rng, noise))


def desk_templates(p: int = 64, classes: int = 10, on: float = 0.7, off: float = 0.2, density: float = 0.3,
                   seed: int = 0) -> np.ndarray:
    """Per-class pixel probabilities: each pixel is ``on`` with probability ``density``."""
    rng = np.random.default_rng(seed)
    return np.where(rng.random((classes, p)) < density, on, off)


def desk_multiclass(p: int = 64, classes: int = 10, seed: int = 0, **template):
    """10-class stand-in for MNIST: binary pixels drawn from class templates.

    Returns ``(spec, true_weights)``.  With uniform classes and independent
    pixels the softmax model is exact, so the weights are the Bayes rule:
    ``logit(theta)`` per pixel, ``log(1/C) + sum log(1 - theta)`` intercept.
    """
    theta = desk_templates(p, classes, seed=seed, **template)
    spec = ModelSpec.dense("multiclass", p, num_classes=classes)
    w = np.zeros(spec.weight_shape)
    w[:, 1:] = np.log(theta) - np.log1p(-theta)
    w[:, 0] = math.log(1.0 / classes) + np.log1p(-theta).sum(axis=1)
    return spec, w


def sample_templates(theta: np.ndarray, n: int, seed: int) -> Dataset:
    rng = np.random.default_rng(seed)
    y = rng.integers(0, theta.shape[0], n)
    X = (rng.random((n, theta.shape[1])) < theta[y]).astype(float)
    return Dataset(X, y)


def write_idx(path, array: np.ndarray):
    """Write a uint8 array in IDX format (labels 1-D, images 3-D)."""
    arr = np.asarray(array, dtype=np.uint8)
    magic = {1: LABELS_MAGIC, 3: IMAGES_MAGIC}[arr.ndim]
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def _read_header(buf: bytes, magic: int, ndim: int, path) -> tuple[int, ...]:
    if len(buf) < 4 + 4 * ndim:
        raise TruncatedFile(f"{path}: header truncated")
    (found,) = struct.unpack(">I", buf[:4])
    if found != magic:
        raise BadMagic(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    return struct.unpack(f">{ndim}I", buf[4 : 4 + 4 * ndim])


def read_idx(images_path, labels_path, limit: int | None = None) -> Dataset:
    """Parse a big-endian IDX image/label pair into a 784-feature dataset."""
    ib = Path(images_path).read_bytes()
    lb = Path(labels_path).read_bytes()
    n_img, rows, cols = _read_header(ib, IMAGES_MAGIC, 3, images_path)
    (n_lab,) = _read_header(lb, LABELS_MAGIC, 1, labels_path)
    if n_img != n_lab:
        raise CountMismatch(f"{n_img} images but {n_lab} labels")
    n = n_img if limit is None else min(n_img, int(limit))
    px = rows * cols
    if len(ib) < 16 + n_img * px:
        raise TruncatedFile(f"{images_path}: expected {n_img * px} pixel bytes")
    if len(lb) < 8 + n_lab:
        raise TruncatedFile(f"{labels_path}: expected {n_lab} label bytes")
    X = np.frombuffer(ib, dtype=np.uint8, count=n * px, offset=16).reshape(n, px) / 255.0
    y = np.frombuffer(lb, dtype=np.uint8, count=n, offset=8).astype(np.int64)
    return Dataset(X, y)


# --- known-weights model ---------------------------------------------------

KNOWN_FEATURES = (
    FeatureDef("B", "boolean"),
    FeatureDef("E1", "categorical", levels=("A", "B", "C"), drop_first=True),
    FeatureDef("E2", "categorical", levels=("a", "b", "c", "d"), drop_first=True),
    FeatureDef("D", "numeric", 0.0, 2.5),
    FeatureDef("I", "numeric", 0.0, 4.0),
)

# coefficient per expanded column; E1=B is E11, E1=C is E12, E2=b..d are E21..E23
_KNOWN_COEFS = {
    "B": -1.18, "E1=B": 1.05, "E1=C": 1.6,
    "E2=b": -1.51, "E2=c": 0.72, "E2=d": 1.36,
    "D": -1.41, "I": -1.67,
    "B*E1=B": -1.14, "B*E1=C": 1.3,
    "B*E2=b": 1.72, "B*E2=c": 0.18, "B*E2=d": -1.52,
    "B*D": 1.72, "B*I": -1.17,
    "E1=B*E2=b": -0.12, "E1=B*E2=c": -0.53, "E1=B*E2=d": 1.00,
    "E1=C*E2=b": -0.42, "E1=C*E2=c": -1.64, "E1=C*E2=d": -1.53,
    "E1=B*D": 0.64, "E1=C*D": 0.48,
    "E1=B*I": -0.17, "E1=C*I": 0.44,
    "E2=b*D": -0.51, "E2=c*D": -0.68, "E2=d*D": 1.65,
    "E2=b*I": 0.51, "E2=c*I": -1.64, "E2=d*I": 0.57,
    "D*I": -0.80,
}
KNOWN_INTERCEPT = 0.34


def known_model() -> tuple[ModelSpec, np.ndarray]:
    """The 33-weight logistic model with all two-way crosses of five fields."""
    spec = ModelSpec.all_crosses("logistic", KNOWN_FEATURES)
    names = spec.column_names()
    w = spec.zeros()
    w[0, 0] = KNOWN_INTERCEPT
    for j, name in enumerate(names):
        w[0, j + 1] = _KNOWN_COEFS[name]
    return spec, w


# --- configuration ---------------------------------------------------------


@dataclass
class SimConfig:
    spec: ModelSpec
    privacy: PrivacyParams
    k: int = 1
    strategy: Strategy = field(default_factory=Strategy)
    examples_per_client: int = 10
    passes: int = 20
    seed: int = 0
    eval_every: int = 1000
    dataset: dict = field(default_factory=dict)
    spam: SpamPolicy = field(default_factory=SpamPolicy)
    init_epsilon: float = 1.0
    init_means: float = 0.0
    max_updates: int | None = None

    def __post_init__(self):
        self.strategy = Strategy.parse(self.strategy)
        if self.strategy.fixed_k is not None:
            self.k = self.strategy.fixed_k
        if self.examples_per_client < 1 or self.passes < 1 or self.eval_every < 1 or self.k < 1:
            raise ValueError("k, examples_per_client, passes and eval_every must be >= 1")

    def replace(self, **changes) -> SimConfig:
        if "epsilon" in changes:
            eps = changes.pop("epsilon")
            changes["privacy"] = dataclasses.replace(self.privacy, epsilon=math.inf if eps is None else eps)
        return dataclasses.replace(self, **changes)

    def init_sigma2(self) -> float:
        """Client-noise variance used to spread the initial pool."""
        params = self.privacy
        if params.noiseless:
            params = dataclasses.replace(params, epsilon=self.init_epsilon)
        return params.variance(self.spec.dim)

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "privacy": self.privacy.to_dict(),
            "k": self.k,
            "strategy": str(self.strategy),
            "examples_per_client": self.examples_per_client,
            "passes": self.passes,
            "seed": self.seed,
            "eval_every": self.eval_every,
            "dataset": self.dataset,
            "spam": {"t": self.spam.t, "enabled": self.spam.enabled},
            "init_epsilon": self.init_epsilon,
            "init_means": self.init_means,
            "max_updates": self.max_updates,
        }

    @classmethod
    def from_dict(cls, d: dict) -> SimConfig:
        d = dict(d)
        spec = d.pop("spec", None)
        dataset = d.get("dataset") or {}
        if spec is None:
            spec = _default_spec(dataset)
        else:
            spec = ModelSpec.from_dict(spec)
        kwargs = {k: v for k, v in d.items() if k in {f.name for f in dataclasses.fields(cls)}}
        kwargs["privacy"] = PrivacyParams.from_dict(d.get("privacy", {"gamma": 0.001}))
        if "spam" in d:
            kwargs["spam"] = SpamPolicy(**d["spam"])
        return cls(spec=spec, **{k: v for k, v in kwargs.items() if k != "spec"})

    @classmethod
    def load(cls, path) -> SimConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))


def _default_spec(dataset: dict) -> ModelSpec:
    kind = dataset.get("kind", "desk_multiclass")
    if kind == "idx":
        return ModelSpec.dense("multiclass", 784, num_classes=10)
    if kind == "known_model":
        return known_model()[0]
    if kind == "desk_multiclass":
        return desk_multiclass(dataset.get("p", 64), dataset.get("classes", 10), seed=dataset.get("weights_seed", 0))[0]
    raise ValueError(f"dataset kind {kind!r} needs an explicit spec")


def load_data(config: SimConfig) -> tuple[Dataset, Dataset]:
    """Materialize ``(train, test)`` for a config's dataset description.

    Kinds: ``desk_multiclass`` (default), ``known_model``, ``synthetic_glm``
    (explicit ``true_weights``) and ``idx`` (files, resolved against
    ``DDML_DATA_DIR`` when relative).
    """
    ds = config.dataset or {}
    kind = ds.get("kind", "desk_multiclass")
    n = int(ds.get("n", 6000))
    test_n = int(ds.get("test_n", 1000))
    data_seed = int(ds.get("seed", 12345))
    if kind == "idx":
        import os

        base = Path(os.environ.get("DDML_DATA_DIR", "."))
        res = lambda p: Path(p) if Path(p).is_absolute() else base / p  # noqa: E731
        train = read_idx(res(ds["images"]), res(ds["labels"]), ds.get("limit", n))
        if ds.get("test_images"):
            test = read_idx(res(ds["test_images"]), res(ds["test_labels"]), ds.get("test_limit", test_n))
        else:
            cut = max(1, len(train) - test_n)
            train, test = train.subset(slice(0, cut)), train.subset(slice(cut, None))
        return train, test
    if kind == "desk_multiclass":
        template = {key: float(ds[key]) for key in ("on", "off", "density") if key in ds}
        theta = desk_templates(config.spec.dim, config.spec.num_classes, seed=ds.get("weights_seed", 0), **template)
        train = sample_templates(theta, n, data_seed)
        return train, sample_templates(theta, test_n, data_seed + 1) if test_n else train
    if kind == "known_model":
        w = known_model()[1]
    elif kind == "synthetic_glm":
        w = np.asarray(ds["true_weights"], dtype=float).reshape(config.spec.weight_shape)
    else:
        raise ValueError(f"unknown dataset kind {kind!r}")
    noise = float(ds.get("noise", 0.1))
    train = gen_synthetic(config.spec, w, n, data_seed, noise)
    test = gen_synthetic(config.spec, w, test_n, data_seed + 1, noise) if test_n else train
    return train, test


# --- simulation --------------------------------------------------------------


def _streams(seed: int):
    ss = np.random.SeedSequence(seed)
    return [np.random.default_rng(s) for s in ss.spawn(4)]


def partition_clients(n: int, per_client: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(n)
    return [perm[i : i + per_client] for i in range(0, n, per_client)]


def _row(config, pool, samples, updates, train, test) -> MetricsRow:
    avg = pool.average()
    var = float(pool.stats()[1].mean()) if pool.k > 1 else 0.0
    return MetricsRow(
        samples_ingested=samples,
        updates_applied=updates,
        train_loss=loss(config.spec, avg, train.X, train.y),
        test_accuracy=accuracy(config.spec, avg, test.X, test.y),
        pool_variance_mean=var,
    )


def build_pool(config: SimConfig, rng: np.random.Generator) -> InstancePool:
    """Initial pool for a config (shared by the simulator and the server)."""
    strategy, k = config.strategy, config.k
    if strategy.kind == "accept_rate" and strategy.accept_k is None:
        # one model accepting 1 in k updates
        strategy, k = dataclasses.replace(strategy, accept_k=k), 1
    return init_pool(
        config.spec, k, config.init_means, config.init_sigma2(), rng,
        strategy, config.spam, gamma=config.privacy.gamma,
    )


def run_sim(config: SimConfig, train: Dataset | None = None, test: Dataset | None = None, return_pool: bool = False):
    """Run one configuration; returns the list of :class:`MetricsRow`.

    With ``return_pool`` the final :class:`InstancePool` is returned as well.
    """
    if train is None or test is None:
        train, test = load_data(config)
    spec, params = config.spec, config.privacy
    part_rng, order_rng, pool_rng, client_rng = _streams(config.seed)
    clients = partition_clients(len(train), config.examples_per_client, part_rng)
    # contiguous per-client batches
    batches = [(np.ascontiguousarray(train.X[c]), train.y[c]) for c in clients]
    steps = config.passes * len(clients)
    if config.max_updates is not None:
        steps = min(steps, config.max_updates)
    order = order_rng.integers(0, len(clients), steps) if clients else np.zeros(0, dtype=int)

    pool = build_pool(config, pool_rng)
    batch_mode = config.strategy.kind == "server_batch"
    rows = [_row(config, pool, 0, 0, train, test)]
    samples = updates = 0
    next_eval = config.eval_every
    for c in order:
        X, y = batches[c]
        if len(y) == 0:
            continue
        if batch_mode:
            _, w = pool.draw(pool_rng)
            g = clip(average_gradient(spec, w, X, y), params.clip_lo, params.clip_hi)
            pool.submit_gradient(g, len(y))
        else:
            i, w = pool.draw(pool_rng)
            pool.submit(client_update(w, X, y, params, spec, client_rng), pool_rng, drawn_index=i)
        updates += 1
        samples += len(y)
        while samples >= next_eval:
            rows.append(_row(config, pool, next_eval, updates, train, test))
            next_eval += config.eval_every
    return (rows, pool) if return_pool else rows


def rows_to_csv(rows: Iterable[MetricsRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in rows:
        writer.writerow([r.samples_ingested, r.updates_applied, repr(r.train_loss), repr(r.test_accuracy), repr(r.pool_variance_mean)])
    return buf.getvalue()


def read_csv(path) -> list[MetricsRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [
            MetricsRow(int(r["samples_ingested"]), int(r["updates_applied"]), float(r["train_loss"]),
                       float(r["test_accuracy"]), float(r["pool_variance_mean"]))
            for r in reader
        ]


# --- experiment grid ----------------------------------------------------------


def grid_cells(base: SimConfig, sweep: dict) -> list[tuple[str, SimConfig]]:
    """Expand a sweep into named configurations.

    ``sweep`` may hold lists under ``k``, ``epsilon`` (``None`` = no noise),
    ``strategy`` and ``batch_size``.  The first three are crossed; every
    ``batch_size`` adds a server-batch cell per epsilon.  All cells share the
    base seed.
    """
    ks = sweep.get("k") or [base.k]
    epss = sweep.get("epsilon") or [None if base.privacy.noiseless else base.privacy.epsilon]
    strategies = sweep.get("strategy") or ([] if sweep.get("batch_size") and not sweep.get("k") else [str(base.strategy)])
    cells = []
    for k, eps, strat in itertools.product(ks, epss, strategies):
        cfg = base.replace(k=k, epsilon=eps, strategy=Strategy.parse(strat))
        cells.append((f"k{cfg.k}_eps{_eps_tag(eps)}_{_slug(cfg.strategy)}", cfg))
    for eps, ns in itertools.product(epss, sweep.get("batch_size") or []):
        cfg = base.replace(k=1, epsilon=eps, strategy=Strategy("server_batch", batch_size=int(ns)))
        cells.append((f"ns{ns}_eps{_eps_tag(eps)}", cfg))
    return cells


def _eps_tag(eps) -> str:
    return "inf" if eps is None or math.isinf(eps) else f"{eps:.4g}"


def _slug(strategy: Strategy) -> str:
    return str(strategy).replace(":", "-")


def experiment_grid(base: SimConfig, sweep: dict, out_dir=None) -> dict[str, list[MetricsRow]]:
    """Run every cell; with ``out_dir`` write one CSV per cell plus manifest.json."""
    train, test = load_data(base)
    results = {}
    manifest = []
    for name, cfg in grid_cells(base, sweep):
        rows = run_sim(cfg, train, test)
        results[name] = rows
        manifest.append({"cell": name, "seed": cfg.seed, "k": cfg.k, "strategy": str(cfg.strategy),
                         "epsilon": None if cfg.privacy.noiseless else cfg.privacy.epsilon, "file": f"{name}.csv"})
        if out_dir is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            (out / f"{name}.csv").write_text(rows_to_csv(rows))
    if out_dir is not None:
        doc = {"base": base.to_dict(), "sweep": sweep, "cells": manifest}
        (Path(out_dir) / "manifest.json").write_text(json.dumps(doc, indent=2))
    return results


# --- known-weights recovery -------------------------------------------------------


@dataclass
class Recovery:
    estimate: np.ndarray
    abs_error: np.ndarray
    max_error: float
    rows: list[MetricsRow]


def recover_weights(config: SimConfig, true_weights=None, train=None, test=None) -> Recovery:
    """Train on synthetic data with known weights and compare the pool average."""
    if true_weights is None:
        ds = config.dataset or {}
        if ds.get("kind") == "known_model":
            true_weights = known_model()[1]
        elif ds.get("kind") == "synthetic_glm":
            true_weights = np.asarray(ds["true_weights"], dtype=float).reshape(config.spec.weight_shape)
        else:
            raise ValueError("recover_weights needs a synthetic source with known weights")
    rows, pool = run_sim(config, train, test, return_pool=True)
    est = pool.average()
    err = np.abs(est - np.asarray(true_weights, dtype=float))
    return Recovery(est, err, float(err.max()), rows)


def positive_rate(spec: ModelSpec, w, n: int = 100_000, seed: int = 0) -> float:
    return float(np.mean(gen_synthetic(spec, w, n, seed).y))
