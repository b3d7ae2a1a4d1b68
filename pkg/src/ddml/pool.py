"""Server side: a pool of k model instances with draw/discard replacement.

Every public operation on :class:`InstancePool` is atomic with respect to the
others (a short per-operation lock guards slot writes, counters and the RNG),
but nothing is held between a draw and the matching submit.  Two clients that
drew concurrently may overwrite each other's targets; that is intended.
"""

from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .client import laplace_sample
from .errors import PoolTooSmall, ShapeMismatch
from .glm import ModelSpec, average_models

KINDS = (
    "draw_and_discard",
    "same_instance",
    "accept_rate",
    "average",
    "server_batch",
    "single_model",
)
_ALIASES = {
    "dd": "draw_and_discard",
    "draw-and-discard": "draw_and_discard",
    "same": "same_instance",
    "same-instance": "same_instance",
    "accept": "accept_rate",
    "accept-rate": "accept_rate",
    "average_before_overwrite": "average",
    "server-batch": "server_batch",
    "batch": "server_batch",
    "single": "single_model",
}


@dataclass(frozen=True)
class Strategy:
    """Replacement rule applied on submit.

    ``base`` is only used by ``average`` (which slot gets averaged with the
    incoming model); ``batch_size`` only by ``server_batch`` and counts
    examples.  ``accept_k`` sets the 1/k acceptance of ``accept_rate`` when it
    runs on fewer instances than the k it imitates (defaults to the pool size).
    """

    kind: str = "draw_and_discard"
    base: str | None = None
    batch_size: int | None = None
    accept_k: int | None = None

    def __post_init__(self):
        kind = _ALIASES.get(self.kind, self.kind)
        object.__setattr__(self, "kind", kind)
        if kind not in KINDS:
            raise ValueError(f"unknown strategy {self.kind!r}")
        if kind == "average":
            base = _ALIASES.get(self.base or "draw_and_discard", self.base or "draw_and_discard")
            if base not in ("draw_and_discard", "same_instance"):
                raise ValueError("average strategy base must be draw_and_discard or same_instance")
            object.__setattr__(self, "base", base)
        if kind == "server_batch" and not (self.batch_size and self.batch_size >= 1):
            raise ValueError("server_batch needs batch_size >= 1")
        if self.accept_k is not None and (kind != "accept_rate" or self.accept_k < 1):
            raise ValueError("accept_k >= 1 only applies to accept_rate")

    @property
    def needs_token(self) -> bool:
        """Whether submit must be told which instance was drawn."""
        return self.kind == "same_instance" or (self.kind == "average" and self.base == "same_instance")

    @property
    def fixed_k(self) -> int | None:
        return 1 if self.kind in ("single_model", "server_batch") else None

    def __str__(self) -> str:
        if self.kind == "average":
            return f"average:{self.base}"
        if self.kind == "server_batch":
            return f"server_batch:{self.batch_size}"
        if self.kind == "accept_rate" and self.accept_k is not None:
            return f"accept_rate:{self.accept_k}"
        return self.kind

    @classmethod
    def parse(cls, text: str | Strategy) -> Strategy:
        if isinstance(text, Strategy):
            return text
        kind, _, arg = str(text).partition(":")
        kind = _ALIASES.get(kind, kind)
        if kind == "average":
            return cls(kind, base=arg or None)
        if kind == "server_batch":
            return cls(kind, batch_size=int(arg) if arg else None)
        if kind == "accept_rate":
            return cls(kind, accept_k=int(arg) if arg else None)
        return cls(kind)


@dataclass(frozen=True)
class SpamPolicy:
    t: float = 3.0
    enabled: bool = False

    def __post_init__(self):
        if not self.t > 0:
            raise ValueError("spam multiplier t must be positive")


class SubmitOutcome(NamedTuple):
    status: str  # accepted | rejected_spam | dropped
    index: int | None = None
    offending: tuple[int, ...] = ()


COUNTERS = ("draws", "submits", "accepted", "rejected_spam", "dropped", "discarded_preimages")


def spam_interval(instances: np.ndarray, t: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-weight acceptance band ``mean +/- t * sd`` (unbiased sd)."""
    k = instances.shape[0]
    if k < 2:
        raise PoolTooSmall("spam test needs at least two instances")
    mu = instances.mean(axis=0)
    sd = instances.std(axis=0, ddof=1)
    return mu - t * sd, mu + t * sd


class InstancePool:
    def __init__(self, instances, strategy=None, spam: SpamPolicy | None = None, gamma: float | None = None):
        arr = np.array(instances, dtype=float)
        if arr.ndim == 2:
            arr = arr[:, None, :]
        if arr.ndim != 3 or arr.shape[0] < 1:
            raise ValueError("instances must have shape (k, rows, cols)")
        self.strategy = Strategy.parse(strategy or "draw_and_discard")
        fixed = self.strategy.fixed_k
        if fixed is not None and arr.shape[0] != fixed:
            raise ValueError(f"{self.strategy} requires k = {fixed}")
        self.spam = spam or SpamPolicy()
        if self.spam.enabled and arr.shape[0] < 2:
            raise PoolTooSmall("spam test needs at least two instances")
        if self.strategy.kind == "server_batch" and not gamma:
            raise ValueError("server_batch needs the server learning rate gamma")
        self.gamma = gamma
        self._w = arr
        self._lock = threading.Lock()
        self._grad_sum = np.zeros(arr.shape[1:])
        self._grad_n = 0
        self.counters = dict.fromkeys(COUNTERS, 0)
        self.trace: list | None = None

    @property
    def k(self) -> int:
        return self._w.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self._w.shape[1:]

    @property
    def instances(self) -> np.ndarray:
        return self._w.copy()

    def record(self, on: bool = True):
        """Start (or stop) logging applied operations for later replay."""
        self.trace = [] if on else None

    def draw(self, rng: np.random.Generator) -> tuple[int, np.ndarray]:
        with self._lock:
            i = int(rng.integers(self.k)) if self.k > 1 else 0
            w = self._w[i].copy()
            self.counters["draws"] += 1
            if self.trace is not None:
                self.trace.append({"op": "draw"})
        return i, w

    def spam_check(self, updated) -> tuple[bool, tuple[int, ...]]:
        updated = self._coerce(updated)
        lo, hi = spam_interval(self._w, self.spam.t)
        bad = np.flatnonzero(((updated < lo) | (updated > hi)).ravel())
        return bad.size == 0, tuple(int(b) for b in bad)

    def _coerce(self, updated) -> np.ndarray:
        u = np.asarray(updated, dtype=float)
        if u.size != self._w[0].size:
            raise ShapeMismatch(f"expected {self._w[0].size} weights, got {u.size}")
        u = u.reshape(self.shape)
        if not np.all(np.isfinite(u)):
            raise ValueError("weights must be finite")
        return u

    def submit(self, updated, rng: np.random.Generator, drawn_index: int | None = None) -> SubmitOutcome:
        """Offer an updated model to the pool.

        ``drawn_index`` is the simulator-side draw token; it is required by
        strategies that write back into the drawn slot and otherwise only
        feeds the ``discarded_preimages`` counter.
        """
        u = self._coerce(updated)
        if self.strategy.needs_token and drawn_index is None:
            raise ValueError(f"{self.strategy} needs the drawn index")
        with self._lock:
            if self.trace is not None:
                entry = {"op": "submit", "weights": u.ravel().tolist()}
                if drawn_index is not None:
                    entry["drawn"] = int(drawn_index)
                self.trace.append(entry)
            self.counters["submits"] += 1
            if self.spam.enabled:
                ok, bad = self.spam_check(u)
                if not ok:
                    self.counters["rejected_spam"] += 1
                    return SubmitOutcome("rejected_spam", None, bad)
            return self._apply(u, rng, drawn_index)

    def _apply(self, u, rng, drawn) -> SubmitOutcome:
        kind = self.strategy.kind
        k = self.k
        if kind == "accept_rate" and rng.random() >= 1.0 / (self.strategy.accept_k or k):
            self.counters["dropped"] += 1
            return SubmitOutcome("dropped")
        if kind == "server_batch":
            # implied gradient relative to the current single model
            self._buffer((self._w[0] - u) / self.gamma)
            self.counters["accepted"] += 1
            return SubmitOutcome("accepted", 0)
        if kind in ("single_model",) or k == 1:
            j = 0
        elif kind == "same_instance" or (kind == "average" and self.strategy.base == "same_instance"):
            j = int(drawn)
        else:
            j = int(rng.integers(k))
        if kind == "average":
            u = 0.5 * (u + self._w[j])
        self._w[j] = u
        self.counters["accepted"] += 1
        if drawn is not None and j == drawn:
            self.counters["discarded_preimages"] += 1
        return SubmitOutcome("accepted", j)

    def submit_gradient(self, grad, n_examples: int = 1) -> SubmitOutcome:
        """Server-batch baseline: buffer a raw client gradient.

        ``batch_size`` counts examples, so a client's average gradient is
        weighted by the number of examples behind it.
        """
        if self.strategy.kind != "server_batch":
            raise ValueError("gradient submissions need the server_batch strategy")
        g = self._coerce(grad)
        with self._lock:
            self.counters["submits"] += 1
            self.counters["accepted"] += 1
            self._buffer(g, n_examples)
        return SubmitOutcome("accepted", 0)

    def _buffer(self, g, n: int = 1):
        self._grad_sum += n * g
        self._grad_n += n
        if self._grad_n >= self.strategy.batch_size:
            self._w[0] -= self.gamma * self._grad_sum / self._grad_n
            self._grad_sum[:] = 0.0
            self._grad_n = 0

    def stats(self) -> tuple[np.ndarray, np.ndarray]:
        return pool_stats(self)

    def average(self) -> np.ndarray:
        return pool_average(self)

    def snapshot(self) -> dict:
        with self._lock:
            return {
                "k": self.k,
                "strategy": str(self.strategy),
                "shape": list(self.shape),
                "instances": [w.ravel().tolist() for w in self._w],
                "counters": dict(self.counters),
                "spam": {"t": self.spam.t, "enabled": self.spam.enabled},
                "gamma": self.gamma,
            }

    def to_json(self) -> str:
        return json.dumps(self.snapshot())

    @classmethod
    def from_snapshot(cls, snap: dict) -> InstancePool:
        k = int(snap["k"])
        inst = np.asarray(snap["instances"], dtype=float)
        shape = snap.get("shape") or [1, inst.shape[1]]
        spam = SpamPolicy(**snap["spam"]) if snap.get("spam") else None
        pool = cls(inst.reshape(k, *shape), snap.get("strategy"), spam, snap.get("gamma"))
        pool.counters.update(snap.get("counters", {}))
        return pool


def init_pool(
    spec: ModelSpec,
    k: int,
    means,
    sigma2: float,
    rng: np.random.Generator,
    strategy=None,
    spam: SpamPolicy | None = None,
    gamma: float | None = None,
) -> InstancePool:
    """k instances drawn N(means, (k/2) * sigma2) per weight; k = 1 is exact."""
    if k < 1:
        raise ValueError("k must be >= 1")
    means = np.broadcast_to(np.asarray(means, dtype=float), spec.weight_shape)
    if k == 1:
        inst = means[None].copy()
    else:
        inst = means + rng.normal(0.0, math.sqrt(k / 2 * sigma2), (k, *spec.weight_shape))
    return InstancePool(inst, strategy, spam, gamma)


def pool_stats(pool: InstancePool) -> tuple[np.ndarray, np.ndarray]:
    """Per-weight mean and unbiased sample variance across instances."""
    if pool.k < 2:
        raise PoolTooSmall("variance needs at least two instances")
    w = pool._w
    return w.mean(axis=0), w.var(axis=0, ddof=1)


def pool_average(pool: InstancePool) -> np.ndarray:
    return average_models(list(pool._w))


def replay(trace, pool: InstancePool, rng: np.random.Generator) -> InstancePool:
    """Re-apply a recorded operation log to ``pool`` (mutated and returned)."""
    for entry in trace:
        if entry["op"] == "draw":
            pool.draw(rng)
        elif entry["op"] == "submit":
            pool.submit(entry["weights"], rng, entry.get("drawn"))
        else:
            raise ValueError(f"unknown trace op {entry['op']!r}")
    return pool


def pure_noise_variance(
    k: int,
    sigma2: float,
    rounds: int,
    replicas: int,
    rng: np.random.Generator,
    strategy: str = "draw_and_discard",
    every: int = 1,
) -> np.ndarray:
    """Mean unbiased sample variance of replicated scalar pools over time.

    Pools start at N(0, (k/2) sigma2); every round draws an instance, adds
    Laplace noise of variance ``sigma2`` and writes it back under
    ``strategy`` (``draw_and_discard`` or ``same_instance``).  There is no
    gradient pull.  Returns the replica-averaged variance after every
    ``every``-th round.
    """
    if k < 2:
        raise PoolTooSmall("variance needs at least two instances")
    kind = Strategy.parse(strategy).kind
    if kind not in ("draw_and_discard", "same_instance"):
        raise ValueError("pure-noise runs support draw_and_discard and same_instance")
    b = math.sqrt(sigma2 / 2.0)
    rows = np.arange(replicas)
    w = rng.normal(0.0, math.sqrt(k / 2 * sigma2), (replicas, k))
    out = np.empty(rounds // every)
    for r in range(rounds):
        i = rng.integers(0, k, replicas)
        new = w[rows, i] + laplace_sample(b, rng, size=replicas)
        j = i if kind == "same_instance" else rng.integers(0, k, replicas)
        w[rows, j] = new
        if (r + 1) % every == 0:
            out[(r + 1) // every - 1] = w.var(axis=1, ddof=1).mean()
    return out
