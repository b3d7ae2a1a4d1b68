"""Client-side private update: clipped average gradient step plus noise."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .glm import ModelSpec, average_gradient, check_weights


@dataclass(frozen=True)
class PrivacyParams:
    """Noise calibration for one client update.

    ``epsilon = inf`` disables client noise entirely (the no-noise baselines).
    """

    epsilon: float
    gamma: float
    clip_lo: float = -1.0
    clip_hi: float = 1.0
    noise: str = "laplace"
    delta: float | None = None
    level: str = "feature"

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if not self.clip_lo < self.clip_hi:
            raise ValueError("clip_lo must be < clip_hi")
        if self.noise not in ("laplace", "gaussian"):
            raise ValueError(f"unknown noise family {self.noise!r}")
        if self.noise == "gaussian" and not (self.delta is not None and 0 < self.delta < 0.5):
            raise ValueError("gaussian noise needs delta in (0, 1/2)")
        if self.level not in ("feature", "model"):
            raise ValueError(f"unknown privacy level {self.level!r}")

    @property
    def noiseless(self) -> bool:
        return math.isinf(self.epsilon)

    @property
    def sensitivity(self) -> float:
        return self.gamma * (self.clip_hi - self.clip_lo)

    def scale(self, p: int = 1) -> float:
        """Per-coordinate noise scale (Laplace b or Gaussian sigma)."""
        if self.noiseless:
            return 0.0
        if self.noise == "laplace":
            s = self.sensitivity / self.epsilon
        else:
            from .privacy import gaussian_sigma

            s = gaussian_sigma(self.sensitivity, self.epsilon, self.delta)
        return s * p if self.level == "model" else s

    def variance(self, p: int = 1) -> float:
        """Per-coordinate variance of the client noise."""
        s = self.scale(p)
        return 2.0 * s * s if self.noise == "laplace" else s * s

    def to_dict(self) -> dict:
        return {
            "epsilon": None if self.noiseless else self.epsilon,
            "gamma": self.gamma,
            "clip_lo": self.clip_lo,
            "clip_hi": self.clip_hi,
            "noise": self.noise,
            "delta": self.delta,
            "level": self.level,
        }

    @classmethod
    def from_dict(cls, d) -> PrivacyParams:
        eps = d.get("epsilon")
        return cls(
            epsilon=math.inf if eps is None else float(eps),
            gamma=float(d["gamma"]),
            clip_lo=float(d.get("clip_lo", -1.0)),
            clip_hi=float(d.get("clip_hi", 1.0)),
            noise=d.get("noise", "laplace"),
            delta=d.get("delta"),
            level=d.get("level", "feature"),
        )


def clip(g, lo: float = -1.0, hi: float = 1.0):
    if not lo < hi:
        raise ValueError("lo must be < hi")
    return np.clip(g, lo, hi)


def laplace_from_uniform(u, scale: float):
    """Inverse CDF of Laplace(0, scale) at ``u`` in (-1/2, 1/2)."""
    u = np.asarray(u, dtype=float)
    return scale * np.sign(u) * np.log1p(-2.0 * np.abs(u))


def laplace_sample(scale: float, rng: np.random.Generator, size=None):
    if not scale > 0:
        raise ValueError("scale must be positive")
    u = rng.random(size) - 0.5
    # rng.random() is in [0, 1); u == -0.5 would give log(0)
    u = np.where(u == -0.5, 0.0, u)
    out = laplace_from_uniform(u, scale)
    return float(out) if size is None else out


def noise_vector(params: PrivacyParams, shape, p: int, rng: np.random.Generator) -> np.ndarray:
    if params.noiseless:
        return np.zeros(shape)
    s = params.scale(p)
    if params.noise == "laplace":
        return laplace_sample(s, rng, size=shape)
    return rng.normal(0.0, s, size=shape)


def client_update(w, X, y, params: PrivacyParams, spec: ModelSpec, rng: np.random.Generator) -> np.ndarray:
    """One private update of a drawn model on a client's local batch.

    Raises ``EmptyBatch`` for a client with no examples; the caller skips the
    round in that case.
    """
    w = check_weights(spec, w)
    g = clip(average_gradient(spec, w, X, y), params.clip_lo, params.clip_hi)
    return w - params.gamma * g + noise_vector(params, w.shape, spec.dim, rng)
