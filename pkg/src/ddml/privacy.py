"""Privacy guarantees of the draw-and-discard protocol against three observers.

Closed forms live next to Monte Carlo estimators that check them:

* channel listener: plain epsilon-LDP of the Laplace step;
* internal threat (sees the k instances but not which one was drawn):
  expected loss ``(k-1)/k * eps/2`` and the exact two-instance ratio;
* opportunistic threat (arrives T updates later): discard absorption
  probability ``1 - 1/k`` and the Gaussian-accumulation bound ``eps_T``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import linalg

from .client import laplace_sample
from .errors import DeltaOutOfRange


@dataclass
class PrivacyReport:
    adversary: str
    epsilon_effective: float
    delta: float = 0.0
    method: str = "closed_form"
    trials: int = 0
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def adv1_epsilon(epsilon: float) -> float:
    return float(epsilon)


def adv2_expected_loss(k: int, epsilon: float) -> float:
    if k < 2:
        raise ValueError("k must be >= 2")
    return (k - 1) / k * epsilon / 2


def adv2_ratio(B1, B2, a, a_prime, gamma, epsilon):
    """Likelihood ratio of two observed instances under gradients a vs a'.

    Either instance may be the pre-image of the other; both orderings are
    equally likely to the observer.  Vectorizes over numpy arguments.
    """
    c = epsilon / (2.0 * gamma)
    d = np.asarray(B1, dtype=float) - np.asarray(B2, dtype=float)
    num = np.exp(-c * np.abs(d + gamma * a)) + np.exp(-c * np.abs(-d + gamma * a))
    den = np.exp(-c * np.abs(d + gamma * a_prime)) + np.exp(-c * np.abs(-d + gamma * a_prime))
    return num / den


def adv2_grid_max(epsilon: float, gamma: float = 1.0, step_frac: float = 0.01, span: float = 3.0) -> float:
    """Exhaustive grid maximum of ``adv2_ratio``.

    Differences run over ``[-span*gamma, span*gamma]`` in steps of
    ``step_frac*gamma``; gradients over {-1, 0, 1}.
    """
    n = int(round(span / step_frac))
    d = np.arange(-n, n + 1) * step_frac * gamma
    grads = (-1.0, 0.0, 1.0)
    best = 0.0
    for a in grads:
        for ap in grads:
            best = max(best, float(np.max(adv2_ratio(d, 0.0, a, ap, gamma, epsilon))))
    return best


def discard_transition_probs(k: int) -> np.ndarray:
    """Per-state probability of moving up (equivalently down) one copy."""
    i = np.arange(k + 1)
    return (k - i) * i / k**2


def discard_markov_exact(k: int) -> tuple[float, np.ndarray]:
    """Absorption-at-zero probabilities of the copy-count chain.

    Returns ``(1 - 1/k, q)`` where ``q[i]`` for ``i = 0..k`` comes from
    solving the tridiagonal first-step equations numerically.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    closed = 1.0 - 1.0 / k
    if k == 1:
        return closed, np.array([1.0, 0.0])
    p = discard_transition_probs(k)
    m = k - 1
    # rows i = 1..k-1:  2 p_i q_i - p_i q_{i-1} - p_i q_{i+1} = 0, q_0 = 1, q_k = 0
    ab = np.zeros((3, m))
    ab[0, 1:] = -p[1:m]
    ab[1, :] = 2 * p[1:k]
    ab[2, :-1] = -p[2:k]
    rhs = np.zeros(m)
    rhs[0] = p[1]
    inner = linalg.solve_banded((1, 1), ab, rhs)
    q = np.concatenate([[1.0], inner, [0.0]])
    return closed, q


def discard_simulate(k: int, trials: int, rng: np.random.Generator) -> tuple[float, float]:
    """Monte Carlo absorption-at-zero frequency starting from one copy.

    Returns ``(estimate, binomial standard error)``.  Holding steps cannot
    change where a chain is absorbed, so only the jumps are simulated.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if k == 1:
        return 0.0, 0.0
    i = np.arange(k + 1) / k
    # up: the drawn slot carries the update and the replaced one does not
    p_up = i * (1 - i)
    p_down = (1 - i) * i
    up = p_up / np.where(p_up + p_down > 0, p_up + p_down, 1.0)
    state = np.ones(trials, dtype=np.int64)
    alive = np.arange(trials)
    while alive.size:
        step = np.where(rng.random(alive.size) < up[state[alive]], 1, -1)
        state[alive] += step
        s = state[alive]
        alive = alive[(s > 0) & (s < k)]
    est = float(np.mean(state == 0))
    return est, math.sqrt(max(est * (1 - est), 1e-300) / trials)


def _check_delta(delta_T: float):
    if not 0 < delta_T < 0.5:
        raise DeltaOutOfRange(f"delta_T must lie in (0, 1/2), got {delta_T}")


def eps_after_T(epsilon: float, gamma: float, T: int, delta_T: float) -> tuple[float, float]:
    """``(exact, approx)`` epsilon against an observer arriving T updates later."""
    _check_delta(delta_T)
    if T < 1:
        raise ValueError("T must be >= 1")
    w = math.sqrt(2.0) * gamma
    L = math.log(1.0 / (2.0 * delta_T))
    exact = (epsilon**2 * w**2) / (8 * gamma**2 * T) * (
        1.0 + math.sqrt(1.0 + 16.0 * T * gamma**2 / (epsilon**2 * w**2) * L)
    )
    approx = epsilon / math.sqrt(2.0 * T) * math.sqrt(L)
    return exact, approx


def gaussian_sigma(w: float, eps_T: float, delta_T: float) -> float:
    """Smallest Gaussian sigma giving (eps_T, delta_T)-DP at l2 sensitivity w."""
    _check_delta(delta_T)
    if not eps_T > 0:
        raise ValueError("eps_T must be positive")
    return w * math.sqrt(2.0 * (math.log(1.0 / (2.0 * delta_T)) + eps_T)) / eps_T


def preimage_ratio(b_star, b1, b2, gamma, epsilon):
    """Ratio of the output density under gradients -1 and +1 with two candidates."""
    c = epsilon / (2.0 * gamma)
    b_star = np.asarray(b_star, dtype=float)
    num = np.exp(-c * np.abs(b_star - b1 + gamma)) + np.exp(-c * np.abs(b_star - b2 + gamma))
    den = np.exp(-c * np.abs(b_star - b1 - gamma)) + np.exp(-c * np.abs(b_star - b2 - gamma))
    return num / den


def preimage_violations(t: float, epsilon: float, gamma: float, n: int, rng: np.random.Generator) -> int:
    """Count random configurations breaking ``max(R, 1/R) <= exp(eps*t)``.

    Both candidates are placed uniformly within ``t*gamma`` of ``b*``.
    """
    b_star = rng.normal(0.0, 5 * gamma, n)
    b1 = b_star + rng.uniform(-t, t, n) * gamma
    b2 = b_star + rng.uniform(-t, t, n) * gamma
    R = preimage_ratio(b_star, b1, b2, gamma, epsilon)
    worst = np.maximum(R, 1.0 / R)
    return int(np.sum(worst > math.exp(epsilon * t) * (1 + 1e-12)))


PREIMAGE_PROTOCOL = (
    "replicated pools of k scalar weights start at N(0, (k/2)*8*gamma^2/eps^2) and run "
    "4*k^2 pure-noise draw-and-discard rounds to reach the stabilized state; each "
    "measured round draws a pre-image uniformly, forms b* = pre-image + "
    "Laplace(2*gamma/eps) (converged model, zero gradient) and counts the instances "
    "of the current pool, pre-image included, lying within t*gamma of b*; b* then "
    "replaces a uniformly random instance"
)


def empirical_preimage_amplification(
    k: int,
    gamma: float,
    epsilon: float,
    t: float,
    trials: int,
    rng: np.random.Generator,
    burn_in: int | None = None,
    replicas: int = 2000,
) -> tuple[float, float]:
    """Probability that an update has at least two candidate pre-images.

    See ``PREIMAGE_PROTOCOL`` for the simulation recipe.  Consecutive rounds
    of one pool are correlated, so the returned standard error (binomial over
    all ``trials``) is optimistic.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    b = 2 * gamma / epsilon
    reps = max(1, min(replicas, trials))
    rounds = -(-trials // reps)
    burn_in = 4 * k * k if burn_in is None else burn_in
    rows = np.arange(reps)
    pool = rng.normal(0.0, math.sqrt(k / 2 * 2 * b * b), (reps, k))
    hits = total = 0
    for it in range(burn_in + rounds):
        pre = pool[rows, rng.integers(0, k, reps)]
        b_star = pre + laplace_sample(b, rng, size=reps)
        if it >= burn_in:
            near = np.abs(pool - b_star[:, None]) <= t * gamma
            hits += int(np.sum(near.sum(axis=1) >= 2))
            total += reps
        pool[rows, rng.integers(0, k, reps)] = b_star
    est = hits / total
    return est, math.sqrt(max(est * (1 - est), 1e-300) / total)


def adv3_expected(epsilon: float, k: int, T: int) -> float:
    return epsilon / (k * math.sqrt(T))


def summary_table(k: int, epsilon: float, T: int) -> dict[str, float]:
    return {
        "I": adv1_epsilon(epsilon),
        "II": adv2_expected_loss(k, epsilon),
        "III": adv3_expected(epsilon, k, T),
    }


def analyze(k: int, epsilon: float, gamma: float, T: int, delta_T: float) -> list[PrivacyReport]:
    """One report per observer model."""
    exact, approx = eps_after_T(epsilon, gamma, T, delta_T)
    return [
        PrivacyReport("I", adv1_epsilon(epsilon), notes=["channel listener: local-model epsilon"]),
        PrivacyReport(
            "II",
            adv2_expected_loss(k, epsilon),
            notes=[f"expected over server coin tosses; worst case eps/2 = {epsilon / 2:g}"],
        ),
        PrivacyReport(
            "III",
            adv3_expected(epsilon, k, T),
            delta=delta_T,
            notes=[
                "expected: discard survival 1/k times 1/sqrt(T) accumulation",
                f"conditional on survival, eps_T exact={exact:.6g} approx={approx:.6g} at delta_T={delta_T:g}",
            ],
        ),
    ]
