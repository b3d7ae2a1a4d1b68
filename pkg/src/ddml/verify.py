"""Named verification suites, one per acceptance criterion.

``run_suite(name)`` returns a list of :class:`Check` rows; ``ddml verify``
prints them as a pass/fail table.  Each suite is self-contained and seeded.
"""

from __future__ import annotations

import math
import threading
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import privacy
from .client import PrivacyParams
from .glm import ModelSpec, average_gradient, loss
from .pool import Strategy, pure_noise_variance
from .sim import SimConfig, desk_multiclass, known_model, load_data, positive_rate, recover_weights, run_sim


@dataclass
class Check:
    criterion: int
    name: str
    passed: bool
    measured: str
    target: str
    seconds: float = 0.0

    def line(self) -> str:
        mark = "PASS" if self.passed else "FAIL"
        return f"[{mark}] {self.criterion:>2} {self.name}: {self.measured} (target {self.target}, {self.seconds:.1f}s)"


class _Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    @property
    def seconds(self) -> float:
        return time.perf_counter() - self.t0

    def __exit__(self, *exc):
        pass


def _spawn(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


# --- 1: variance stabilization ---------------------------------------------------


def variance_suite(seed: int = 0, rounds: int = 100_000, replicas: int = 50, ks=(5, 20, 60),
                   gamma: float = 0.001, epsilon: float = 1.0, **_) -> list[Check]:
    sigma2 = 8 * gamma**2 / epsilon**2
    checks = []
    for k, rng in zip(ks, _spawn(seed, len(ks))):
        with _Timer() as tm:
            trace = pure_noise_variance(k, sigma2, rounds, replicas, rng)
            ratio = float(trace.mean() / (k / 2 * sigma2))
        checks.append(Check(1, f"variance k={k}", abs(ratio - 1) <= 0.10, f"ratio {ratio:.4f}", "1 +/- 0.10", tm.seconds))
    return checks


# --- 2: adversary II ---------------------------------------------------------------


def adversary2_suite(**_) -> list[Check]:
    checks = []
    with _Timer() as tm:
        for eps in (math.log(3), 1.0, math.log(16), 7.0):
            best = privacy.adv2_grid_max(eps)
            err = abs(best - math.exp(eps / 2))
            checks.append(Check(2, f"grid max eps={eps:.4g}", err <= 1e-9, f"|max - e^(eps/2)| = {err:.2e}", "<= 1e-9"))
        exact = all(privacy.adv2_expected_loss(2, e) == 0.25 * e for e in (math.log(3), 1.0, math.log(16), 7.0))
    checks.append(Check(2, "expected loss k=2", exact, "0.25*eps" if exact else "mismatch", "== 0.25*eps", tm.seconds))
    return checks


# --- 3: discard fraction ------------------------------------------------------------


def _discard_chunk(args):
    k, trials, seed_seq = args
    est, _ = privacy.discard_simulate(k, trials, np.random.default_rng(seed_seq))
    return round(est * trials)


def discard_estimate(k: int, trials: int, seed: int, workers: int = 1) -> tuple[float, float]:
    """Absorption frequency with trials split over ``workers`` RNG streams.

    Deterministic for a fixed ``(seed, workers)`` pair.
    """
    seqs = np.random.SeedSequence([seed, k]).spawn(workers)
    sizes = [trials // workers + (i < trials % workers) for i in range(workers)]
    jobs = [(k, n, s) for n, s in zip(sizes, seqs)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            hits = sum(ex.map(_discard_chunk, jobs))
    else:
        hits = sum(map(_discard_chunk, jobs))
    est = hits / trials
    return est, math.sqrt(max(est * (1 - est), 1e-300) / trials)


def discard_suite(seed: int = 0, trials: int = 1_000_000, ks=(2, 5, 10, 20, 60), workers: int = 1, **_) -> list[Check]:
    checks = []
    for k in ks:
        with _Timer() as tm:
            est, se = discard_estimate(k, trials, seed, workers)
            target = 1 - 1 / k
            z = abs(est - target) / se
        checks.append(Check(3, f"discard k={k}", z <= 3, f"{est:.5f} ({z:.2f} SE)", f"{target:.5f} within 3 SE", tm.seconds))
    with _Timer() as tm:
        worst = 0.0
        for k in range(1, 101):
            _, q = privacy.discard_markov_exact(k)
            worst = max(worst, float(np.max(np.abs(q - (1 - np.arange(k + 1) / k)))))
    checks.append(Check(3, "linear solve k<=100", worst <= 1e-12, f"max error {worst:.1e}", "<= 1e-12", tm.seconds))
    return checks


# --- 4: accumulation ---------------------------------------------------------------------


def accumulation_suite(epsilon: float = 1.0, gamma: float = 0.001, **_) -> list[Check]:
    with _Timer() as tm:
        T = 1_000_000
        exact, approx = privacy.eps_after_T(epsilon, gamma, T, 1e-8)
        rel = abs(exact - approx) / approx
        factor = approx / (epsilon / math.sqrt(T))
    return [
        Check(4, "exact vs approx T=1e6", rel < 0.01, f"rel diff {rel:.2e}", "< 1%", tm.seconds),
        Check(4, "approx*sqrt(T)/eps", abs(factor - 2.975) <= 0.01, f"{factor:.4f}", "2.975 +/- 0.01"),
    ]


# --- 5: pre-image amplification ----------------------------------------------------------


def preimage_suite(seed: int = 0, configs: int = 100_000, trials: int = 200_000,
                   epsilon: float = 7.0, gamma: float = 1.0, **_) -> list[Check]:
    rngs = _spawn(seed, 2)
    checks = []
    with _Timer() as tm:
        ts = [round(0.1 * i, 1) for i in range(1, 10)]
        bad = {t: privacy.preimage_violations(t, epsilon, gamma, configs, rngs[0]) for t in ts}
        total = sum(bad.values())
    checks.append(Check(5, "ratio bound t=0.1..0.9", total == 0, f"{total} violations in {configs * len(ts)}", "0", tm.seconds))
    with _Timer() as tm:
        probs = {}
        for k in (2, 10, 20, 60):
            probs[k], _ = privacy.empirical_preimage_amplification(k, gamma, epsilon, 0.2, trials, rngs[1])
        seq = [probs[k] for k in (2, 10, 20, 60)]
        mono = all(a <= b for a, b in zip(seq, seq[1:]))
    shown = ", ".join(f"k={k}: {p:.3f}" for k, p in probs.items())
    checks.append(Check(5, "monotone in k", mono, shown, "non-decreasing", tm.seconds))
    checks.append(Check(5, "k=60 probability", abs(probs[60] - 0.84) <= 0.05, f"{probs[60]:.4f}", "0.84 +/- 0.05"))
    return checks


# --- desk-scale experiments ------------------------------------------------------------------


def desk_config(gamma: float, k: int = 10, passes: int = 20, eval_every: int = 1000, **kw) -> SimConfig:
    """Default desk-scale 10-class setup: 6,000 train / 1,000 test, no client noise."""
    spec, _ = desk_multiclass()
    return SimConfig(spec=spec, privacy=PrivacyParams(math.inf, gamma), k=k, passes=passes,
                     eval_every=eval_every, **kw)


def _seed_runs(base: SimConfig, seeds: int, data, **changes) -> np.ndarray:
    """(seeds, rows, 2) array of (train loss, test accuracy) traces."""
    train, test = data
    out = []
    for s in range(seeds):
        rows = run_sim(base.replace(seed=base.seed + s, **changes), train, test)
        out.append([(r.train_loss, r.test_accuracy) for r in rows])
    return np.asarray(out)


def trace_distance(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """Mean gap between seed-averaged loss traces, and the wider seed band.

    The band of a configuration is its seed-to-seed standard deviation
    averaged over the trace.
    """
    gap = float(np.mean(np.abs(a[:, :, 0].mean(0) - b[:, :, 0].mean(0))))
    band = max(float(a[:, :, 0].std(0, ddof=1).mean()), float(b[:, :, 0].std(0, ddof=1).mean()))
    return gap, band


def batching_suite(seed: int = 0, seeds: int = 5, gamma: float = 0.01, passes: int = 20,
                   pairs=((10, 100), (20, 400)), **_) -> list[Check]:
    base = desk_config(gamma, passes=passes, seed=seed)
    data = load_data(base)
    checks = []
    for k, ns in pairs:
        with _Timer() as tm:
            a = _seed_runs(base, seeds, data, k=k)
            b = _seed_runs(base, seeds, data, k=1, strategy=Strategy("server_batch", batch_size=ns))
            gap, band = trace_distance(a, b)
        checks.append(Check(6, f"k={k} vs N_s={ns}", gap <= 3 * band, f"distance {gap:.5f}, band {band:.5f}",
                            "distance <= 3 x band", tm.seconds))
    return checks


def _final_acc(runs: np.ndarray) -> tuple[float, float]:
    acc = runs[:, -1, 1]
    return float(acc.mean()), float(acc.std(ddof=1))


def within_bands(a: tuple[float, float], b: tuple[float, float]) -> bool:
    """Mutual seed band: means differ by at most 3 of the larger seed sd."""
    return abs(a[0] - b[0]) <= 3 * max(a[1], b[1])


def strategies_suite(seed: int = 0, seeds: int = 3, gamma: float = 0.0001, passes: int = 600, k: int = 10, **_) -> list[Check]:
    base = desk_config(gamma, k=k, passes=passes, eval_every=6000 * passes, seed=seed)
    data = load_data(base)
    with _Timer() as tm:
        res = {}
        for name in ("draw_and_discard", "accept_rate", "same_instance", "average:draw_and_discard"):
            res[name] = _final_acc(_seed_runs(base, seeds, data, strategy=Strategy.parse(name)))
    fmt = lambda s: f"{res[s][0]:.4f}+/-{res[s][1]:.4f}"  # noqa: E731
    checks = []
    for a, b in (("draw_and_discard", "accept_rate"), ("draw_and_discard", "same_instance"), ("accept_rate", "same_instance")):
        checks.append(Check(7, f"{a} ~ {b}", within_bands(res[a], res[b]), f"{fmt(a)} vs {fmt(b)}", "|diff| <= 3 x max sd"))
    avg = "average:draw_and_discard"
    checks.append(Check(7, "averaging below draw_and_discard", res[avg][0] < res["draw_and_discard"][0],
                        f"{fmt(avg)} vs {fmt('draw_and_discard')}", "strictly lower", tm.seconds))
    return checks


def epsilon_suite(seed: int = 0, seeds: int = 3, gamma: float = 0.00015, passes: int = 400, k: int = 10, **_) -> list[Check]:
    base = desk_config(gamma, k=k, passes=passes, eval_every=6000 * passes, seed=seed)
    data = load_data(base)
    with _Timer() as tm:
        acc = {eps: _final_acc(_seed_runs(base, seeds, data, epsilon=eps))[0] for eps in (None, math.log(16), math.log(3))}
    gap16 = acc[None] - acc[math.log(16)]
    gap3 = acc[None] - acc[math.log(3)]
    return [
        Check(8, "eps=log 16 vs no noise", gap16 <= 0.02, f"gap {gap16:+.4f} ({acc[math.log(16)]:.4f} vs {acc[None]:.4f})",
              "<= 0.02", tm.seconds),
        Check(8, "eps=log 3 gap larger", gap3 > gap16, f"gap {gap3:+.4f}", f"> {gap16:+.4f}"),
    ]


def recovery_config(updates: int = 1_000_000, seed: int = 0, n: int = 1_000_000) -> SimConfig:
    spec, _ = known_model()
    per_pass = n // 10
    return SimConfig(spec=spec, privacy=PrivacyParams(math.inf, 0.005), k=30, seed=seed,
                     passes=-(-updates // per_pass), max_updates=updates, eval_every=updates * 10,
                     dataset={"kind": "known_model", "n": n, "test_n": 10_000})


def recovery_suite(seed: int = 0, updates: int = 1_000_000, **_) -> list[Check]:
    with _Timer() as tm:
        rec = recover_weights(recovery_config(updates, seed))
    spec, w = known_model()
    with _Timer() as tm2:
        rate = positive_rate(spec, w, 100_000, seed)
    return [
        Check(9, "L-inf weight error", rec.max_error <= 0.15, f"{rec.max_error:.4f}", "<= 0.15", tm.seconds),
        Check(9, "positive rate", abs(rate - 0.46) <= 0.02, f"{rate:.4f}", "0.46 +/- 0.02", tm2.seconds),
    ]


# --- 10: gradient check ---------------------------------------------------------------------


def finite_difference(spec: ModelSpec, w, X, y, step: float = 1e-6) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    out = np.zeros_like(w)
    for idx in np.ndindex(w.shape):
        hi, lo = w.copy(), w.copy()
        hi[idx] += step
        lo[idx] -= step
        out[idx] = (loss(spec, hi, X, y) - loss(spec, lo, X, y)) / (2 * step)
    return out


def random_instance(family: str, rng: np.random.Generator):
    p = int(rng.integers(1, 7))
    classes = int(rng.integers(2, 6)) if family == "multiclass" else 1
    spec = ModelSpec.dense(family, p, num_classes=classes)
    n = int(rng.integers(1, 9))
    X = rng.random((n, p))
    if family == "multiclass":
        y = rng.integers(0, classes, n)
    elif family == "logistic":
        y = (rng.random(n) < 0.5).astype(float)
    else:
        y = rng.random(n)
    return spec, rng.normal(0.0, 1.0, spec.weight_shape), X, y


def gradient_error(spec, w, X, y) -> float:
    """Max-norm relative error of the analytic gradient against central differences."""
    g = average_gradient(spec, w, X, y)
    fd = finite_difference(spec, w, X, y)
    return float(np.max(np.abs(g - fd)) / max(np.max(np.abs(fd)), 1e-12))


def gradient_suite(seed: int = 0, instances: int = 100, **_) -> list[Check]:
    checks = []
    for family, rng in zip(("linear", "logistic", "multiclass"), _spawn(seed, 3)):
        with _Timer() as tm:
            worst = max(gradient_error(*random_instance(family, rng)) for _ in range(instances))
        checks.append(Check(10, f"finite differences {family}", worst <= 1e-5, f"max rel error {worst:.1e}", "<= 1e-5", tm.seconds))
    return checks


# --- 11: networked equivalence --------------------------------------------------------------


def network_suite(seed: int = 0, agents: int = 100, rounds: int = 100, **_) -> list[Check]:
    from .net import ServerThread, client_agent, replay_trace, server_from_config

    spec, _ = desk_multiclass(p=5, classes=3)
    config = SimConfig(spec=spec, privacy=PrivacyParams(math.log(16), 0.01), k=10, seed=seed,
                       dataset={"kind": "desk_multiclass", "n": agents * 10, "test_n": 0})
    train, _ = load_data(config)
    server = server_from_config(config, record=True)
    summaries = [None] * agents
    with _Timer() as tm, ServerThread(server) as st:
        def run(i):
            part = slice(10 * i, 10 * i + 10)
            rng = np.random.default_rng([seed, i])
            summaries[i] = client_agent(st.address, train.X[part], train.y[part], config.privacy, rounds, rng)

        threads = [threading.Thread(target=run, args=(i,)) for i in range(agents)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        snap = st.call(server.pool.snapshot)
        trace = st.call(lambda: list(server.pool.trace))
    c = snap["counters"]
    submits = sum(s.submits for s in summaries)
    errors = sum(len(s.errors) for s in summaries)
    invariant = (len(snap["instances"]) == config.k and c["submits"] == submits == agents * rounds
                 and c["accepted"] + c["rejected_spam"] + c["dropped"] == c["submits"] and errors == 0)
    with _Timer() as tm2:
        replayed = replay_trace(config, trace).snapshot()
        identical = replayed["instances"] == snap["instances"] and replayed["counters"] == snap["counters"]
    return [
        Check(11, f"{agents} concurrent agents", invariant,
              f"k={len(snap['instances'])}, submits={c['submits']}, accepted={c['accepted']}, errors={errors}",
              "pool size and counters preserved", tm.seconds),
        Check(11, "trace replay", identical, "bit-identical" if identical else "snapshots differ", "bit-identical",
              tm2.seconds),
    ]


SUITES = {
    "variance": variance_suite,
    "adversary2": adversary2_suite,
    "discard": discard_suite,
    "accumulation": accumulation_suite,
    "preimage": preimage_suite,
    "batching": batching_suite,
    "strategies": strategies_suite,
    "epsilon": epsilon_suite,
    "recovery": recovery_suite,
    "gradient": gradient_suite,
    "network": network_suite,
}


def run_suite(name: str, **kw) -> list[Check]:
    if name == "all":
        return [c for fn in SUITES.values() for c in fn(**kw)]
    if name not in SUITES:
        raise KeyError(name)
    return SUITES[name](**kw)
