"""Tabular delay experiments and the method benchmark.

The delay chain has two options that earn identical rewards for the first
``d`` steps and differ by ``delta_r`` per step afterwards. Closed-form option
values are checked against exhaustive enumeration; the decay of the value
gap and of its signal-to-noise ratio with ``d`` is measured by fitting, and
the rare-state experiment counts samples until a value-gap estimate reaches
a target precision.
"""
from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.stats import norm

from .env import DEFAULT_PARAMS, EnvParams
from .oracle import GuidanceSequence
from .switchrl import Chooser, EvalSummary, PpoConfig, run_episode, summarize

TERMINALS = ("zero", "continuation")


@dataclass
class DelaySmdp:
    K: int
    d: int
    delta_r: float
    gamma: float
    base_reward: float = 1.0
    sigma_r: float = 0.0
    # "zero": V(s_K) = 0; "continuation": each branch keeps its last reward forever
    terminal: str = "zero"

    def __post_init__(self):
        if self.K < 1 or not 0 <= self.d <= self.K:
            raise ValueError(f"need K >= 1 and 0 <= d <= K, got K={self.K}, d={self.d}")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.sigma_r < 0:
            raise ValueError("sigma_r must be >= 0")
        if self.terminal not in TERMINALS:
            raise ValueError(f"terminal must be one of {TERMINALS}")

    def rewards(self, option: int) -> np.ndarray:
        """Mean per-step rewards; option 1 gains ``delta_r`` from step ``d`` on."""
        r = np.full(self.K, self.base_reward, dtype=np.float64)
        if option == 1:
            r[self.d:] += self.delta_r
        return r

    def terminal_value(self, option: int) -> float:
        if self.terminal == "zero":
            return 0.0
        last = self.base_reward + (self.delta_r if option == 1 and self.d < self.K else 0.0)
        if option == 1 and self.d >= self.K:
            # the gap first appears at step K, i.e. inside the continuation
            last = self.base_reward + self.delta_r
        return last / (1.0 - self.gamma)


def exact_option_values(smdp: DelaySmdp) -> tuple[float, float]:
    """Q(s, D), Q(s, C) = sum_i gamma^i r_i + gamma^K V(s_K)."""
    disc = smdp.gamma ** np.arange(smdp.K)
    gK = smdp.gamma ** smdp.K
    return tuple(math.fsum(disc * smdp.rewards(c)) + gK * smdp.terminal_value(c) for c in (0, 1))


def gap_formula(delta_r: float, gamma: float, K: int, d: int, terminal: str = "zero") -> float:
    gap = delta_r * gamma ** d * (1.0 - gamma ** (K - d)) / (1.0 - gamma)
    if terminal == "continuation":
        gap += gamma ** K * delta_r / (1.0 - gamma)
    return gap


def enumerate_option_values(smdp: DelaySmdp) -> tuple[float, float]:
    """Expected returns by enumerating every +/- sigma_r noise path (K <= 16)."""
    if smdp.K > 16:
        raise ValueError("enumeration is limited to K <= 16")
    out = []
    for c in (0, 1):
        r = smdp.rewards(c)
        total, n = 0.0, 0
        for signs in itertools.product((-1.0, 1.0), repeat=smdp.K):
            g = 0.0
            for i in range(smdp.K):
                g += smdp.gamma ** i * (r[i] + signs[i] * smdp.sigma_r)
            total += g + smdp.gamma ** smdp.K * smdp.terminal_value(c)
            n += 1
        out.append(total / n)
    return out[0], out[1]


@dataclass
class DecayFit:
    slope: float
    intercept: float
    ds: np.ndarray
    gaps: np.ndarray


def advantage_decay_experiment(gamma: float, K: int, delta_r: float, ds: Sequence[int],
                               terminal: str = "continuation") -> DecayFit:
    """Least-squares slope of log|dQ| against the delay ``d``."""
    ds = np.asarray(sorted(set(int(d) for d in ds)))
    if ds.size < 2 or ds[0] < 0 or ds[-1] > K - 1:
        raise ValueError(f"need >= 2 distinct delays in [0, {K - 1}]")
    gaps = []
    for d in ds:
        qd, qc = exact_option_values(DelaySmdp(K, int(d), delta_r, gamma, terminal=terminal))
        gaps.append(abs(qc - qd))
    gaps = np.array(gaps)
    if np.any(gaps <= 0):
        raise ValueError("value gap vanishes; delta_r must be non-zero")
    slope, intercept = np.polyfit(ds.astype(float), np.log(gaps), 1)
    return DecayFit(float(slope), float(intercept), ds, gaps)


@dataclass
class SnrCurve:
    ds: np.ndarray
    snr: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    gaps: np.ndarray
    stds: np.ndarray

    @property
    def ratio(self) -> np.ndarray:
        return self.snr / self.snr[0]


def _sample_returns(smdp: DelaySmdp, option: int, n: int, rng: np.random.Generator) -> np.ndarray:
    disc = smdp.gamma ** np.arange(smdp.K)
    mean = math.fsum(disc * smdp.rewards(option)) + smdp.gamma ** smdp.K * smdp.terminal_value(option)
    if smdp.sigma_r == 0:
        return np.full(n, mean)
    noise = rng.normal(0.0, smdp.sigma_r, size=(n, smdp.K)) @ disc
    return mean + noise


def snr_experiment(gamma: float, K: int, delta_r: float, sigma_r: float, ds: Sequence[int], n_samples: int,
                   seed: int = 0, n_boot: int = 1000, terminal: str = "continuation") -> SnrCurve:
    """SNR(d) = |mean G_C - mean G_D| / std(G_C) from Monte-Carlo returns,
    with percentile bootstrap intervals. A zero-noise chain reports ``inf``."""
    rng = np.random.default_rng(seed)
    ds = np.asarray(list(ds), dtype=int)
    snr, lo, hi, gaps, stds = [], [], [], [], []
    for d in ds:
        smdp = DelaySmdp(K, int(d), delta_r, gamma, sigma_r=sigma_r, terminal=terminal)
        gd = _sample_returns(smdp, 0, n_samples, rng)
        gc = _sample_returns(smdp, 1, n_samples, rng)
        gap = abs(gc.mean() - gd.mean())
        sd = gc.std(ddof=1)
        gaps.append(gap)
        stds.append(sd)
        if sigma_r == 0:
            snr.append(math.inf)
            lo.append(math.inf)
            hi.append(math.inf)
            continue
        snr.append(gap / sd)
        idx_c = rng.integers(0, n_samples, size=(n_boot, n_samples))
        idx_d = rng.integers(0, n_samples, size=(n_boot, n_samples))
        bc, bd = gc[idx_c], gd[idx_d]
        boot = np.abs(bc.mean(axis=1) - bd.mean(axis=1)) / bc.std(axis=1, ddof=1)
        lo.append(float(np.percentile(boot, 2.5)))
        hi.append(float(np.percentile(boot, 97.5)))
    return SnrCurve(ds, np.array(snr), np.array(lo), np.array(hi), np.array(gaps), np.array(stds))


@dataclass
class RareSwitchMdp:
    p: float
    eps: float
    sigma: float = 1.0
    gap: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.p <= 1.0:
            raise ValueError("p must lie in (0, 1]")
        if self.eps <= 0 or self.sigma <= 0:
            raise ValueError("eps and sigma must be positive")


def samples_to_precision(mdp: RareSwitchMdp, confidence: float, rng: np.random.Generator,
                         max_relevant: int = 1_000_000) -> int:
    """Total state visits until z * s / sqrt(m) <= eps over the m switch-relevant visits."""
    z = float(norm.ppf(0.5 + confidence / 2.0))
    chunk = max(64, int(4 * (z * mdp.sigma / mdp.eps) ** 2))
    xs = np.empty(0)
    while xs.size < max_relevant:
        xs = np.concatenate([xs, mdp.gap + rng.normal(0.0, mdp.sigma, size=chunk)])
        m = np.arange(1, xs.size + 1)
        csum = np.cumsum(xs)
        csq = np.cumsum(xs * xs)
        with np.errstate(invalid="ignore", divide="ignore"):
            var = (csq - csum * csum / m) / np.maximum(m - 1, 1)
            ok = (m >= 2) & (z * np.sqrt(np.maximum(var, 0.0) / m) <= mdp.eps)
        hit = np.flatnonzero(ok)
        if hit.size:
            n_rel = int(hit[0]) + 1
            # visits needed to see n_rel relevant states: failures + successes
            return n_rel + int(rng.negative_binomial(n_rel, mdp.p))
        chunk *= 2
    raise RuntimeError("precision target not reached")


@dataclass
class RareRow:
    p: float
    eps: float
    n_mean: float
    n_std: float


def rare_state_experiment(ps: Sequence[float], eps: float, confidence: float = 0.95, seed: int = 0,
                          reps: int = 200, sigma: float = 1.0) -> list[RareRow]:
    """Mean samples-to-precision over ``reps`` repetitions for each ``p``."""
    rows = []
    for i, p in enumerate(ps):
        rng = np.random.default_rng([seed, i, int(round(eps * 1e9))])
        mdp = RareSwitchMdp(float(p), eps, sigma)
        ns = np.array([samples_to_precision(mdp, confidence, rng) for _ in range(reps)], dtype=float)
        rows.append(RareRow(float(p), eps, float(ns.mean()), float(ns.std())))
    return rows


def theory_suite(seed: int = 0) -> dict:
    """All tabular checks with their pass/fail verdicts."""
    out = {}
    for g in (0.9, 0.99):
        fit = advantage_decay_experiment(g, 50, 1.0, range(0, 41))
        rel = abs(fit.slope - math.log(g)) / abs(math.log(g))
        out[f"decay_gamma_{g}"] = {"slope": fit.slope, "expected": math.log(g), "rel_err": rel,
                                    "pass": rel <= 0.10}
    ds = list(range(0, 31, 5))
    curve = snr_experiment(0.95, 200, 1.0, 1.0, ds, 10_000, seed=seed)
    expected = 0.95 ** np.asarray(ds, dtype=float)
    rel = np.abs(curve.ratio - expected) / expected
    out["snr"] = {"ds": ds, "ratio": curve.ratio.tolist(), "expected": expected.tolist(),
                  "max_rel_err": float(rel.max()), "pass": bool(rel.max() <= 0.20)}
    base = rare_state_experiment([1.0, 0.5, 0.1, 0.02], 0.1, seed=seed)
    n0 = base[0].n_mean
    scaled = [r.n_mean * r.p / n0 for r in base[1:]]
    half = rare_state_experiment([1.0], 0.05, seed=seed)[0]
    ratio_eps = half.n_mean / n0
    out["rare"] = {"N0": n0, "N_p_times_p_over_N0": scaled, "eps_halving_ratio": ratio_eps,
                   "pass": all(0.5 <= s <= 2.0 for s in scaled) and 2.0 <= ratio_eps <= 8.0}
    out["pass"] = all(v["pass"] for v in out.values())
    return out


# -- benchmark ----------------------------------------------------------------

ChooserFactory = Callable[[GuidanceSequence, int], Chooser]


@dataclass
class BenchReport:
    results: dict = field(default_factory=dict)      # (method, set) -> EvalSummary
    seeds: list = field(default_factory=list)

    def summary(self) -> dict:
        out = {}
        for (m, s), ev in self.results.items():
            out.setdefault(s, {})[m] = {"mean_return": ev.mean_return, "success": ev.success,
                                        "switch_mean": ev.switch_mean, "switch_std": ev.switch_std,
                                        "n": len(ev.rows)}
        return out

    def write(self, out_dir) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / "bench.csv"
        with csv_path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "set", "seed", "clip_id", "return", "success", "switches", "decisions"])
            for (m, s), ev in self.results.items():
                for r in ev.rows:
                    w.writerow([m, s, r.get("seed", 0), r["clip_id"], repr(r["return"]), r["success"],
                                r["switches"], r["decisions"]])
        json_path = out_dir / "bench_summary.json"
        json_path.write_text(json.dumps(self.summary(), indent=1, sort_keys=True), encoding="utf-8")
        return csv_path, json_path


def benchmark(methods: Mapping[str, ChooserFactory | None], sets: Mapping[str, Sequence[GuidanceSequence]],
              cfg: PpoConfig, seeds: Sequence[int] = (0,), params: EnvParams = DEFAULT_PARAMS) -> BenchReport:
    """Evaluate each method on every sequence set for every seed (task reward only)."""
    rep = BenchReport(seeds=list(seeds))
    for name, factory in methods.items():
        if factory is None:
            raise ValueError(f"missing artifact for method {name!r}")
        for set_name, seqs in sets.items():
            eps, seed_of = [], []
            for seed in seeds:
                for seq in seqs:
                    eps.append(run_episode(seq.clip, factory(seq, seed), cfg, params))
                    seed_of.append(seed)
            ev = summarize(eps)
            for row, seed in zip(ev.rows, seed_of):
                row["seed"] = seed
            rep.results[(name, set_name)] = ev
    return rep
