"""Bucketed sampling of clip specs.

A scenario is a weighted mixture of buckets. Each bucket draws a dynamism
level uniformly from its range and carries a fixed disturbance setting.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .env import ClipSpec


@dataclass(frozen=True)
class Bucket:
    weight: float
    dyn_lo: float
    dyn_hi: float
    perturb_prob: float = 0.0
    perturb_mag: float = 0.0

    def __post_init__(self):
        if self.weight <= 0:
            raise ValueError("bucket weight must be positive")
        if not 0.0 <= self.dyn_lo <= self.dyn_hi <= 1.0:
            raise ValueError(f"bucket dyn range [{self.dyn_lo}, {self.dyn_hi}] is not inside [0, 1]")


@dataclass
class Scenario:
    buckets: list[Bucket]
    length_steps: int = 250
    n_clips: int = 60
    n_pairs: int = 100
    t_blend: int = 25

    def to_dict(self) -> dict:
        d = asdict(self)
        d["buckets"] = [asdict(b) for b in self.buckets]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        d = dict(d)
        d["buckets"] = [Bucket(**b) for b in d["buckets"]]
        return cls(**d)


def complementary(**kw) -> Scenario:
    """Calm pushed clips (stable wins) mixed with fast clean clips (agile wins)."""
    return Scenario([Bucket(0.7, 0.05, 0.2, 0.1, 4.0), Bucket(0.3, 0.8, 0.9)], **kw)


def mid_range(**kw) -> Scenario:
    """Training range for the fallback experiment: dyn in [0.1, 0.7]."""
    return Scenario([Bucket(0.5, 0.1, 0.3, 0.1, 4.0), Bucket(0.5, 0.3, 0.7)], **kw)


def out_of_range(dyn: float = 0.95, **kw) -> Scenario:
    return Scenario([Bucket(1.0, dyn, dyn)], **kw)


def sample_specs(scn: Scenario, seed: int) -> list[ClipSpec]:
    """Draw ``scn.n_clips`` specs with distinct clip seeds."""
    rng = np.random.default_rng(seed)
    w = np.array([b.weight for b in scn.buckets], dtype=float)
    w /= w.sum()
    # distinct 31-bit seeds per clip keep disjoint pools distinguishable
    seeds = np.random.SeedSequence([int(seed), 7]).generate_state(scn.n_clips * 2) >> 1
    seeds = list(dict.fromkeys(int(s) for s in seeds))[:scn.n_clips]
    specs = []
    for i in range(scn.n_clips):
        b = scn.buckets[int(rng.choice(len(w), p=w))]
        dyn = float(rng.uniform(b.dyn_lo, b.dyn_hi)) if b.dyn_hi > b.dyn_lo else b.dyn_lo
        specs.append(ClipSpec(scn.length_steps, dyn, b.perturb_prob, b.perturb_mag, seeds[i]))
    return specs


def is_calm(spec: ClipSpec, split: float = 0.5) -> bool:
    return spec.dyn_level < split
