"""Confidence-weighted fallback from the switching policy to the option head.

Three uncertainty signals are computed at every decision: the entropy of the
switching policy, the KL divergence of recent codebook-token usage from the
training usage, and the entropy of the option head. Each is mapped to [0, 1]
with cut points taken from training replays, and their mean ``omega``
decides which selector picks the controller.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import CALIBRATION_FORMAT
from .env import DEFAULT_PARAMS, STABLE, EnvParams, MotionClip
from .netcore import entropy, forward, softmax
from .opvqvae import VqModel, clip_features, encode, make_windows, unigram
from .oracle import GuidanceDataset, GuidanceSequence
from .switchrl import Decision, PpoConfig, SwitchPolicy, run_episode

SIGNALS = ("policy_entropy", "token_kl", "head_entropy")
SWITCH_POLICY, OPTION_HEAD = "switch_policy", "option_head"
DEGENERATE_WIDTH = 1e-6


@dataclass
class FusionCalibration:
    cuts: dict                      # signal name -> (low, high)
    P_train: np.ndarray
    delta: float = 0.5
    n_recent: int = 10
    report: dict = field(default_factory=dict)

    def __post_init__(self):
        self.P_train = np.asarray(self.P_train, dtype=np.float64)
        if abs(self.P_train.sum() - 1.0) > 1e-9:
            raise ValueError("P_train must sum to 1")
        if not 0.0 <= self.delta <= 1.0:
            raise ValueError("delta must lie in [0, 1]")
        for name in SIGNALS:
            lo, hi = self.cuts[name]
            if not lo < hi:
                raise ValueError(f"cut points for {name} must satisfy low < high, got ({lo}, {hi})")

    def to_dict(self) -> dict:
        return {"format_version": CALIBRATION_FORMAT,
                "cuts": {k: [float(v[0]), float(v[1])] for k, v in self.cuts.items()},
                "P_train": self.P_train.tolist(), "delta": self.delta, "n_recent": self.n_recent,
                "report": self.report}

    @classmethod
    def from_dict(cls, d: dict) -> "FusionCalibration":
        if d.get("format_version") != CALIBRATION_FORMAT:
            raise ValueError(f"unsupported calibration format {d.get('format_version')}")
        return cls({k: tuple(v) for k, v in d["cuts"].items()}, np.array(d["P_train"]), float(d["delta"]),
                   int(d["n_recent"]), d.get("report", {}))


def save_calibration(calib: FusionCalibration, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(calib.to_dict(), indent=1, sort_keys=True), encoding="utf-8")
    return path


def load_calibration(path) -> FusionCalibration:
    return FusionCalibration.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def percentile_cuts(values, lo_pct: float = 5.0, hi_pct: float = 95.0, name: str = "signal"
                    ) -> tuple[float, float]:
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError(f"no recorded values for {name}")
    lo, hi = (float(v) for v in np.percentile(values, [lo_pct, hi_pct]))
    if not hi > lo:
        warnings.warn(f"{name}: percentile cuts collapse at {lo}; using ({lo}, {lo + DEGENERATE_WIDTH})",
                      stacklevel=2)
        hi = lo + DEGENERATE_WIDTH
    return lo, hi


def normalize_signal(raw: float, cuts) -> float:
    lo, hi = cuts
    return float(min(max((raw - lo) / (hi - lo), 0.0), 1.0))


def token_kl(recent_tokens, P_train) -> float:
    """KL(P_cb || P_train) with P_cb the Laplace-smoothed unigram of ``recent_tokens``."""
    P_train = np.asarray(P_train, dtype=np.float64)
    toks = np.asarray(recent_tokens, dtype=np.int64).ravel()
    if toks.size == 0:
        raise ValueError("need at least one recent window")
    p = unigram(toks, P_train.size)
    return float(max(np.sum(p * (np.log(p) - np.log(P_train))), 0.0))


@dataclass
class FusionDecision:
    raw: np.ndarray
    s: np.ndarray
    omega: float
    source: str
    option: int
    policy_probs: np.ndarray
    head_probs: np.ndarray


def _argmax2(p) -> int:
    return STABLE if p[0] >= p[1] else 1


def decide(policy_probs, head_probs, recent_tokens, calib: FusionCalibration,
           delta: float | None = None) -> FusionDecision:
    """Fuse precomputed selector outputs; ties go to the stable option."""
    delta = calib.delta if delta is None else delta
    raw = np.array([float(entropy(policy_probs)), token_kl(recent_tokens, calib.P_train),
                    float(entropy(head_probs))])
    s = np.array([normalize_signal(r, calib.cuts[n]) for r, n in zip(raw, SIGNALS)])
    omega = float(s.mean())
    if omega <= delta:
        return FusionDecision(raw, s, omega, SWITCH_POLICY, _argmax2(policy_probs), policy_probs, head_probs)
    return FusionDecision(raw, s, omega, OPTION_HEAD, _argmax2(head_probs), policy_probs, head_probs)


class ClipTokens:
    """Tokens and option-head probabilities for the window ending at every step."""

    def __init__(self, vq: VqModel, clip: MotionClip):
        cfg = vq.cfg
        W = cfg.window
        feats = clip_features(clip)
        L = clip.length
        idx = np.clip(np.arange(L)[:, None] + np.arange(-W + 1, 1)[None, :], 0, L - 1)
        Xn = vq.normalize(feats[idx].reshape(L, -1))
        enc = encode(vq, Xn)
        self.tokens = enc.tokens
        z = enc.z_q.reshape(L, -1)
        self.head_probs = softmax(forward(vq.opt_head, z)[0])
        self.stride = cfg.window_stride

    def recent(self, t: int, n: int) -> np.ndarray:
        ends = np.clip(t - self.stride * np.arange(n), 0, None)
        return self.tokens[ends]


def fused_decide(policy: SwitchPolicy, vq: VqModel, calib: FusionCalibration, obs, recent_windows,
                 delta: float | None = None) -> FusionDecision:
    """Decision from raw inputs. ``recent_windows`` are normalized windows,
    newest last; the newest one feeds the option head."""
    pp = softmax(policy.logits(obs))
    rw = np.atleast_2d(recent_windows)
    enc = encode(vq, rw)
    z = enc.z_q.reshape(len(rw), -1)
    hp = softmax(forward(vq.opt_head, z[-1])[0])
    return decide(pp, hp, enc.tokens, calib, delta)


def fused_chooser(policy: SwitchPolicy, vq: VqModel, calib: FusionCalibration, clip: MotionClip,
                  delta: float | None = None, force: str | None = None):
    """Episode chooser; ``force`` pins the source to one selector."""
    ct = ClipTokens(vq, clip)

    def choose(obs, ctx):
        pp = softmax(policy.logits(obs))
        fd = decide(pp, ct.head_probs[ctx.t], ct.recent(ctx.t, calib.n_recent), calib, delta)
        src, opt = fd.source, fd.option
        if force == SWITCH_POLICY:
            src, opt = SWITCH_POLICY, _argmax2(pp)
        elif force == OPTION_HEAD:
            src, opt = OPTION_HEAD, _argmax2(fd.head_probs)
        return Decision(opt, 0.0, 0.0, pp, {"omega": fd.omega, "source": src, "raw": fd.raw.tolist()})
    return choose


def record_signals(policy: SwitchPolicy, vq: VqModel, seqs: Sequence[GuidanceSequence], cfg: PpoConfig,
                   n_recent: int, params: EnvParams = DEFAULT_PARAMS) -> list[tuple]:
    """(policy entropy, recent tokens, head entropy) at every decision of
    greedy switching-policy replays."""
    rows = []
    for seq in seqs:
        ct = ClipTokens(vq, seq.clip)

        def choose(obs, ctx):
            pp = softmax(policy.logits(obs))
            rows.append((float(entropy(pp)), ct.recent(ctx.t, n_recent), float(entropy(ct.head_probs[ctx.t]))))
            return Decision(_argmax2(pp), 0.0, 0.0, pp)
        run_episode(seq.clip, choose, cfg, params)
    return rows


def calibrate(policy: SwitchPolicy, vq: VqModel, d_op: GuidanceDataset, cfg: PpoConfig,
              delta: float = 0.5, n_recent: int = 10, params: EnvParams = DEFAULT_PARAMS
              ) -> FusionCalibration:
    if len(d_op) == 0:
        raise ValueError("calibration needs at least one training sequence")
    ws = make_windows(d_op, vq.cfg)
    P_train = unigram(encode(vq, vq.normalize(ws.X)).tokens, vq.cfg.codebook_size)
    rows = record_signals(policy, vq, d_op.sequences, cfg, n_recent, params)
    if not rows:
        raise ValueError("calibration replay produced no decisions")
    raw = np.array([[r[0], token_kl(r[1], P_train), r[2]] for r in rows])
    cuts = {n: percentile_cuts(raw[:, i], name=n) for i, n in enumerate(SIGNALS)}
    s = np.array([[normalize_signal(v, cuts[n]) for v, n in zip(row, SIGNALS)] for row in raw])
    omega = s.mean(axis=1)
    hist, edges = np.histogram(omega, bins=10, range=(0.0, 1.0))
    report = {"n_decisions": int(len(raw)), "omega_median": float(np.median(omega)),
              "omega_hist": hist.tolist(), "omega_edges": edges.tolist(),
              "frac_switch_policy": float(np.mean(omega <= delta))}
    return FusionCalibration(cuts, P_train, delta, n_recent, report)
