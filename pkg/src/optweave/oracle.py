"""Offline option guidance: sliding-horizon pre-evaluation of both
controllers, softmax labels, stability gating, clip blending and label
smoothing.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import DATASET_FORMAT
from .env import (AGILE, DEFAULT_PARAMS, OPTION_NAMES, STABLE, ClipSpec, EnvParams, MotionClip,
                  _agg_series, generate_clip, load_clip, reset, run_controller, save_clip)
from .netcore import softmax


@dataclass
class OracleConfig:
    horizon: int = 50
    stride: int = 10
    gamma: float = 0.99
    tau: float = 5.0
    alpha_thr: float = 1.5
    smooth_window: int = 5
    mc: int = 1
    # hold the stable option when the very first decision falls in an aggressive phase
    gate_first: bool = False

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.tau <= 0 or self.alpha_thr <= 0:
            raise ValueError("tau and alpha_thr must be positive")
        if self.smooth_window < 1 or self.smooth_window % 2 == 0:
            raise ValueError("smooth_window must be a positive odd integer")
        if self.mc < 1:
            raise ValueError("mc must be >= 1")


@dataclass
class GuidanceEntry:
    t0: int
    V_D: float
    V_C: float
    p_star: np.ndarray
    c: int
    gated: bool

    def to_dict(self) -> dict:
        return {"t0": self.t0, "V_D": self.V_D, "V_C": self.V_C, "p_star": self.p_star.tolist(),
                "c": OPTION_NAMES[self.c], "gated": self.gated}

    @classmethod
    def from_dict(cls, d: dict) -> "GuidanceEntry":
        return cls(int(d["t0"]), float(d["V_D"]), float(d["V_C"]), np.array(d["p_star"], dtype=float),
                   OPTION_NAMES.index(d["c"]), bool(d["gated"]))


@dataclass
class GuidanceSequence:
    clip: MotionClip
    entries: list[GuidanceEntry]
    p_tilde: np.ndarray  # (L, 2)

    @property
    def step_labels(self) -> np.ndarray:
        return hold_labels(self.entries, self.clip.length)


@dataclass
class GuidanceDataset:
    sequences: list[GuidanceSequence]
    config: OracleConfig = field(default_factory=OracleConfig)

    def __len__(self) -> int:
        return len(self.sequences)

    def subset(self, idx) -> "GuidanceDataset":
        return GuidanceDataset([self.sequences[i] for i in idx], self.config)


def _window_impulses(clip: MotionClip, t0: int, H: int, draw: int) -> np.ndarray:
    rng = np.random.default_rng([int(clip.seed), int(t0), int(draw)])
    prob = clip.perturb_prob[t0:t0 + H]
    mag = clip.perturb_mag[t0:t0 + H]
    hit = rng.random(H) < prob
    theta = rng.uniform(0.0, 2.0 * np.pi, H)
    imp = np.zeros((H, 2))
    imp[:, 0] = np.where(hit, mag * np.cos(theta), 0.0)
    imp[:, 1] = np.where(hit, mag * np.sin(theta), 0.0)
    return imp


def window_impulses(clip: MotionClip, t0: int, H: int, draw: int = 0) -> np.ndarray:
    """Disturbances used when scoring the window starting at ``t0``.

    Seeded by (clip seed, t0, draw), so both options see the same pushes.
    """
    return _window_impulses(clip, t0, H, draw)


def evaluate_option(clip: MotionClip, t0: int, option: int, cfg: OracleConfig,
                    params: EnvParams = DEFAULT_PARAMS, _kp=None) -> float:
    """Discounted H-step task return of one controller from the reference state at ``t0``."""
    H = cfg.horizon
    if t0 < 0 or t0 + H > clip.length:
        raise ValueError(f"window [{t0}, {t0 + H}) exceeds clip of length {clip.length}")
    disc = cfg.gamma ** np.arange(H)
    kp = params.kernel_params() if _kp is None else _kp
    total = 0.0
    for j in range(cfg.mc):
        imp = _window_impulses(clip, t0, H, j)
        r = run_controller(clip, option, reset(clip, t0), H, params, impulses=imp, imp_offset=t0, kparams=kp)
        rewards = params.weighted_total(r.terms)
        total += float(np.dot(disc[:r.steps], rewards))
    return total / cfg.mc


def label_clip(clip: MotionClip, cfg: OracleConfig, params: EnvParams = DEFAULT_PARAMS
               ) -> list[GuidanceEntry]:
    H, s = cfg.horizon, cfg.stride
    if clip.length < H:
        raise ValueError(f"clip of length {clip.length} shorter than horizon {H}")
    kp = params.kernel_params()
    entries: list[GuidanceEntry] = []
    agg = _agg_series(clip.ref_acc, params.a_ref)
    for t0 in range(0, clip.length - H + 1, s):
        v_d = evaluate_option(clip, t0, STABLE, cfg, params, kp)
        v_c = evaluate_option(clip, t0, AGILE, cfg, params, kp)
        p = softmax(np.array([v_d, v_c]) / cfg.tau)
        best = AGILE if v_c > v_d else STABLE
        if agg[t0] <= cfg.alpha_thr:
            entries.append(GuidanceEntry(t0, v_d, v_c, p, best, False))
        elif entries:
            entries.append(GuidanceEntry(t0, v_d, v_c, p, entries[-1].c, True))
        elif cfg.gate_first:
            entries.append(GuidanceEntry(t0, v_d, v_c, p, STABLE, True))
        else:
            entries.append(GuidanceEntry(t0, v_d, v_c, p, best, False))
    return entries


def hold_labels(entries: Sequence[GuidanceEntry], length: int) -> np.ndarray:
    """Per-step option ids: each entry holds until the next one starts."""
    if not entries:
        raise ValueError("no entries")
    out = np.empty(length, dtype=np.int64)
    for i, e in enumerate(entries):
        stop = entries[i + 1].t0 if i + 1 < len(entries) else length
        out[e.t0:stop] = e.c
    out[:entries[0].t0] = entries[0].c
    return out


def smooth_labels(entries: Sequence[GuidanceEntry], window: int, length: int | None = None) -> np.ndarray:
    """Step-level p* held over each stride, then box-filtered with edge replication."""
    if window < 1 or window % 2 == 0:
        raise ValueError(f"smoothing window must be a positive odd integer, got {window}")
    if not entries:
        raise ValueError("no entries to smooth")
    if length is None:
        stride = entries[1].t0 - entries[0].t0 if len(entries) > 1 else 1
        length = entries[-1].t0 + stride
    held = np.empty((length, 2))
    for i, e in enumerate(entries):
        stop = entries[i + 1].t0 if i + 1 < len(entries) else length
        held[e.t0:stop] = e.p_star
    held[:entries[0].t0] = entries[0].p_star
    if window == 1:
        return held
    half = window // 2
    padded = np.pad(held, ((half, half), (0, 0)), mode="edge")
    kernel = np.ones(window) / window
    out = np.stack([np.convolve(padded[:, j], kernel, mode="valid") for j in range(2)], axis=1)
    return out / out.sum(axis=1, keepdims=True)


# -- blending -----------------------------------------------------------------

def blend_weight(u):
    """Quintic decay: 1 at u=0, 0 at u=1, zero slope and curvature at both ends."""
    u = np.asarray(u, dtype=float)
    return 1.0 - (10 * u ** 3 - 15 * u ** 4 + 6 * u ** 5)


def _velocity_basis(u):
    # value 0 and unit slope at u=0; value, slope and curvature 0 at u=1
    u = np.asarray(u, dtype=float)
    return u - 6 * u ** 3 + 8 * u ** 4 - 3 * u ** 5


def blend_clips(a: MotionClip, b: MotionClip, t_blend: int, params: EnvParams = DEFAULT_PARAMS,
                seed: int | None = None) -> MotionClip:
    """Concatenate ``a`` and ``b`` with an inertialization offset on ``b``.

    The offset on ``b``'s first ``t_blend`` frames decays to zero and is
    chosen so the first blended frame lands where ``a`` would have moved next
    (position) with ``a``'s continuation velocity. Velocities and
    accelerations of the blended span are the discrete derivatives of the
    offset positions.
    """
    if t_blend < 0 or t_blend > b.length / 2:
        raise ValueError(f"t_blend={t_blend} must lie in [0, {b.length / 2}]")
    dt = params.dt
    J = a.length
    target_pos = a.ref_pos[J - 1] + a.ref_vel[J - 1] * dt
    target_vel = a.ref_vel[J - 1] + a.ref_acc[J - 1] * dt
    d_pos = target_pos - b.ref_pos[0]
    d_vel = target_vel - b.ref_vel[0]

    Lb = b.length
    offset = np.zeros((Lb + 2, 2))
    if t_blend > 0:
        k = np.arange(min(t_blend, Lb + 2))
        u = k / t_blend
        w, g = blend_weight(u), _velocity_basis(u)
        # o(0) = d_pos and (o(1) - o(0)) / dt = d_vel
        w1, g1 = float(blend_weight(1.0 / t_blend)), float(_velocity_basis(1.0 / t_blend))
        c_p = d_pos
        c_v = (dt * d_vel - c_p * (w1 - 1.0)) / g1
        offset[k] = w[:, None] * c_p[None, :] + g[:, None] * c_v[None, :]
    pos_b = b.ref_pos + offset[:Lb]
    vel_b = b.ref_vel + (offset[1:Lb + 1] - offset[:Lb]) / dt
    acc_b = b.ref_acc + (offset[2:Lb + 2] - 2 * offset[1:Lb + 1] + offset[:Lb]) / dt ** 2

    ref_pos = np.concatenate([a.ref_pos, pos_b])
    ref_vel = np.concatenate([a.ref_vel, vel_b])
    ref_acc = np.concatenate([a.ref_acc, acc_b])
    if seed is None:
        seed = int(np.random.SeedSequence([int(a.seed), int(b.seed)]).generate_state(1)[0])
    return MotionClip(
        ref_pos, ref_vel, ref_acc, _agg_series(ref_acc, params.a_ref),
        np.concatenate([a.impulses, b.impulses]),
        np.concatenate([a.perturb_prob, b.perturb_prob]),
        np.concatenate([a.perturb_mag, b.perturb_mag]),
        int(seed), list(a.segments) + list(b.segments),
        list(a.junctions) + [J] + [J + j for j in b.junctions],
        f"{a.clip_id}+{b.clip_id}",
    )


def junction_defects(clip: MotionClip, params: EnvParams = DEFAULT_PARAMS) -> list[tuple[float, float]]:
    """(position, velocity) mismatch at each junction relative to the
    continuation of the preceding segment."""
    dt = params.dt
    out = []
    for J in clip.junctions:
        p_next = clip.ref_pos[J - 1] + clip.ref_vel[J - 1] * dt
        v_next = clip.ref_vel[J - 1] + clip.ref_acc[J - 1] * dt
        out.append((float(np.linalg.norm(clip.ref_pos[J] - p_next)),
                    float(np.linalg.norm(clip.ref_vel[J] - v_next))))
    return out


# -- dataset ------------------------------------------------------------------

def label_sequence(clip: MotionClip, cfg: OracleConfig, params: EnvParams = DEFAULT_PARAMS) -> GuidanceSequence:
    entries = label_clip(clip, cfg, params)
    return GuidanceSequence(clip, entries, smooth_labels(entries, cfg.smooth_window, clip.length))


def build_guidance_dataset(clips: Sequence[ClipSpec | MotionClip], n_pairs: int, t_blend: int,
                           cfg: OracleConfig, seed: int, params: EnvParams = DEFAULT_PARAMS
                           ) -> GuidanceDataset:
    """Blend random pairs of clips and label each blended sequence."""
    if len(clips) < 2:
        raise ValueError("need at least two clips or clip specs")
    rng = np.random.default_rng(seed)
    cache: dict[int, MotionClip] = {}

    def get(i: int) -> MotionClip:
        if i not in cache:
            c = clips[i]
            cache[i] = c if isinstance(c, MotionClip) else generate_clip(c, params, f"clip-{i:04d}")
        return cache[i]

    seqs = []
    for n in range(n_pairs):
        i, j = rng.choice(len(clips), size=2, replace=False)
        bseed = int(np.random.SeedSequence([int(seed), n]).generate_state(1)[0])
        blended = blend_clips(get(int(i)), get(int(j)), t_blend, params, seed=bseed)
        blended.clip_id = f"seq-{n:04d}"
        seqs.append(label_sequence(blended, cfg, params))
    return GuidanceDataset(seqs, cfg)


def split_individual(ds: GuidanceDataset) -> GuidanceDataset:
    """Cut every blended sequence at its junctions: single clips, no transitions."""
    out = []
    for seq in ds.sequences:
        bounds = [0] + list(seq.clip.junctions) + [seq.clip.length]
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            piece = seq.clip.slice(lo, hi)
            entries = [GuidanceEntry(e.t0 - lo, e.V_D, e.V_C, e.p_star, e.c, e.gated)
                       for e in seq.entries if lo <= e.t0 < hi]
            if not entries:
                continue
            if entries[0].t0 != 0:
                first = entries[0]
                entries.insert(0, GuidanceEntry(0, first.V_D, first.V_C, first.p_star, first.c, first.gated))
            out.append(GuidanceSequence(piece, entries, seq.p_tilde[lo:hi].copy()))
    return GuidanceDataset(out, ds.config)


def save_dataset(ds: GuidanceDataset, path: str | Path) -> Path:
    path = Path(path)
    clip_dir = path.parent / f"{path.stem}_clips"
    clip_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, seq in enumerate(ds.sequences):
        cpath = clip_dir / f"seq_{i:04d}.jsonl"
        save_clip(seq.clip, cpath)
        lines.append(json.dumps({
            "format_version": DATASET_FORMAT,
            "clip": str(cpath.relative_to(path.parent)),
            "oracle": asdict(ds.config),
            "entries": [e.to_dict() for e in seq.entries],
            "p_tilde": seq.p_tilde.tolist(),
        }))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_dataset(path: str | Path) -> GuidanceDataset:
    path = Path(path)
    seqs = []
    cfg = OracleConfig()
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        if d.get("format_version") != DATASET_FORMAT:
            raise ValueError(f"{path}: unsupported dataset format {d.get('format_version')}")
        cfg = OracleConfig(**d["oracle"])
        clip = load_clip(path.parent / d["clip"])
        seqs.append(GuidanceSequence(clip, [GuidanceEntry.from_dict(e) for e in d["entries"]],
                                     np.array(d["p_tilde"], dtype=float)))
    if not seqs:
        raise ValueError(f"{path}: empty dataset")
    return GuidanceDataset(seqs, cfg)
