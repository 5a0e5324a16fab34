"""Planar reference-tracking surrogate with two fixed analytic controllers.

A point mass follows a 2-D reference built from sinusoids. The *stable*
controller is a critically damped PD law without feedforward: it lags on fast
references but rejects pushes quickly. The *agile* controller adds
acceleration feedforward on top of a stiff, lightly damped PD law: it tracks
fast references exactly but rings for a long time after a push.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels

STABLE, AGILE = 0, 1
OPTION_NAMES = ("D", "C")

# length_steps must hold two token windows of the default length (W = 20)
MIN_CLIP_STEPS = 40
CLIP_FORMAT_VERSION = 1


@dataclass
class EnvParams:
    """Dynamics, controller gains, failure bounds and reward weights."""

    dt: float = 0.02
    mass: float = 1.0
    kp_stable: float = 40.0
    zeta_stable: float = 1.0
    kp_agile: float = 120.0
    zeta_agile: float = 0.15
    a_max: float = 600.0
    e_fail: float = 1.0
    v_fail: float = 40.0
    a_ref: float = 90.0
    sigma_v: float = 1.0
    sigma_q: float = 0.25
    beta_tau: float = 1e-6
    beta_delta: float = 1e-5
    w_vel: float = 1.0
    w_pose: float = 1.0
    w_reg: float = 0.1
    w_guide: float = 0.5

    @property
    def kd_stable(self) -> float:
        return 2.0 * self.zeta_stable * math.sqrt(self.kp_stable * self.mass)

    @property
    def kd_agile(self) -> float:
        return 2.0 * self.zeta_agile * math.sqrt(self.kp_agile * self.mass)

    def kernel_params(self) -> np.ndarray:
        return np.array(
            [self.kp_stable, self.kd_stable, self.kp_agile, self.kd_agile, self.mass,
             self.a_max, self.dt, self.e_fail, self.v_fail, self.sigma_v, self.sigma_q,
             self.beta_tau, self.beta_delta],
            dtype=np.float64,
        )

    def weighted_total(self, terms: np.ndarray, guide: np.ndarray | float = 0.0) -> np.ndarray:
        """Per-step totals from an (n, 3) array of (r_vel, r_pose, r_reg)."""
        return (self.w_vel * terms[:, 0] + self.w_pose * terms[:, 1]
                + self.w_reg * terms[:, 2] + self.w_guide * guide)


DEFAULT_PARAMS = EnvParams()


@dataclass(frozen=True)
class ClipSpec:
    length_steps: int
    dyn_level: float
    perturb_prob: float = 0.0
    perturb_mag: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if int(self.length_steps) != self.length_steps or self.length_steps < MIN_CLIP_STEPS:
            raise ValueError(f"length_steps must be an integer >= {MIN_CLIP_STEPS}, got {self.length_steps}")
        if not 0.0 <= self.dyn_level <= 1.0:
            raise ValueError(f"dyn_level must lie in [0, 1], got {self.dyn_level}")
        if not 0.0 <= self.perturb_prob <= 1.0:
            raise ValueError(f"perturb_prob must lie in [0, 1], got {self.perturb_prob}")
        if not (self.perturb_mag >= 0.0 and math.isfinite(self.perturb_mag)):
            raise ValueError(f"perturb_mag must be finite and >= 0, got {self.perturb_mag}")
        if int(self.seed) != self.seed or self.seed < 0:
            raise ValueError(f"seed must be a non-negative integer, got {self.seed}")

    @property
    def base_frequency(self) -> float:
        return 0.25 + 2.75 * self.dyn_level

    @property
    def amplitude(self) -> float:
        return 0.3 + 0.7 * self.dyn_level

    @classmethod
    def from_dict(cls, d: dict) -> "ClipSpec":
        return cls(int(d["length_steps"]), float(d["dyn_level"]), float(d["perturb_prob"]),
                   float(d["perturb_mag"]), int(d["seed"]))


@dataclass(frozen=True)
class Frame:
    ref_pos: np.ndarray
    ref_vel: np.ndarray
    ref_acc: np.ndarray
    agg: float


@dataclass
class MotionClip:
    """Reference trajectory plus its realised disturbance schedule.

    Arrays are per low-level step: ``ref_pos``, ``ref_vel``, ``ref_acc`` and
    ``impulses`` are (L, 2); ``agg``, ``perturb_prob`` and ``perturb_mag`` are
    (L,). Generated clips have one segment; blended clips record both source
    specs and the junction index.
    """

    ref_pos: np.ndarray
    ref_vel: np.ndarray
    ref_acc: np.ndarray
    agg: np.ndarray
    impulses: np.ndarray
    perturb_prob: np.ndarray
    perturb_mag: np.ndarray
    seed: int
    segments: list = field(default_factory=list)
    junctions: list = field(default_factory=list)
    clip_id: str = ""

    @property
    def length(self) -> int:
        return self.ref_pos.shape[0]

    def __len__(self) -> int:
        return self.length

    @property
    def spec(self) -> ClipSpec | None:
        return self.segments[0] if len(self.segments) == 1 else None

    def frame(self, t: int) -> Frame:
        return Frame(self.ref_pos[t].copy(), self.ref_vel[t].copy(), self.ref_acc[t].copy(), float(self.agg[t]))

    @property
    def frames(self) -> list[Frame]:
        return [self.frame(t) for t in range(self.length)]

    def max_ref_speed(self) -> float:
        return float(np.linalg.norm(self.ref_vel, axis=1).max())

    def slice(self, start: int, stop: int) -> "MotionClip":
        segs = [s for s in self.segments]
        return MotionClip(
            self.ref_pos[start:stop].copy(), self.ref_vel[start:stop].copy(),
            self.ref_acc[start:stop].copy(), self.agg[start:stop].copy(),
            self.impulses[start:stop].copy(), self.perturb_prob[start:stop].copy(),
            self.perturb_mag[start:stop].copy(), self.seed, segs, [],
            f"{self.clip_id}[{start}:{stop}]",
        )


class Terminal(str, enum.Enum):
    RUNNING = "running"
    SUCCESS = "success"
    FAILURE = "failure"


_STATUS = {kernels.RUNNING: Terminal.RUNNING, kernels.SUCCESS: Terminal.SUCCESS,
           kernels.FAILURE: Terminal.FAILURE}


@dataclass
class EnvState:
    pos: np.ndarray
    vel: np.ndarray
    t: int = 0
    failed: bool = False
    prev_action: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def copy(self) -> "EnvState":
        return EnvState(self.pos.copy(), self.vel.copy(), self.t, self.failed, self.prev_action.copy())

    def as_kernel_state(self) -> np.ndarray:
        return np.array([self.pos[0], self.pos[1], self.vel[0], self.vel[1],
                         self.prev_action[0], self.prev_action[1]], dtype=np.float64)


@dataclass
class RewardTerms:
    r_vel: float
    r_pose: float
    r_reg: float
    r_guide: float
    total: float


def reset(clip: MotionClip, t: int = 0) -> EnvState:
    """State placed exactly on the reference at step ``t``."""
    if not 0 <= t < clip.length:
        raise ValueError(f"t={t} outside clip of length {clip.length}")
    return EnvState(clip.ref_pos[t].copy(), clip.ref_vel[t].copy(), t, False, np.zeros(2))


def _agg_series(ref_acc: np.ndarray, a_ref: float) -> np.ndarray:
    return np.sqrt(ref_acc[:, 0] * ref_acc[:, 0] + ref_acc[:, 1] * ref_acc[:, 1]) / a_ref


def aggressiveness(clip: MotionClip, t: int, params: EnvParams = DEFAULT_PARAMS) -> float:
    """Reference acceleration magnitude at ``t`` in units of ``a_ref``."""
    if not 0 <= t < clip.length:
        raise ValueError(f"t={t} outside clip of length {clip.length}")
    ax, ay = float(clip.ref_acc[t, 0]), float(clip.ref_acc[t, 1])
    return math.sqrt(ax * ax + ay * ay) / params.a_ref


def _sample_impulses(rng: np.random.Generator, prob: np.ndarray, mag: np.ndarray) -> np.ndarray:
    n = prob.shape[0]
    hit = rng.random(n) < prob
    theta = rng.uniform(0.0, 2.0 * np.pi, n)
    imp = np.zeros((n, 2))
    imp[:, 0] = np.where(hit, mag * np.cos(theta), 0.0)
    imp[:, 1] = np.where(hit, mag * np.sin(theta), 0.0)
    return imp


def reference_from_positions(pos: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Forward-difference velocity and acceleration from L+2 position samples."""
    vel = (pos[1:] - pos[:-1]) / dt
    acc = (vel[1:] - vel[:-1]) / dt
    L = pos.shape[0] - 2
    return pos[:L].copy(), vel[:L].copy(), acc[:L].copy()


def generate_clip(spec: ClipSpec, params: EnvParams = DEFAULT_PARAMS, clip_id: str = "") -> MotionClip:
    """Sum of two sinusoids per axis at ``f`` and ``1.5 f`` with weights 0.7/0.3.

    Velocity and acceleration are forward differences of the sampled
    positions, so a controller applying ``m * ref_acc`` from an on-reference
    state reproduces the reference exactly under the Euler update.
    """
    if not isinstance(spec, ClipSpec):
        raise TypeError("spec must be a ClipSpec")
    ref_ss, dist_ss = np.random.SeedSequence(spec.seed).spawn(2)
    ref_rng = np.random.default_rng(ref_ss)
    L = spec.length_steps
    f, A = spec.base_frequency, spec.amplitude
    tgrid = np.arange(L + 2) * params.dt
    pos = np.zeros((L + 2, 2))
    for axis in range(2):
        phi = ref_rng.uniform(0.0, 2.0 * np.pi, 2)
        pos[:, axis] = A * (0.7 * np.sin(2.0 * np.pi * f * tgrid + phi[0])
                            + 0.3 * np.sin(2.0 * np.pi * 1.5 * f * tgrid + phi[1]))
    ref_pos, ref_vel, ref_acc = reference_from_positions(pos, params.dt)
    prob = np.full(L, spec.perturb_prob)
    mag = np.full(L, spec.perturb_mag)
    impulses = _sample_impulses(np.random.default_rng(dist_ss), prob, mag)
    return MotionClip(ref_pos, ref_vel, ref_acc, _agg_series(ref_acc, params.a_ref), impulses,
                      prob, mag, spec.seed, [spec], [], clip_id or f"clip-{spec.seed}")


def _clamp(a: float, a_max: float) -> float:
    if a > a_max:
        return a_max
    if a < -a_max:
        return -a_max
    return a


def controller_stable(state: EnvState, frame: Frame, params: EnvParams = DEFAULT_PARAMS) -> np.ndarray:
    if state.failed:
        raise ValueError("controller called on a failed state")
    kp, kd = params.kp_stable, params.kd_stable
    ax = kp * (float(frame.ref_pos[0]) - float(state.pos[0])) + kd * (float(frame.ref_vel[0]) - float(state.vel[0]))
    ay = kp * (float(frame.ref_pos[1]) - float(state.pos[1])) + kd * (float(frame.ref_vel[1]) - float(state.vel[1]))
    return np.array([_clamp(ax, params.a_max), _clamp(ay, params.a_max)])


def controller_agile(state: EnvState, frame: Frame, params: EnvParams = DEFAULT_PARAMS) -> np.ndarray:
    if state.failed:
        raise ValueError("controller called on a failed state")
    kp, kd, m = params.kp_agile, params.kd_agile, params.mass
    ax = (m * float(frame.ref_acc[0]) + kp * (float(frame.ref_pos[0]) - float(state.pos[0]))
          + kd * (float(frame.ref_vel[0]) - float(state.vel[0])))
    ay = (m * float(frame.ref_acc[1]) + kp * (float(frame.ref_pos[1]) - float(state.pos[1]))
          + kd * (float(frame.ref_vel[1]) - float(state.vel[1])))
    return np.array([_clamp(ax, params.a_max), _clamp(ay, params.a_max)])


CONTROLLERS = (controller_stable, controller_agile)


def reward(state: EnvState, frame: Frame, action, prev_action, guide_dist=None, policy_probs=None,
           params: EnvParams = DEFAULT_PARAMS) -> RewardTerms:
    """Tracking, regularisation and (optional) guidance reward for one step."""
    vals = [*state.pos, *state.vel, *frame.ref_pos, *frame.ref_vel, *action, *prev_action]
    if not all(math.isfinite(float(v)) for v in vals):
        raise ValueError("reward received a non-finite input")
    evx = float(frame.ref_vel[0]) - float(state.vel[0])
    evy = float(frame.ref_vel[1]) - float(state.vel[1])
    epx = float(frame.ref_pos[0]) - float(state.pos[0])
    epy = float(frame.ref_pos[1]) - float(state.pos[1])
    ax, ay = float(action[0]), float(action[1])
    dax, day = ax - float(prev_action[0]), ay - float(prev_action[1])
    r_vel = math.exp(-(evx * evx + evy * evy) / params.sigma_v)
    r_pose = math.exp(-(epx * epx + epy * epy) / params.sigma_q)
    r_reg = -params.beta_tau * (ax * ax + ay * ay) - params.beta_delta * (dax * dax + day * day)
    r_guide = 0.0
    if guide_dist is not None and policy_probs is not None:
        g = np.asarray(guide_dist, dtype=float)
        p = np.asarray(policy_probs, dtype=float)
        if not (np.all(np.isfinite(g)) and np.all(np.isfinite(p))):
            raise ValueError("reward received a non-finite guide or policy distribution")
        r_guide = float(np.sum(g * np.log(p)))
    total = (params.w_vel * r_vel + params.w_pose * r_pose + params.w_reg * r_reg
             + params.w_guide * r_guide)
    return RewardTerms(r_vel, r_pose, r_reg, r_guide, total)


def step(state: EnvState, action, clip: MotionClip, params: EnvParams = DEFAULT_PARAMS
         ) -> tuple[EnvState, RewardTerms, Terminal]:
    """One Euler step of the double integrator followed by the failure test.

    The reward scores the pre-step state against frame ``t``. The clip's
    impulse for step ``t`` is added to the velocity.
    """
    if state.failed:
        raise ValueError("step called on a failed state")
    if not 0 <= state.t < clip.length:
        raise ValueError(f"step called at t={state.t} on a clip of length {clip.length}")
    t = state.t
    frame = clip.frame(t)
    a = np.asarray(action, dtype=float)
    terms = reward(state, frame, a, state.prev_action, params=params)
    ax, ay = float(a[0]), float(a[1])
    px, py = float(state.pos[0]), float(state.pos[1])
    vx, vy = float(state.vel[0]), float(state.vel[1])
    npx = px + vx * params.dt
    npy = py + vy * params.dt
    nvx = vx + (ax / params.mass) * params.dt + float(clip.impulses[t, 0])
    nvy = vy + (ay / params.mass) * params.dt + float(clip.impulses[t, 1])
    new = EnvState(np.array([npx, npy]), np.array([nvx, nvy]), t + 1, False, np.array([ax, ay]))
    if t + 1 >= clip.length:
        return new, terms, Terminal.SUCCESS
    dx = npx - float(clip.ref_pos[t + 1, 0])
    dy = npy - float(clip.ref_pos[t + 1, 1])
    if math.sqrt(dx * dx + dy * dy) > params.e_fail or math.sqrt(nvx * nvx + nvy * nvy) > params.v_fail:
        new.failed = True
        return new, terms, Terminal.FAILURE
    return new, terms, Terminal.RUNNING


@dataclass
class Rollout:
    """Result of running controllers over a span of a clip."""

    terms: np.ndarray          # (n, 3): r_vel, r_pose, r_reg
    status: Terminal
    state: EnvState

    @property
    def steps(self) -> int:
        return self.terms.shape[0]


def run_controller(clip: MotionClip, controller: int, state: EnvState, n_steps: int,
                   params: EnvParams = DEFAULT_PARAMS, impulses: np.ndarray | None = None,
                   imp_offset: int = 0, kparams: np.ndarray | None = None) -> Rollout:
    """Run one controller for up to ``n_steps`` from ``state`` using the rollout kernel."""
    if state.failed:
        raise ValueError("cannot roll out from a failed state")
    kstate = state.as_kernel_state()
    out = np.empty((n_steps, 3))
    imp = clip.impulses if impulses is None else impulses
    kp = params.kernel_params() if kparams is None else kparams
    done, status = kernels.simulate(clip.ref_pos, clip.ref_vel, clip.ref_acc, imp, imp_offset,
                                    state.t, n_steps, controller, kstate, kp, out)
    st = _STATUS[status]
    new = EnvState(kstate[0:2].copy(), kstate[2:4].copy(), state.t + done, st is Terminal.FAILURE,
                   kstate[4:6].copy())
    return Rollout(out[:done], st, new)


def rollout_fixed(clip: MotionClip, controller: int, params: EnvParams = DEFAULT_PARAMS) -> Rollout:
    """Full episode under a single controller from the on-reference start."""
    return run_controller(clip, controller, reset(clip), clip.length, params)


def rollout_schedule(clip: MotionClip, options: Sequence[int], k_sw: int,
                     params: EnvParams = DEFAULT_PARAMS) -> tuple[Rollout, list[int]]:
    """Execute a per-decision option sequence open loop.

    ``options[j]`` runs for steps ``[j*k_sw, (j+1)*k_sw)``. Returns the
    concatenated rollout and the options actually executed.
    """
    state = reset(clip)
    kp = params.kernel_params()
    chunks, used = [], []
    status = Terminal.RUNNING
    for j, c in enumerate(options):
        t = j * k_sw
        if t >= clip.length:
            break
        r = run_controller(clip, int(c), state, min(k_sw, clip.length - t), params, kparams=kp)
        chunks.append(r.terms)
        used.append(int(c))
        state, status = r.state, r.status
        if status is not Terminal.RUNNING:
            break
    terms = np.concatenate(chunks) if chunks else np.empty((0, 3))
    return Rollout(terms, status, state), used


# -- persistence ------------------------------------------------------------

def _header(clip: MotionClip) -> dict:
    return {
        "type": "header",
        "format_version": CLIP_FORMAT_VERSION,
        "clip_id": clip.clip_id,
        "seed": int(clip.seed),
        "segments": [asdict(s) for s in clip.segments],
        "junctions": [int(j) for j in clip.junctions],
        "length": clip.length,
    }


def clip_to_lines(clip: MotionClip) -> list[str]:
    lines = [json.dumps(_header(clip))]
    for t in range(clip.length):
        lines.append(json.dumps({
            "ref_pos": clip.ref_pos[t].tolist(),
            "ref_vel": clip.ref_vel[t].tolist(),
            "ref_acc": clip.ref_acc[t].tolist(),
            "agg": float(clip.agg[t]),
            "impulse": clip.impulses[t].tolist(),
            "perturb_prob": float(clip.perturb_prob[t]),
            "perturb_mag": float(clip.perturb_mag[t]),
        }))
    return lines


def save_clip(clip: MotionClip, path: str | Path) -> Path:
    path = Path(path)
    path.write_text("\n".join(clip_to_lines(clip)) + "\n", encoding="utf-8")
    return path


def load_clip(path: str | Path) -> MotionClip:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ValueError(f"{path}: empty clip file")
    head = json.loads(lines[0])
    if head.get("type") != "header":
        raise ValueError(f"{path}: first line is not a clip header")
    if head.get("format_version") != CLIP_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported clip format {head.get('format_version')}")
    rows = [json.loads(s) for s in lines[1:] if s.strip()]
    if len(rows) != head["length"]:
        raise ValueError(f"{path}: header says {head['length']} frames, found {len(rows)}")

    def col(key):
        return np.array([r[key] for r in rows], dtype=np.float64)

    return MotionClip(col("ref_pos"), col("ref_vel"), col("ref_acc"), col("agg"), col("impulse"),
                      col("perturb_prob"), col("perturb_mag"), int(head["seed"]),
                      [ClipSpec.from_dict(s) for s in head["segments"]],
                      [int(j) for j in head["junctions"]], head["clip_id"])
