"""High-level switching policy over the two controllers.

Every ``k_sw`` low-level steps the policy picks a controller from a stacked
observation; the chosen controller then runs open loop until the next
decision. Training is discrete PPO with GAE at decision granularity plus a
behaviour-cloning term toward the smoothed oracle labels whose weight decays
on a cosine schedule.
"""
from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .env import (AGILE, DEFAULT_PARAMS, STABLE, EnvParams, EnvState, MotionClip, Terminal, reset,
                  run_controller)
from .netcore import (DenseNet, OptimState, adam_step, backward, categorical, forward, load_checkpoint,
                      log_softmax, named_params, prefix, save_checkpoint)
from .oracle import GuidanceDataset, GuidanceSequence, split_individual

BLOCK_DIM = 14
STACK = 5
OBS_DIM = BLOCK_DIM * STACK
ABLATIONS = ("full", "bc-only", "no-guide", "individual")


@dataclass
class PpoConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip: float = 0.2
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    epochs: int = 4
    minibatch: int = 128
    rollout_steps: int = 2048
    k_sw: int = 10
    lambda_start: float = 1.0
    lambda_end: float = 0.05
    k_bc: int = 300
    lr: float = 3e-4
    hidden: int = 64
    reward_scale: float = 20.0
    w_guide: float = 0.5
    eval_every: int = 5
    val_frac: float = 0.2

    def __post_init__(self):
        if self.k_sw < 1 or self.k_bc < 1:
            raise ValueError("k_sw and k_bc must be >= 1")
        if not 0.0 < self.gamma <= 1.0 or not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError("gamma must lie in (0, 1] and gae_lambda in [0, 1]")
        if self.clip <= 0 or self.reward_scale <= 0:
            raise ValueError("clip and reward_scale must be positive")

    @property
    def gamma_eff(self) -> float:
        return self.gamma ** self.k_sw


# -- observations -------------------------------------------------------------

def obs_block(state: EnvState, clip: MotionClip, prev_option: int | None,
              params: EnvParams = DEFAULT_PARAMS) -> np.ndarray:
    """One 14-dim observation block at ``state.t``."""
    t = min(state.t, clip.length - 1)
    b = np.empty(BLOCK_DIM)
    b[0:2] = state.vel / 10.0
    b[2:4] = (clip.ref_pos[t] - state.pos) / params.e_fail
    b[4:6] = clip.ref_vel[t] / 10.0
    b[6:8] = clip.ref_acc[t] / params.a_ref
    b[8] = clip.agg[t]
    b[9:11] = 0.0
    if prev_option is not None:
        b[9 + int(prev_option)] = 1.0
    b[11:13] = state.prev_action / params.a_ref
    b[13] = t / clip.length
    return b


class ObsHistory:
    """Newest-first stack of the last five blocks, zero-padded."""

    def __init__(self):
        self.blocks: deque = deque(maxlen=STACK)

    def push(self, block: np.ndarray) -> np.ndarray:
        self.blocks.appendleft(np.asarray(block, dtype=np.float64))
        return self.obs()

    def obs(self) -> np.ndarray:
        return build_obs(list(self.blocks))


def build_obs(history: Sequence[np.ndarray]) -> np.ndarray:
    """Stack up to five blocks (newest first); missing slots are zeros."""
    if len(history) > STACK:
        raise ValueError(f"history holds {len(history)} blocks, at most {STACK} allowed")
    out = np.zeros(OBS_DIM)
    for i, b in enumerate(history):
        out[i * BLOCK_DIM:(i + 1) * BLOCK_DIM] = b
    return out


# -- policy -------------------------------------------------------------------

class SwitchPolicy:
    def __init__(self, hidden: int = 64, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.pi = DenseNet([OBS_DIM, hidden, hidden, 2], rng, out_scale=0.01)
        self.vf = DenseNet([OBS_DIM, hidden, hidden, 1], rng, out_scale=1.0)

    def nets(self) -> dict[str, DenseNet]:
        return {"pi": self.pi, "vf": self.vf}

    def params(self) -> dict[str, np.ndarray]:
        return named_params(self.nets())

    def touch(self) -> None:
        self.pi.touch()
        self.vf.touch()

    def copy(self) -> "SwitchPolicy":
        p = SwitchPolicy.__new__(SwitchPolicy)
        p.pi, p.vf = self.pi.copy(), self.vf.copy()
        return p

    def logits(self, obs) -> np.ndarray:
        return forward(self.pi, obs)[0]

    def value(self, obs) -> np.ndarray:
        v = forward(self.vf, obs)[0]
        return v[..., 0]


def save_policy(policy: SwitchPolicy, path, meta: dict | None = None) -> Path:
    return save_checkpoint(path, policy.nets(), meta={"kind": "switch", **(meta or {})})


def load_policy(path) -> SwitchPolicy:
    nets, _, meta = load_checkpoint(path)
    if meta.get("kind") != "switch":
        raise ValueError(f"{path}: not a switching-policy checkpoint")
    p = SwitchPolicy.__new__(SwitchPolicy)
    p.pi, p.vf = nets["pi"], nets["vf"]
    return p


# -- episodes -----------------------------------------------------------------

@dataclass
class Decision:
    option: int
    log_prob: float = 0.0
    value: float = 0.0
    probs: np.ndarray | None = None
    info: dict = field(default_factory=dict)


Chooser = Callable[[np.ndarray, "EpisodeContext"], Decision]


@dataclass
class EpisodeContext:
    clip: MotionClip
    state: EnvState
    j: int
    t: int
    prev_option: int | None


@dataclass
class Episode:
    """One SMDP episode: per-decision records plus per-step totals."""

    clip_id: str
    obs: np.ndarray
    options: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    rewards: np.ndarray          # aggregated per decision (task + guide)
    task_rewards: np.ndarray     # aggregated per decision, guide excluded
    guides: np.ndarray           # p~ at each decision time, (n, 2)
    step_totals: np.ndarray      # per low-level step, task + guide
    status: Terminal
    infos: list

    @property
    def n(self) -> int:
        return len(self.options)

    @property
    def success(self) -> bool:
        return self.status is Terminal.SUCCESS

    @property
    def task_return(self) -> float:
        return float(self.task_rewards.sum())

    @property
    def switches(self) -> int:
        return int(np.sum(self.options[1:] != self.options[:-1])) if self.n > 1 else 0


def run_episode(clip: MotionClip, chooser: Chooser, cfg: PpoConfig, params: EnvParams = DEFAULT_PARAMS,
                p_tilde: np.ndarray | None = None, w_guide: float = 0.0) -> Episode:
    """Roll a full sequence; ``chooser`` maps the stacked observation to an option.

    With ``p_tilde`` and ``w_guide > 0`` each low-level step adds
    ``w_guide * sum_c p~_t(c) log pi(c|o)`` using the decision-time policy
    probabilities.
    """
    K = cfg.k_sw
    kp = params.kernel_params()
    state = reset(clip)
    hist = ObsHistory()
    prev = None
    rec_obs, rec_opt, rec_lp, rec_v, rec_r, rec_task, rec_g, infos = [], [], [], [], [], [], [], []
    steps = []
    status = Terminal.RUNNING
    j = 0
    while state.t < clip.length:
        t = state.t
        obs = hist.push(obs_block(state, clip, prev, params))
        d = chooser(obs, EpisodeContext(clip, state, j, t, prev))
        n = min(K, clip.length - t)
        r = run_controller(clip, int(d.option), state, n, params, kparams=kp)
        task = params.weighted_total(r.terms)
        totals = task.copy()
        g_t = p_tilde[t] if p_tilde is not None else np.array([0.5, 0.5])
        if p_tilde is not None and w_guide > 0.0 and d.probs is not None:
            logp = np.log(np.maximum(d.probs, 1e-300))
            totals = totals + w_guide * (p_tilde[t:t + r.steps] @ logp)
        rec_obs.append(obs)
        rec_opt.append(int(d.option))
        rec_lp.append(d.log_prob)
        rec_v.append(d.value)
        rec_r.append(math.fsum(totals))
        rec_task.append(math.fsum(task))
        rec_g.append(g_t)
        infos.append(d.info)
        steps.append(totals)
        state, status = r.state, r.status
        prev = int(d.option)
        j += 1
        if status is not Terminal.RUNNING:
            break
    return Episode(clip.clip_id, np.array(rec_obs), np.array(rec_opt, dtype=np.int64), np.array(rec_lp),
                   np.array(rec_v), np.array(rec_r), np.array(rec_task), np.array(rec_g),
                   np.concatenate(steps) if steps else np.empty(0), status, infos)


def policy_chooser(policy: SwitchPolicy, rng: np.random.Generator | None = None,
                   greedy: bool = False) -> Chooser:
    def choose(obs, ctx):
        logits = policy.logits(obs)
        v = float(policy.value(obs))
        cat = categorical(logits, rng)
        c = int(np.argmax(cat.probs) if greedy else cat.sample)
        if greedy and cat.probs[0] == cat.probs[1]:
            c = STABLE
        return Decision(c, float(np.log(cat.probs[c])), v, cat.probs)
    return choose


def fixed_chooser(option: int) -> Chooser:
    p = np.zeros(2)
    p[option] = 1.0
    return lambda obs, ctx: Decision(option, 0.0, 0.0, p)


def schedule_chooser(step_labels: np.ndarray) -> Chooser:
    """Execute the oracle's per-step labels open loop."""
    def choose(obs, ctx):
        c = int(step_labels[ctx.t])
        p = np.zeros(2)
        p[c] = 1.0
        return Decision(c, 0.0, 0.0, p)
    return choose


def uniform_chooser(rng: np.random.Generator) -> Chooser:
    half = np.array([0.5, 0.5])
    return lambda obs, ctx: Decision(int(rng.integers(2)), math.log(0.5), 0.0, half)


@dataclass
class Batch:
    obs: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray
    guides: np.ndarray

    def __len__(self) -> int:
        return len(self.actions)

    def take(self, idx) -> "Batch":
        return Batch(self.obs[idx], self.actions[idx], self.log_probs[idx], self.advantages[idx],
                     self.returns[idx], self.guides[idx])


def rollout(seqs: Sequence[GuidanceSequence], policy: SwitchPolicy, cfg: PpoConfig, rng: np.random.Generator,
            n_steps: int | None = None, guided: bool = True, params: EnvParams = DEFAULT_PARAMS
            ) -> list[Episode]:
    """Sample full episodes on random sequences until ``n_steps`` decisions are collected."""
    n_steps = cfg.rollout_steps if n_steps is None else n_steps
    chooser = policy_chooser(policy, rng)
    eps, total = [], 0
    while total < n_steps:
        seq = seqs[int(rng.integers(len(seqs)))]
        ep = run_episode(seq.clip, chooser, cfg, params, seq.p_tilde, cfg.w_guide if guided else 0.0)
        eps.append(ep)
        total += ep.n
    return eps


def gae(rewards, values, dones, gamma: float, lam: float, normalize: bool = True
        ) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantages and value targets.

    ``values`` carries one bootstrap entry more than ``rewards``; ``dones[t]``
    stops bootstrapping from ``t + 1``.
    """
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    d = np.asarray(dones, dtype=np.float64)
    if v.shape[0] != r.shape[0] + 1 or d.shape[0] != r.shape[0]:
        raise ValueError(f"length mismatch: rewards {r.shape[0]}, values {v.shape[0]}, dones {d.shape[0]}")
    adv = np.zeros_like(r)
    last = 0.0
    for t in range(r.shape[0] - 1, -1, -1):
        nonterm = 1.0 - d[t]
        delta = r[t] + gamma * nonterm * v[t + 1] - v[t]
        last = delta + gamma * lam * nonterm * last
        adv[t] = last
    ret = adv + v[:-1]
    if normalize:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    return adv, ret


def make_batch(episodes: Sequence[Episode], cfg: PpoConfig) -> Batch:
    rewards = np.concatenate([e.rewards for e in episodes]) / cfg.reward_scale
    values = np.concatenate([e.values for e in episodes] + [np.zeros(1)])
    dones = np.concatenate([np.eye(1, e.n, e.n - 1)[0] for e in episodes])
    adv, ret = gae(rewards, values, dones, cfg.gamma_eff, cfg.gae_lambda)
    return Batch(np.concatenate([e.obs for e in episodes]), np.concatenate([e.options for e in episodes]),
                 np.concatenate([e.log_probs for e in episodes]), adv, ret,
                 np.concatenate([e.guides for e in episodes]))


def bc_weight(k: int, cfg: PpoConfig) -> float:
    """Cosine decay from ``lambda_start`` to ``lambda_end`` over ``k_bc`` iterations."""
    frac = min(max(k, 0), cfg.k_bc) / cfg.k_bc
    return cfg.lambda_end + 0.5 * (cfg.lambda_start - cfg.lambda_end) * (1.0 + math.cos(math.pi * frac))


@dataclass
class PpoLoss:
    surrogate: float
    value: float
    entropy: float
    bc: float
    total: float
    clip_frac: float
    grads: dict = field(default_factory=dict)

    def row(self) -> dict:
        return {k: v for k, v in asdict(self).items() if k != "grads"}


def ppo_loss(policy: SwitchPolicy, batch: Batch, lam_bc: float, cfg: PpoConfig, bc_only: bool = False,
             need_grads: bool = True) -> PpoLoss:
    """Clipped surrogate + value MSE - entropy bonus + lam_bc * L_BC.

    With ``bc_only`` the objective is L_BC alone.
    """
    B = len(batch)
    z, tape_p = forward(policy.pi, batch.obs)
    logp_all = log_softmax(z)
    p = np.exp(logp_all)
    idx = np.arange(B)
    logp = logp_all[idx, batch.actions]
    ratio = np.exp(logp - batch.log_probs)
    A = batch.advantages
    lo, hi = 1.0 - cfg.clip, 1.0 + cfg.clip
    clipped = np.clip(ratio, lo, hi)
    unc, clp = ratio * A, clipped * A
    surr = float(-np.minimum(unc, clp).mean())
    ent_rows = -(p * logp_all).sum(axis=1)
    ent = float(ent_rows.mean())
    q = batch.guides
    bc = float(-(q * logp_all).sum(axis=1).mean())
    v, tape_v = forward(policy.vf, batch.obs)
    v = v[:, 0]
    vloss = float(((v - batch.returns) ** 2).mean())
    if bc_only:
        total = bc
    else:
        total = surr + cfg.value_coef * vloss - cfg.entropy_coef * ent + lam_bc * bc
    clip_frac = float(np.mean((ratio < lo) | (ratio > hi)))
    out = PpoLoss(surr, vloss, ent, bc, total, clip_frac)
    if not need_grads:
        return out

    # d/dz of L_BC = p * sum(q) - q
    dz = (p * q.sum(axis=1, keepdims=True) - q) / B * (1.0 if bc_only else lam_bc)
    if not bc_only:
        use_unc = unc <= clp
        inside = (ratio >= lo) & (ratio <= hi)
        g_logp = np.where(use_unc | inside, A * ratio, 0.0)
        onehot = np.zeros_like(p)
        onehot[idx, batch.actions] = 1.0
        dz += (-g_logp / B)[:, None] * (onehot - p)
        # dH/dz_j = -p_j (log p_j + H)
        dH = -p * (logp_all + ent_rows[:, None])
        dz += -cfg.entropy_coef * dH / B
    grads = prefix(backward(policy.pi, tape_p, dz)[0], "pi")
    if not bc_only:
        dv = (cfg.value_coef * 2.0 * (v - batch.returns) / B)[:, None]
        grads.update(prefix(backward(policy.vf, tape_v, dv)[0], "vf"))
    out.grads = grads
    return out


def ppo_update(policy: SwitchPolicy, batch: Batch, lam_bc: float, cfg: PpoConfig, opt: OptimState,
               rng: np.random.Generator, bc_only: bool = False) -> dict:
    params = policy.params()
    rows = []
    for _ in range(cfg.epochs):
        perm = rng.permutation(len(batch))
        for i in range(0, len(perm), cfg.minibatch):
            mb = batch.take(perm[i:i + cfg.minibatch])
            r = ppo_loss(policy, mb, lam_bc, cfg, bc_only)
            if not math.isfinite(r.total):
                raise RuntimeError(f"non-finite PPO loss: {r.row()}")
            adam_step(opt, params, r.grads)
            policy.touch()
            rows.append(r.row())
    return {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}


# -- training and evaluation --------------------------------------------------

@dataclass
class EvalSummary:
    mean_return: float
    success: float
    switch_mean: float
    switch_std: float
    rows: list


def summarize(episodes: Sequence[Episode]) -> EvalSummary:
    sw = np.array([e.switches for e in episodes], dtype=float)
    rows = [{"clip_id": e.clip_id, "return": e.task_return, "success": int(e.success),
             "switches": e.switches, "decisions": e.n} for e in episodes]
    return EvalSummary(float(np.mean([e.task_return for e in episodes])),
                       float(np.mean([e.success for e in episodes])), float(sw.mean()), float(sw.std()), rows)


def evaluate(seqs: Sequence[GuidanceSequence], chooser_factory: Callable[[GuidanceSequence], Chooser],
             cfg: PpoConfig, params: EnvParams = DEFAULT_PARAMS) -> EvalSummary:
    """Task-only (no guidance reward) evaluation on every sequence."""
    return summarize([run_episode(s.clip, chooser_factory(s), cfg, params) for s in seqs])


@dataclass
class SwitchTrainResult:
    policy: SwitchPolicy
    curve: list[dict]
    best_iter: int
    best_val: float


def train_switch(d_op: GuidanceDataset, cfg: PpoConfig, iters: int, seed: int, ablation: str = "full",
                 params: EnvParams = DEFAULT_PARAMS, val: GuidanceDataset | None = None) -> SwitchTrainResult:
    """Alternate rollouts and updates; keep the policy with the best greedy validation return."""
    if ablation not in ABLATIONS:
        raise ValueError(f"unknown ablation {ablation!r}; choose from {ABLATIONS}")
    rng = np.random.default_rng(seed)
    seqs = list(d_op.sequences)
    if val is None:
        n_val = max(1, int(round(cfg.val_frac * len(seqs)))) if len(seqs) > 1 else 0
        perm = rng.permutation(len(seqs))
        val_seqs = [seqs[i] for i in perm[:n_val]] or seqs
        seqs = [seqs[i] for i in perm[n_val:]] or seqs
    else:
        val_seqs = list(val.sequences)
    if ablation == "individual":
        seqs = split_individual(GuidanceDataset(seqs, d_op.config)).sequences
    guided = ablation in ("full", "individual")
    bc_only = ablation == "bc-only"
    policy = SwitchPolicy(cfg.hidden, np.random.default_rng([seed, 1]))
    opt = OptimState(lr=cfg.lr)
    curve = []
    best, best_val, best_iter = policy.copy(), -math.inf, -1
    for k in range(1, iters + 1):
        eps = rollout(seqs, policy, cfg, rng, guided=guided, params=params)
        batch = make_batch(eps, cfg)
        lam = bc_weight(k, cfg) if guided or bc_only else 0.0
        rep = ppo_update(policy, batch, lam, cfg, opt, rng, bc_only=bc_only)
        s = summarize(eps)
        row = {"iter": k, "return": s.mean_return, "success": s.success, "bc_loss": rep["bc"],
               "ppo_loss": rep["total"], "lambda_bc": lam}
        if k % cfg.eval_every == 0 or k == iters:
            ev = evaluate(val_seqs, lambda s_: policy_chooser(policy, greedy=True), cfg, params)
            row["val_return"] = ev.mean_return
            if ev.mean_return > best_val:
                best_val, best, best_iter = ev.mean_return, policy.copy(), k
        curve.append(row)
    return SwitchTrainResult(best, curve, best_iter, best_val)


def write_curve(rows: Sequence[dict], path) -> Path:
    path = Path(path)
    cols = ["iter", "return", "success", "bc_loss", "ppo_loss", "lambda_bc"]
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([r[c] for c in cols])
    return path


def label_agreement(policy: SwitchPolicy, seqs: Sequence[GuidanceSequence], cfg: PpoConfig,
                    params: EnvParams = DEFAULT_PARAMS) -> float:
    """Fraction of greedy decisions matching the oracle step label at decision time."""
    hits, n = 0, 0
    for s in seqs:
        labels = s.step_labels
        ep = run_episode(s.clip, policy_chooser(policy, greedy=True), cfg, params)
        for j, c in enumerate(ep.options):
            hits += int(c == labels[j * cfg.k_sw])
            n += 1
    return hits / max(n, 1)
