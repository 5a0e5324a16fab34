"""Option-aware VQ-VAE over sliding reference windows.

A window of ``W`` frames (ref_pos, ref_vel, ref_acc) is flattened and encoded
into ``N_z`` latent chunks, each snapped to its nearest codebook entry. Four
heads share the quantized latents: a decoder (reconstruction), an option
head (stable vs agile) and a next-token head that predicts the last token of
a window from the preceding ones.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .netcore import (Codebook, DenseNet, OptimState, adam_step, backward, cross_entropy, forward,
                      load_checkpoint, named_params, nearest_codes, prefix, save_checkpoint, softmax)
from .oracle import GuidanceDataset, hold_labels

SIGMA_FLOOR = 1e-6


@dataclass
class VqConfig:
    window: int = 20
    window_stride: int = 5
    n_features: int = 6
    n_tokens: int = 5
    codebook_size: int = 64
    latent_dim: int = 16
    beta: float = 0.25
    lambda_opt: float = 1.0
    lambda_token: float = 0.1
    hidden: int = 64
    head_hidden: int = 32
    lr: float = 1e-3
    batch_size: int = 64
    dead_after: int = 200
    mu: list | None = None
    sigma: list | None = None

    def __post_init__(self):
        if self.window < 1 or self.n_tokens < 2 or self.window % self.n_tokens:
            raise ValueError(f"window ({self.window}) must be a positive multiple of n_tokens ({self.n_tokens} >= 2)")
        if self.window_stride < 1:
            raise ValueError("window_stride must be >= 1")
        if self.codebook_size < 2 or self.latent_dim < 1:
            raise ValueError("codebook needs >= 2 entries of dimension >= 1")
        if self.sigma is not None and any(s <= 0 for s in self.sigma):
            raise ValueError("sigma entries must be positive")

    @property
    def input_dim(self) -> int:
        return self.window * self.n_features


# -- windows ------------------------------------------------------------------

def clip_features(clip) -> np.ndarray:
    """Per-frame features (L, 6): ref_pos, ref_vel, ref_acc."""
    return np.concatenate([clip.ref_pos, clip.ref_vel, clip.ref_acc], axis=1)


@dataclass
class WindowSet:
    """Unnormalized flattened windows with their labels and provenance."""

    X: np.ndarray            # (n, W*F)
    labels: np.ndarray       # (n,)
    clip_ids: list
    offsets: np.ndarray
    segments: np.ndarray     # source clip seed of the segment holding the window

    def __len__(self) -> int:
        return self.X.shape[0]

    def take(self, idx) -> "WindowSet":
        idx = np.asarray(idx, dtype=int)
        return WindowSet(self.X[idx], self.labels[idx], [self.clip_ids[i] for i in idx],
                         self.offsets[idx], self.segments[idx])


@dataclass
class TokenWindow:
    features: np.ndarray
    tokens: np.ndarray
    option_label: int
    clip_id: str
    offset: int


def majority_label(labels: np.ndarray) -> int:
    """1 only when agile steps are a strict majority."""
    return int(2 * int(np.sum(labels)) > len(labels))


def window_offsets(length: int, cfg: VqConfig, junctions: Sequence[int] = ()) -> list[int]:
    offs = []
    for o in range(0, length - cfg.window + 1, cfg.window_stride):
        if any(o < J < o + cfg.window for J in junctions):
            continue
        offs.append(o)
    return offs


def make_windows(dataset: GuidanceDataset, cfg: VqConfig) -> WindowSet:
    """Clip-aware windows: none straddles a blend junction."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    Xs, ys, ids, offs, segs = [], [], [], [], []
    W = cfg.window
    for seq in dataset.sequences:
        clip = seq.clip
        feats = clip_features(clip)
        steps = hold_labels(seq.entries, clip.length)
        bounds = [0] + list(clip.junctions) + [clip.length]
        for o in window_offsets(clip.length, cfg, clip.junctions):
            seg_i = int(np.searchsorted(bounds, o, side="right")) - 1
            Xs.append(feats[o:o + W].ravel())
            ys.append(majority_label(steps[o:o + W]))
            ids.append(clip.clip_id)
            offs.append(o)
            segs.append(clip.segments[seg_i].seed if seg_i < len(clip.segments) else clip.seed)
    if not Xs:
        raise ValueError("no clip is long enough for a single window")
    return WindowSet(np.array(Xs), np.array(ys, dtype=np.int64), ids, np.array(offs), np.array(segs))


def recent_window(feats: np.ndarray, t: int, W: int) -> np.ndarray:
    """Frames ``t-W+1 .. t`` (clamped at the clip start), flattened."""
    idx = np.clip(np.arange(t - W + 1, t + 1), 0, feats.shape[0] - 1)
    return feats[idx].ravel()


def fit_normalizer(ws: WindowSet, cfg: VqConfig) -> tuple[np.ndarray, np.ndarray]:
    frames = ws.X.reshape(-1, cfg.n_features)
    mu = frames.mean(axis=0)
    sigma = np.maximum(frames.std(axis=0), SIGMA_FLOOR)
    return mu, sigma


def split_by_segment(ws: WindowSet, test_frac: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Train/test window indices with every source clip on exactly one side."""
    segs = np.unique(ws.segments)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(segs)
    n_test = max(1, int(round(test_frac * len(segs)))) if len(segs) > 1 else 0
    test = set(perm[:n_test].tolist())
    mask = np.array([s in test for s in ws.segments])
    return np.flatnonzero(~mask), np.flatnonzero(mask)


# -- model --------------------------------------------------------------------

class VqModel:
    def __init__(self, cfg: VqConfig, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        N, D, H = cfg.n_tokens, cfg.latent_dim, cfg.hidden
        self.enc = DenseNet([cfg.input_dim, H, N * D], rng)
        self.dec = DenseNet([N * D, H, cfg.input_dim], rng)
        self.opt_head = DenseNet([N * D, cfg.head_hidden, 2], rng)
        self.tok_head = DenseNet([(N - 1) * D, cfg.head_hidden, cfg.codebook_size], rng)
        self.codebook = Codebook(rng.normal(0.0, 1.0, size=(cfg.codebook_size, D)))

    def nets(self) -> dict[str, DenseNet]:
        return {"enc": self.enc, "dec": self.dec, "opt": self.opt_head, "tok": self.tok_head}

    def params(self) -> dict[str, np.ndarray]:
        return named_params(self.nets(), {"codebook": self.codebook.entries})

    def touch(self) -> None:
        for n in self.nets().values():
            n.touch()

    def copy(self) -> "VqModel":
        m = VqModel.__new__(VqModel)
        m.cfg = replace(self.cfg)
        m.enc, m.dec = self.enc.copy(), self.dec.copy()
        m.opt_head, m.tok_head = self.opt_head.copy(), self.tok_head.copy()
        m.codebook = Codebook(self.codebook.entries.copy())
        return m

    def normalize(self, X) -> np.ndarray:
        if self.cfg.mu is None:
            raise ValueError("model has no normalization statistics")
        X = np.asarray(X, dtype=np.float64)
        F = self.cfg.n_features
        mu, sigma = np.asarray(self.cfg.mu), np.asarray(self.cfg.sigma)
        return ((X.reshape(*X.shape[:-1], -1, F) - mu) / sigma).reshape(X.shape)


@dataclass
class Encoded:
    tokens: np.ndarray   # (B, N_z)
    z_q: np.ndarray      # (B, N_z, D)
    z_e: np.ndarray      # (B, N_z, D)


def encode(model: VqModel, x) -> Encoded:
    """Tokens and quantized latents for normalized windows (single or batch)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.ndim != 2 or xb.shape[1] != model.cfg.input_dim:
        raise ValueError(f"window has shape {x.shape}, model expects {model.cfg.input_dim} features")
    B, N, D = xb.shape[0], model.cfg.n_tokens, model.cfg.latent_dim
    ze = forward(model.enc, xb)[0].reshape(B, N, D)
    k = nearest_codes(ze.reshape(-1, D), model.codebook.entries).reshape(B, N)
    zq = model.codebook.entries[k]
    if single:
        return Encoded(k[0], zq[0], ze[0])
    return Encoded(k, zq, ze)


def option_predict(model: VqModel, x) -> np.ndarray:
    """Option-head probabilities for normalized windows."""
    enc = encode(model, x)
    zq = enc.z_q.reshape(-1, model.cfg.n_tokens * model.cfg.latent_dim)
    p = softmax(forward(model.opt_head, zq)[0])
    return p[0] if np.ndim(x) == 1 else p


# -- losses -------------------------------------------------------------------

@dataclass
class Frozen:
    """Quantization constants: code ids plus the stop-gradient operands."""

    k: np.ndarray
    z_e: np.ndarray
    e_k: np.ndarray


@dataclass
class VqLoss:
    recon: float
    codebook: float
    commit: float
    l_vq: float
    l_opt: float
    l_token: float
    total: float
    opt_acc: float
    frozen: Frozen
    grads: dict = field(default_factory=dict)

    def row(self) -> dict:
        return {k: v for k, v in asdict(self).items() if k not in ("frozen", "grads")}


def loss_opvq(model: VqModel, X: np.ndarray, y: np.ndarray, frozen: Frozen | None = None,
              need_grads: bool = True) -> VqLoss:
    """Combined loss on a normalized batch with straight-through gradients.

    The quantized latent is ``z_e + sg(e_k - z_e)``. With ``frozen`` given,
    the code ids and the stop-gradient operands are taken from it, which
    makes the loss a smooth function whose exact derivative equals the
    straight-through gradient (used for finite-difference checks).
    """
    cfg = model.cfg
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    B, N, D = X.shape[0], cfg.n_tokens, cfg.latent_dim
    if B == 0:
        raise ValueError("empty batch")
    E = model.codebook.entries
    ze_flat, tape_e = forward(model.enc, X)
    ze = ze_flat.reshape(B, N, D)
    if frozen is None:
        k = nearest_codes(ze.reshape(-1, D), E).reshape(B, N)
        frozen = Frozen(k, ze.copy(), E[k].copy())
    k, ze0, e0 = frozen.k, frozen.z_e, frozen.e_k
    ek = E[k]
    zq = ze + (e0 - ze0)
    zq_flat = zq.reshape(B, N * D)

    xh, tape_d = forward(model.dec, zq_flat)
    diff = xh - X
    recon = float((diff * diff).mean())
    dcb = ze0 - ek
    codebook = float((dcb * dcb).sum() / B)
    dcm = ze - e0
    commit = float((dcm * dcm).sum() / B)
    l_vq = recon + codebook + cfg.beta * commit

    lo, tape_o = forward(model.opt_head, zq_flat)
    l_opt, dlo = cross_entropy(lo, y)
    acc = float(np.mean(np.argmax(lo, axis=1) == y))
    lt, tape_t = forward(model.tok_head, zq[:, :N - 1].reshape(B, (N - 1) * D))
    l_tok, dlt = cross_entropy(lt, k[:, N - 1])
    total = l_vq + cfg.lambda_opt * l_opt + cfg.lambda_token * l_tok
    out = VqLoss(recon, codebook, commit, l_vq, l_opt, l_tok, total, acc, frozen)
    if not need_grads:
        return out

    grads = {}
    g_dec, dzq = backward(model.dec, tape_d, 2.0 * diff / diff.size)
    grads.update(prefix(g_dec, "dec"))
    g_opt, dzq_o = backward(model.opt_head, tape_o, cfg.lambda_opt * dlo)
    grads.update(prefix(g_opt, "opt"))
    dzq = dzq + dzq_o
    g_tok, dzq_t = backward(model.tok_head, tape_t, cfg.lambda_token * dlt)
    grads.update(prefix(g_tok, "tok"))
    dzq = dzq.reshape(B, N, D)
    dzq[:, :N - 1] += dzq_t.reshape(B, N - 1, D)
    # straight-through into the encoder, plus the commitment pull
    dze = dzq + cfg.beta * 2.0 * dcm / B
    g_enc, _ = backward(model.enc, tape_e, dze.reshape(B, N * D))
    grads.update(prefix(g_enc, "enc"))
    dE = np.zeros_like(E)
    np.add.at(dE, k.ravel(), (-2.0 * dcb / B).reshape(-1, D))
    grads["codebook"] = dE
    out.grads = grads
    return out


# -- training -----------------------------------------------------------------

@dataclass
class VqTrainResult:
    model: VqModel
    curve: list[dict]
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray
    best_epoch: int


def init_codebook(model: VqModel, Xn: np.ndarray, rng: np.random.Generator) -> None:
    """Seed entries from encoder outputs on a warmup batch."""
    D, C = model.cfg.latent_dim, model.cfg.codebook_size
    ze = forward(model.enc, Xn)[0].reshape(-1, D)
    pick = rng.choice(ze.shape[0], size=C, replace=ze.shape[0] < C)
    entries = ze[pick] + rng.normal(0.0, 1e-3, size=(C, D))
    model.codebook.entries[...] = entries


def evaluate(model: VqModel, Xn: np.ndarray, y: np.ndarray, batch: int = 1024) -> dict:
    rows = []
    for i in range(0, len(Xn), batch):
        r = loss_opvq(model, Xn[i:i + batch], y[i:i + batch], need_grads=False)
        rows.append((len(Xn[i:i + batch]), r.row()))
    n = sum(w for w, _ in rows)
    return {k: sum(w * r[k] for w, r in rows) / n for k in rows[0][1]}


def train_opvqvae(windows: WindowSet, cfg: VqConfig, epochs: int, seed: int,
                  test_frac: float = 0.2, val_frac: float = 0.1,
                  split: tuple[np.ndarray, np.ndarray] | None = None) -> VqTrainResult:
    """Minibatch Adam training; returns the model at the best validation loss.

    The split is by source clip. ``split`` may supply explicit (train, test)
    window indices; validation windows are carved from the training side.
    """
    rng = np.random.default_rng(seed)
    if split is None:
        train_idx, test_idx = split_by_segment(windows, test_frac, seed)
    else:
        train_idx, test_idx = (np.asarray(s, dtype=int) for s in split)
    tr = windows.take(train_idx)
    sub_tr, sub_val = split_by_segment(tr, val_frac, seed + 1)
    if len(sub_val) == 0 or len(sub_tr) == 0:
        sub_tr, sub_val = np.arange(len(tr)), np.arange(len(tr))
    val_idx = train_idx[sub_val]
    train_idx = train_idx[sub_tr]
    mu, sigma = fit_normalizer(windows.take(train_idx), cfg)
    cfg = replace(cfg, mu=mu.tolist(), sigma=sigma.tolist())
    model = VqModel(cfg, np.random.default_rng([seed, 1]))
    Xtr = model.normalize(windows.X[train_idx])
    ytr = windows.labels[train_idx]
    Xval = model.normalize(windows.X[val_idx])
    yval = windows.labels[val_idx]

    bs = min(cfg.batch_size, len(Xtr))
    init_codebook(model, Xtr[rng.permutation(len(Xtr))[:bs]], rng)
    params = model.params()
    opt = OptimState(lr=cfg.lr)
    last_used = np.zeros(cfg.codebook_size, dtype=np.int64)
    n_batches = 0
    best, best_loss, best_epoch = model.copy(), math.inf, -1
    curve = []
    for epoch in range(epochs):
        perm = rng.permutation(len(Xtr))
        losses = []
        for i in range(0, len(perm), bs):
            idx = perm[i:i + bs]
            r = loss_opvq(model, Xtr[idx], ytr[idx])
            if not math.isfinite(r.total):
                raise RuntimeError(f"loss diverged at epoch {epoch}, batch {i // bs}: {r.row()}")
            adam_step(opt, params, r.grads)
            model.touch()
            n_batches += 1
            losses.append(r.total)
            last_used[np.unique(r.frozen.k)] = n_batches
            dead = np.flatnonzero(n_batches - last_used >= cfg.dead_after)
            if dead.size:
                pool = r.frozen.z_e.reshape(-1, cfg.latent_dim)
                model.codebook.entries[dead] = pool[rng.choice(len(pool), size=dead.size)]
                for key in ("m", "v"):
                    getattr(opt, key)["codebook"][dead] = 0.0
                last_used[dead] = n_batches
        ev = evaluate(model, Xval, yval)
        curve.append({"epoch": epoch, "train_total": float(np.mean(losses)),
                      **{f"val_{k}": v for k, v in ev.items()}})
        if ev["total"] < best_loss:
            best_loss, best, best_epoch = ev["total"], model.copy(), epoch
    return VqTrainResult(best, curve, train_idx, val_idx, np.asarray(test_idx, dtype=int), best_epoch)


# -- analytics ----------------------------------------------------------------

@dataclass
class TokenStats:
    P: np.ndarray                    # Laplace-smoothed unigram, length C
    sequences: dict                  # token tuple -> [count_D, count_C]

    def shared_fraction(self) -> float:
        """Fraction of distinct sequences emitted under both labels."""
        if not self.sequences:
            return 0.0
        shared = sum(1 for c in self.sequences.values() if c[0] > 0 and c[1] > 0)
        return shared / len(self.sequences)

    def shared_count(self) -> int:
        return sum(1 for c in self.sequences.values() if c[0] > 0 and c[1] > 0)


def unigram(tokens: np.ndarray, C: int) -> np.ndarray:
    counts = np.bincount(np.asarray(tokens, dtype=np.int64).ravel(), minlength=C).astype(float) + 1.0
    return counts / counts.sum()


def token_distribution(tokens: np.ndarray, labels: np.ndarray | None, C: int) -> TokenStats:
    """Unigram over all emitted ids and the per-label sequence table."""
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    if tokens.shape[0] == 0:
        raise ValueError("need at least one window")
    table: dict = {}
    labs = np.zeros(len(tokens), dtype=int) if labels is None else np.asarray(labels, dtype=int)
    for seq, lab in zip(tokens, labs):
        key = tuple(int(t) for t in seq)
        table.setdefault(key, [0, 0])[lab] += 1
    return TokenStats(unigram(tokens, C), table)


def model_token_distribution(model: VqModel, Xn: np.ndarray, labels=None) -> TokenStats:
    return token_distribution(encode(model, Xn).tokens, labels, model.cfg.codebook_size)


def token_onehot(tokens: np.ndarray, C: int) -> np.ndarray:
    tokens = np.atleast_2d(tokens)
    B, N = tokens.shape
    out = np.zeros((B, N * C))
    out[np.repeat(np.arange(B), N), (np.arange(N) * C)[None, :].repeat(B, 0).ravel() + tokens.ravel()] = 1.0
    return out


def probe_accuracy(Xtr: np.ndarray, ytr: np.ndarray, Xte: np.ndarray, yte: np.ndarray, seed: int,
                   epochs: int = 40, hidden: int = 0, lr: float = 3e-3, batch: int = 64) -> float:
    """Train a softmax classifier (optionally one hidden layer) on train rows;
    return test accuracy."""
    rng = np.random.default_rng(seed)
    net = DenseNet([Xtr.shape[1]] + ([hidden] if hidden else []) + [2], rng)
    opt, params = OptimState(lr=lr), net.params()
    for _ in range(epochs):
        perm = rng.permutation(len(Xtr))
        for i in range(0, len(perm), batch):
            idx = perm[i:i + batch]
            y, tape = forward(net, Xtr[idx])
            _, dy = cross_entropy(y, ytr[idx])
            adam_step(opt, params, backward(net, tape, dy)[0])
            net.touch()
    return float(np.mean(forward(net, Xte)[0].argmax(axis=1) == yte))


def compare_representations(windows: WindowSet, cfg: VqConfig, epochs: int, seed: int,
                            probe_epochs: int = 40, hidden: int = 0) -> dict:
    """Held-out option accuracy of one probe class fed option-aware tokens,
    vanilla tokens (lambda_opt = lambda_token = 0) or normalized raw windows.

    Both quantizers share the segment split, so the probe sees identical rows.
    """
    split = split_by_segment(windows, 0.2, seed)
    out = {}
    raw = None
    for name, lo, lt in (("option_aware", cfg.lambda_opt, cfg.lambda_token), ("vanilla", 0.0, 0.0)):
        res = train_opvqvae(windows, replace(cfg, lambda_opt=lo, lambda_token=lt), epochs, seed, split=split)
        m, tr, te = res.model, res.train_idx, res.test_idx
        Xn = m.normalize(windows.X)
        oh = token_onehot(encode(m, Xn).tokens, cfg.codebook_size)
        out[name] = probe_accuracy(oh[tr], windows.labels[tr], oh[te], windows.labels[te], seed,
                                   probe_epochs, hidden)
        if raw is None:
            raw = (Xn[tr], Xn[te])
            out["head"] = float(np.mean(option_predict(m, Xn[te]).argmax(axis=1) == windows.labels[te]))
            out["test_c_frac"] = float(windows.labels[te].mean())
    out["raw"] = probe_accuracy(raw[0], windows.labels[tr], raw[1], windows.labels[te], seed,
                                probe_epochs, hidden)
    return out


def dump_tokens_csv(path, windows: WindowSet, tokens: np.ndarray) -> Path:
    import csv
    path = Path(path)
    N = tokens.shape[1]
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["clip_id", "offset", "label"] + [f"t{i + 1}" for i in range(N)])
        for cid, off, lab, toks in zip(windows.clip_ids, windows.offsets, windows.labels, tokens):
            w.writerow([cid, int(off), "DC"[int(lab)]] + [int(t) for t in toks])
    return path


# -- persistence --------------------------------------------------------------

def save_model(model: VqModel, path) -> Path:
    cfg = asdict(model.cfg)
    return save_checkpoint(path, model.nets(), {"codebook": model.codebook.entries},
                           {"kind": "opvqvae", "config": cfg})


def load_model(path) -> VqModel:
    nets, arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "opvqvae":
        raise ValueError(f"{path}: not a VQ model checkpoint")
    m = VqModel.__new__(VqModel)
    m.cfg = VqConfig(**meta["config"])
    m.enc, m.dec, m.opt_head, m.tok_head = nets["enc"], nets["dec"], nets["opt"], nets["tok"]
    m.codebook = Codebook(arrays["codebook"])
    return m
