"""Small numpy substrate: dense tanh networks, Adam, categorical helpers,
straight-through vector quantization and JSON checkpoints.

Everything works on float64 and supports both single vectors and batches
(leading axis).
"""
from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import CHECKPOINT_FORMAT


class DenseNet:
    """Fully connected network, tanh on hidden layers, identity output."""

    def __init__(self, sizes, rng: np.random.Generator | None = None, out_scale: float = 1.0):
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2 or any(s <= 0 for s in sizes):
            raise ValueError(f"layer sizes must be >= 2 positive integers, got {sizes}")
        self.sizes = sizes
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            scale = 1.0 / math.sqrt(n_in)
            if i == len(sizes) - 2:
                scale *= out_scale
            self.weights.append(rng.normal(0.0, scale, size=(n_out, n_in)))
            self.biases.append(np.zeros(n_out))
        self.version = 0

    @property
    def n_in(self) -> int:
        return self.sizes[0]

    @property
    def n_out(self) -> int:
        return self.sizes[-1]

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"W{i}"] = w
            out[f"b{i}"] = b
        return out

    def touch(self) -> None:
        """Mark parameters as modified; invalidates outstanding tapes."""
        self.version += 1

    def copy(self) -> "DenseNet":
        net = DenseNet.__new__(DenseNet)
        net.sizes = list(self.sizes)
        net.weights = [w.copy() for w in self.weights]
        net.biases = [b.copy() for b in self.biases]
        net.version = 0
        return net

    def __call__(self, x):
        return forward(self, x)[0]


@dataclass
class Tape:
    net_id: int
    version: int
    activations: list  # input of each layer, then the output
    squeeze: bool


def forward(net: DenseNet, x) -> tuple[np.ndarray, Tape]:
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    h = x[None, :] if squeeze else x
    if h.ndim != 2 or h.shape[1] != net.n_in:
        raise ValueError(f"input has shape {x.shape}, network expects {net.n_in} features")
    acts = [h]
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w.T + b
        if i < last:
            h = np.tanh(h)
        acts.append(h)
    y = h[0] if squeeze else h
    return y, Tape(id(net), net.version, acts, squeeze)


def backward(net: DenseNet, tape: Tape, dy) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Gradients of ``sum(y * dy)`` w.r.t. parameters and the input."""
    if tape.net_id != id(net) or tape.version != net.version:
        raise ValueError("stale tape: network changed since the forward pass")
    g = np.asarray(dy, dtype=np.float64)
    if tape.squeeze:
        g = g[None, :]
    grads: dict[str, np.ndarray] = {}
    acts = tape.activations
    last = len(net.weights) - 1
    for i in range(last, -1, -1):
        if i < last:
            g = g * (1.0 - acts[i + 1] ** 2)
        grads[f"W{i}"] = g.T @ acts[i]
        grads[f"b{i}"] = g.sum(axis=0)
        g = g @ net.weights[i]
    dx = g[0] if tape.squeeze else g
    return grads, dx


# -- parameter bookkeeping ---------------------------------------------------

def named_params(nets: Mapping[str, DenseNet], extra: Mapping[str, np.ndarray] | None = None
                 ) -> dict[str, np.ndarray]:
    out = {}
    for name, net in nets.items():
        for k, v in net.params().items():
            out[f"{name}/{k}"] = v
    for k, v in (extra or {}).items():
        out[k] = v
    return out


def prefix(grads: Mapping[str, np.ndarray], name: str) -> dict[str, np.ndarray]:
    return {f"{name}/{k}": v for k, v in grads.items()}


@dataclass
class OptimState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(opt: OptimState, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]
              ) -> Mapping[str, np.ndarray]:
    """Bias-corrected Adam update applied in place to ``params``."""
    for path, g in grads.items():
        if path not in params:
            raise KeyError(f"gradient for unknown parameter {path}")
        if params[path].shape != np.shape(g):
            raise ValueError(f"shape mismatch at {path}: {params[path].shape} vs {np.shape(g)}")
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient at {path}")
    opt.step += 1
    t = opt.step
    c1 = 1.0 - opt.beta1 ** t
    c2 = 1.0 - opt.beta2 ** t
    for path, g in grads.items():
        m = opt.m.get(path)
        if m is None:
            m = opt.m[path] = np.zeros_like(g)
            opt.v[path] = np.zeros_like(g)
        v = opt.v[path]
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        params[path] -= opt.lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
    return params


# -- categorical ------------------------------------------------------------

def log_softmax(logits, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax(logits, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def entropy(probs, axis: int = -1) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return -terms.sum(axis=axis)


@dataclass
class Categorical:
    probs: np.ndarray
    sample: int
    log_prob: float
    entropy: float


def categorical(logits, rng: np.random.Generator | None = None) -> Categorical:
    """Softmax distribution with a (seeded) sample and its log-probability."""
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ValueError("non-finite logits")
    logp = log_softmax(logits)
    p = np.exp(logp)
    rng = rng if rng is not None else np.random.default_rng(0)
    u = rng.random()
    k = int(np.searchsorted(np.cumsum(p), u, side="right"))
    k = min(k, p.size - 1)
    return Categorical(p, k, float(logp[k]), float(entropy(p)))


def cross_entropy(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean CE for integer targets or target distributions; returns (loss, dlogits)."""
    logp = log_softmax(logits)
    B = logits.shape[0]
    if targets.ndim == 1:
        q = np.zeros_like(logp)
        q[np.arange(B), targets.astype(int)] = 1.0
    else:
        q = targets
    loss = float(-(q * logp).sum() / B)
    dlogits = (np.exp(logp) * q.sum(axis=1, keepdims=True) - q) / B
    return loss, dlogits


# -- vector quantization ----------------------------------------------------

@dataclass
class Codebook:
    entries: np.ndarray  # (C, D)

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=np.float64)
        if self.entries.ndim != 2 or self.entries.shape[0] < 2:
            raise ValueError("codebook needs at least two entries")

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]


def nearest_codes(z: np.ndarray, entries: np.ndarray) -> np.ndarray:
    """Index of the closest entry for each row of ``z``; ties go to the lowest index."""
    z = np.atleast_2d(z)
    d = ((z[:, None, :] - entries[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d, axis=1)


@dataclass
class Quantized:
    k: int
    e_k: np.ndarray
    commit_loss: float
    codebook_loss: float
    output: np.ndarray

    def backward(self, d_output: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Straight-through: (grad w.r.t. z_e, grad w.r.t. e_k) for the output path."""
        return np.array(d_output, dtype=np.float64), np.zeros_like(self.e_k)


def quantize_st(z_e, cb: Codebook) -> Quantized:
    z_e = np.asarray(z_e, dtype=np.float64)
    if z_e.shape != (cb.dim,):
        raise ValueError(f"latent has shape {z_e.shape}, codebook dim is {cb.dim}")
    k = int(nearest_codes(z_e, cb.entries)[0])
    e_k = cb.entries[k].copy()
    diff = z_e - e_k
    loss = float(diff @ diff)
    # forward value of z_e + sg(e_k - z_e) is e_k
    return Quantized(k, e_k, loss, loss, e_k.copy())


# -- gradient checking --------------------------------------------------------

def flatten(params: Mapping[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([np.ravel(params[k]) for k in sorted(params)])


def gradient_check(loss_fn: Callable[[], float], params: Mapping[str, np.ndarray],
                   grads: Mapping[str, np.ndarray], n_dirs: int = 32, h: float = 1e-5,
                   rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic and central-difference directional
    derivatives along ``n_dirs`` random unit directions. ``params`` are perturbed
    in place and restored bit-exactly."""
    rng = rng if rng is not None else np.random.default_rng(0)
    keys = sorted(params)
    saved = {k: params[k].copy() for k in keys}
    worst = 0.0
    for _ in range(n_dirs):
        dirs = {k: rng.normal(size=params[k].shape) for k in keys}
        norm = math.sqrt(sum(float((d * d).sum()) for d in dirs.values()))
        analytic = sum(float((grads.get(k, 0.0) * dirs[k]).sum()) for k in keys) / norm
        for k in keys:
            params[k][...] = saved[k] + h * dirs[k] / norm
        f_plus = loss_fn()
        for k in keys:
            params[k][...] = saved[k] - h * dirs[k] / norm
        f_minus = loss_fn()
        for k in keys:
            params[k][...] = saved[k]
        fd = (f_plus - f_minus) / (2 * h)
        denom = max(abs(fd), abs(analytic), 1e-8)
        worst = max(worst, abs(fd - analytic) / denom)
    return worst


# -- checkpoints ------------------------------------------------------------

def _encode(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(d["shape"]).astype(np.float64)


def checkpoint_dict(nets: Mapping[str, DenseNet], arrays: Mapping[str, np.ndarray] | None = None,
                    meta: dict | None = None) -> dict:
    return {
        "format_version": CHECKPOINT_FORMAT,
        "nets": {name: {"sizes": net.sizes, "params": {k: _encode(v) for k, v in net.params().items()}}
                 for name, net in nets.items()},
        "arrays": {k: _encode(v) for k, v in (arrays or {}).items()},
        "meta": meta or {},
    }


def save_checkpoint(path, nets, arrays=None, meta=None) -> Path:
    path = Path(path)
    path.write_text(json.dumps(checkpoint_dict(nets, arrays, meta), sort_keys=True), encoding="utf-8")
    return path


def load_checkpoint(path) -> tuple[dict[str, DenseNet], dict[str, np.ndarray], dict]:
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    if d.get("format_version") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unsupported checkpoint format {d.get('format_version')}")
    nets = {}
    for name, spec in d["nets"].items():
        net = DenseNet(spec["sizes"])
        for i in range(len(net.weights)):
            net.weights[i] = _decode(spec["params"][f"W{i}"])
            net.biases[i] = _decode(spec["params"][f"b{i}"])
        nets[name] = net
    arrays = {k: _decode(v) for k, v in d["arrays"].items()}
    return nets, arrays, d["meta"]
