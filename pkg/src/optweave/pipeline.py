"""Run configuration, artifact manifest and the pipeline stages.

Every stage reads its inputs from and writes its outputs to one run
directory. The manifest records a sha256 for every input and output of each
stage; a stage is skipped when its recorded outputs still verify, its inputs
are unchanged and no upstream stage ran in the same invocation.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import MANIFEST_FORMAT, __version__
from .env import DEFAULT_PARAMS, EnvParams, generate_clip, load_clip, rollout_fixed, save_clip, Terminal
from .fusion import OPTION_HEAD, SWITCH_POLICY, calibrate, fused_chooser, load_calibration, save_calibration
from .opvqvae import (VqConfig, dump_tokens_csv, encode, load_model, make_windows, option_predict, save_model,
                      train_opvqvae)
from .oracle import OracleConfig, build_guidance_dataset, load_dataset, save_dataset
from .scenarios import Scenario, complementary, out_of_range, sample_specs
from .switchrl import (PpoConfig, fixed_chooser, load_policy, policy_chooser, run_episode, save_policy,
                       schedule_chooser, train_switch, uniform_chooser, write_curve)

log = logging.getLogger("optweave")

STAGES = ("gen-data", "label", "train-vqvae", "train-switch", "calibrate-fusion", "bench")
EVAL_MODES = ("switch-only", "fused", "fixed-D", "fixed-C", "oracle")


class StageError(RuntimeError):
    def __init__(self, stage: str, msg: str):
        super().__init__(f"stage {stage} failed: {msg}")
        self.stage = stage


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "run"
    profile: str = "default"
    scenario: Scenario = field(default_factory=complementary)
    heldout_pairs: int = 40
    ood: Scenario = field(default_factory=lambda: out_of_range(0.95, n_clips=10))
    ood_pairs: int = 10
    oracle: OracleConfig = field(default_factory=OracleConfig)
    vq: VqConfig = field(default_factory=VqConfig)
    vq_epochs: int = 30
    ppo: PpoConfig = field(default_factory=lambda: PpoConfig(rollout_steps=512))
    switch_iters: int = 60
    ablation: str = "full"
    fusion_delta: float = 0.5
    n_recent: int = 10
    bench_seeds: int = 1
    env: EnvParams = field(default_factory=EnvParams)

    def to_dict(self) -> dict:
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, Scenario):
                d[f.name] = v.to_dict()
            elif hasattr(v, "__dataclass_fields__"):
                d[f.name] = asdict(v)
            else:
                d[f.name] = v
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kw = dict(d)
        for key in ("scenario", "ood"):
            if key in kw:
                kw[key] = Scenario.from_dict(kw[key])
        for key, typ in (("oracle", OracleConfig), ("vq", VqConfig), ("ppo", PpoConfig), ("env", EnvParams)):
            if key in kw:
                kw[key] = typ(**kw[key])
        return cls(**kw)

    def save(self, path, with_out: bool = True) -> Path:
        path = Path(path)
        d = self.to_dict()
        if not with_out:
            d.pop("out")
        path.write_text(json.dumps(d, indent=1, sort_keys=True), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def digest(self) -> str:
        d = self.to_dict()
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def smoke_profile(cfg: RunConfig | None = None) -> RunConfig:
    """10 clips, 20 switching iterations, short trainings."""
    cfg = cfg or RunConfig()
    return replace(cfg, profile="smoke",
                   scenario=replace(cfg.scenario, n_clips=10, n_pairs=10),
                   heldout_pairs=6, ood=replace(cfg.ood, n_clips=4), ood_pairs=3,
                   vq_epochs=4, switch_iters=20, ppo=replace(cfg.ppo, rollout_steps=128, eval_every=5))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Manifest:
    def __init__(self, root: Path, data: dict | None = None):
        self.root = Path(root)
        self.data = data or {"format_version": MANIFEST_FORMAT, "stages": {}}

    @property
    def path(self) -> Path:
        return self.root / "manifest.json"

    @classmethod
    def load(cls, root) -> "Manifest":
        p = Path(root) / "manifest.json"
        if not p.exists():
            return cls(root)
        d = json.loads(p.read_text(encoding="utf-8"))
        if d.get("format_version") != MANIFEST_FORMAT:
            raise ValueError(f"{p}: unsupported manifest format {d.get('format_version')}")
        return cls(root, d)

    def save(self) -> Path:
        self.path.write_text(json.dumps(self.data, indent=1, sort_keys=True), encoding="utf-8")
        return self.path

    def hashes(self, rels) -> dict:
        return {r: sha256_file(self.root / r) for r in sorted(rels)}

    def record(self, stage: str, inputs, outputs, config_digest: str) -> None:
        self.data["stages"][stage] = {
            "inputs": self.hashes(inputs),
            "outputs": self.hashes(outputs),
            "config": config_digest,
            "created": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
            "command": " ".join(sys.argv),
            "version": __version__,
        }

    def verify(self, stage: str, inputs, config_digest: str) -> bool:
        rec = self.data["stages"].get(stage)
        if rec is None or rec.get("config") != config_digest:
            return False
        for rel, h in rec["outputs"].items():
            p = self.root / rel
            if not p.exists() or sha256_file(p) != h:
                return False
        try:
            return rec["inputs"] == self.hashes(inputs)
        except FileNotFoundError:
            return False


# -- stages -------------------------------------------------------------------

def _rel_files(root: Path, sub: str) -> list[str]:
    d = root / sub
    return sorted(str(p.relative_to(root)) for p in d.rglob("*") if p.is_file()) if d.exists() else []


def stage_gen_data(cfg: RunConfig, root: Path) -> list[str]:
    pools = {"clips": (cfg.scenario, cfg.seed), "clips_heldout": (cfg.scenario, cfg.seed + 1),
             "clips_ood": (cfg.ood, cfg.seed + 2)}
    outs = []
    for sub, (scn, seed) in pools.items():
        d = root / sub
        d.mkdir(parents=True, exist_ok=True)
        for old in d.glob("*.jsonl"):
            old.unlink()
        for i, spec in enumerate(sample_specs(scn, seed)):
            clip = generate_clip(spec, cfg.env, f"{sub}-{i:04d}")
            save_clip(clip, d / f"clip_{i:04d}.jsonl")
        outs += _rel_files(root, sub)
    return outs


def load_clip_dir(d) -> list:
    files = sorted(Path(d).glob("*.jsonl"))
    if not files:
        raise ValueError(f"no clip files in {d}")
    return [load_clip(f) for f in files]


LABEL_SETS = {"d_op": ("clips", "n_pairs", 0), "d_heldout": ("clips_heldout", "heldout_pairs", 1),
              "d_ood": ("clips_ood", "ood_pairs", 2)}


def stage_label(cfg: RunConfig, root: Path) -> list[str]:
    outs = []
    for name, (sub, npairs_attr, off) in LABEL_SETS.items():
        clips = load_clip_dir(root / sub)
        n = cfg.scenario.n_pairs if npairs_attr == "n_pairs" else getattr(cfg, npairs_attr)
        ds = build_guidance_dataset(clips, n, cfg.scenario.t_blend, cfg.oracle, cfg.seed + off, cfg.env)
        save_dataset(ds, root / f"{name}.jsonl")
        outs += [f"{name}.jsonl"] + _rel_files(root, f"{name}_clips")
    return outs


def stage_train_vqvae(cfg: RunConfig, root: Path) -> list[str]:
    ds = load_dataset(root / "d_op.jsonl")
    ws = make_windows(ds, cfg.vq)
    res = train_opvqvae(ws, cfg.vq, cfg.vq_epochs, cfg.seed)
    save_model(res.model, root / "vq.ckpt")
    _write_rows(root / "vq_curve.csv", res.curve)
    m = res.model
    toks = encode(m, m.normalize(ws.X)).tokens
    dump_tokens_csv(root / "tokens.csv", ws, toks)
    te = res.test_idx
    acc = float(np.mean(option_predict(m, m.normalize(ws.X[te])).argmax(axis=1) == ws.labels[te])) if len(te) else None
    (root / "vq_metrics.json").write_text(json.dumps({"heldout_option_acc": acc, "best_epoch": res.best_epoch},
                                                     sort_keys=True), encoding="utf-8")
    return ["vq.ckpt", "vq_curve.csv", "tokens.csv", "vq_metrics.json"]


def stage_train_switch(cfg: RunConfig, root: Path) -> list[str]:
    ds = load_dataset(root / "d_op.jsonl")
    res = train_switch(ds, cfg.ppo, cfg.switch_iters, cfg.seed, cfg.ablation, cfg.env)
    save_policy(res.policy, root / "sw.ckpt", {"ablation": cfg.ablation, "best_iter": res.best_iter})
    write_curve(res.curve, root / "sw_curve.csv")
    return ["sw.ckpt", "sw_curve.csv"]


def stage_calibrate(cfg: RunConfig, root: Path) -> list[str]:
    policy = load_policy(root / "sw.ckpt")
    vq = load_model(root / "vq.ckpt")
    ds = load_dataset(root / "d_op.jsonl")
    calib = calibrate(policy, vq, ds, cfg.ppo, cfg.fusion_delta, cfg.n_recent, cfg.env)
    save_calibration(calib, root / "fusion.json")
    return ["fusion.json"]


def _id_seed(clip_id: str) -> int:
    return int(hashlib.sha256(clip_id.encode()).hexdigest()[:8], 16)


def method_factories(root: Path, cfg: RunConfig) -> dict:
    """Chooser factories keyed by method name; learned methods need their artifacts."""
    def load_or_none(fn, rel):
        p = root / rel
        return fn(p) if p.exists() else None

    policy = load_or_none(load_policy, "sw.ckpt")
    vq = load_or_none(load_model, "vq.ckpt")
    calib = load_or_none(load_calibration, "fusion.json")
    out = {
        "fixed-D": lambda s, seed: fixed_chooser(0),
        "fixed-C": lambda s, seed: fixed_chooser(1),
        "oracle": lambda s, seed: schedule_chooser(s.step_labels),
        "random": lambda s, seed: uniform_chooser(np.random.default_rng([seed, _id_seed(s.clip.clip_id)])),
        "switch-only": (lambda s, seed: policy_chooser(policy, greedy=True)) if policy else None,
        "fused": ((lambda s, seed: fused_chooser(policy, vq, calib, s.clip))
                  if policy and vq and calib else None),
    }
    return out


def stage_bench(cfg: RunConfig, root: Path, methods=None, seeds=None) -> list[str]:
    from .analysis import benchmark
    factories = method_factories(root, cfg)
    names = list(factories) if methods in (None, "all", ["all"]) else list(methods)
    missing = [n for n in names if factories.get(n) is None]
    if missing:
        raise ValueError(f"missing artifacts for methods: {missing}")
    sets = {k: load_dataset(root / f"{k}.jsonl").sequences for k in LABEL_SETS}
    seeds = list(range(cfg.bench_seeds if seeds is None else seeds))
    rep = benchmark({n: factories[n] for n in names}, sets, cfg.ppo, seeds, cfg.env)
    rep.write(root / "report")
    return ["report/bench.csv", "report/bench_summary.json"]


STAGE_FUNCS: dict[str, Callable] = {
    "gen-data": stage_gen_data, "label": stage_label, "train-vqvae": stage_train_vqvae,
    "train-switch": stage_train_switch, "calibrate-fusion": stage_calibrate, "bench": stage_bench,
}

STAGE_INPUTS = {
    "gen-data": lambda root: [],
    "label": lambda root: _rel_files(root, "clips") + _rel_files(root, "clips_heldout") + _rel_files(root, "clips_ood"),
    "train-vqvae": lambda root: ["d_op.jsonl"],
    "train-switch": lambda root: ["d_op.jsonl"],
    "calibrate-fusion": lambda root: ["d_op.jsonl", "vq.ckpt", "sw.ckpt"],
    "bench": lambda root: ["d_op.jsonl", "d_heldout.jsonl", "d_ood.jsonl", "vq.ckpt", "sw.ckpt", "fusion.json"],
}

# a stage re-runs when any stage it depends on ran in this invocation
STAGE_DEPS = {
    "gen-data": (), "label": ("gen-data",), "train-vqvae": ("label",), "train-switch": ("label",),
    "calibrate-fusion": ("train-vqvae", "train-switch"), "bench": ("label", "calibrate-fusion"),
}


def run_stage(name: str, cfg: RunConfig, root: Path, manifest: Manifest) -> list[str]:
    try:
        outs = STAGE_FUNCS[name](cfg, root)
    except Exception as exc:  # noqa: BLE001 - reported with the stage name
        raise StageError(name, f"{type(exc).__name__}: {exc}") from exc
    manifest.record(name, STAGE_INPUTS[name](root), outs, cfg.digest())
    manifest.save()
    return outs


def run_pipeline(cfg: RunConfig, root=None, force: bool = False) -> dict:
    """Run all stages in order, skipping those whose artifacts verify."""
    root = Path(root or cfg.out)
    root.mkdir(parents=True, exist_ok=True)
    # location-free so identical runs in different directories match byte for byte
    cfg.save(root / "config.json", with_out=False)
    manifest = Manifest.load(root)
    ran: list[str] = []
    status = {}
    for name in STAGES:
        dirty = any(d in ran for d in STAGE_DEPS[name])
        if not force and not dirty and manifest.verify(name, STAGE_INPUTS[name](root), cfg.digest()):
            log.info("skip %s (artifacts verify)", name)
            status[name] = "skipped"
            continue
        log.info("run %s", name)
        run_stage(name, cfg, root, manifest)
        ran.append(name)
        status[name] = "ran"
    return status


# -- evaluation ---------------------------------------------------------------

def _write_rows(path: Path, rows) -> Path:
    rows = list(rows)
    with path.open("w", newline="", encoding="utf-8") as fh:
        if not rows:
            return path
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return path


def eval_mode(cfg: RunConfig, root: Path, mode: str, data_rel: str = "d_heldout.jsonl", out_dir=None) -> dict:
    """Per-sequence rows plus one switching trace per sequence."""
    if mode not in EVAL_MODES:
        raise ValueError(f"unknown mode {mode!r}; choose from {EVAL_MODES}")
    factories = method_factories(root, cfg)
    key = {"switch-only": "switch-only", "fused": "fused", "fixed-D": "fixed-D", "fixed-C": "fixed-C",
           "oracle": "oracle"}[mode]
    factory = factories[key]
    if factory is None:
        raise ValueError(f"missing artifact for mode {mode!r}")
    ds = load_dataset(root / data_rel)
    out_dir = Path(out_dir or root / "eval" / mode)
    (out_dir / "traces").mkdir(parents=True, exist_ok=True)
    rows = []
    for seq in ds.sequences:
        ep = run_episode(seq.clip, factory(seq, 0), cfg.ppo, cfg.env)
        trace = []
        for j, (c, info) in enumerate(zip(ep.options, ep.infos)):
            src = info.get("source", {"fixed-D": "fixed", "fixed-C": "fixed", "oracle": "oracle",
                                      "switch-only": SWITCH_POLICY}.get(mode, mode))
            trace.append({"t": j * cfg.ppo.k_sw, "option": "DC"[int(c)],
                          "omega": info.get("omega", ""), "source": src})
        _write_rows(out_dir / "traces" / f"{seq.clip.clip_id}.csv", trace)
        rows.append({"clip_id": seq.clip.clip_id, "return": ep.task_return, "success": int(ep.success),
                     "switches": ep.switches, "decisions": ep.n,
                     "option_head_frac": float(np.mean([i.get("source") == OPTION_HEAD for i in ep.infos]))})
    _write_rows(out_dir / "rows.csv", rows)
    summary = {"mode": mode, "n": len(rows), "mean_return": float(np.mean([r["return"] for r in rows])),
               "success": float(np.mean([r["success"] for r in rows])),
               "option_head_frac": float(np.mean([r["option_head_frac"] for r in rows]))}
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True), encoding="utf-8")
    return summary


def complementarity_check(clips, params: EnvParams = DEFAULT_PARAMS, calm_max: float = 0.3,
                          dyn_min: float = 0.8) -> dict:
    """Per-bucket success rates of the two fixed controllers."""
    buckets = {"calm": [], "dynamic": []}
    for clip in clips:
        spec = clip.spec
        if spec is None:
            continue
        if spec.dyn_level <= calm_max:
            buckets["calm"].append(clip)
        elif spec.dyn_level >= dyn_min and spec.perturb_prob == 0:
            buckets["dynamic"].append(clip)
    out = {}
    for name, cs in buckets.items():
        if not cs:
            continue
        sd = float(np.mean([rollout_fixed(c, 0, params).status is Terminal.SUCCESS for c in cs]))
        sc = float(np.mean([rollout_fixed(c, 1, params).status is Terminal.SUCCESS for c in cs]))
        out[name] = {"n": len(cs), "stable_success": sd, "agile_success": sc}
    ok = True
    if "calm" in out:
        ok &= out["calm"]["stable_success"] >= out["calm"]["agile_success"]
    if "dynamic" in out:
        ok &= out["dynamic"]["agile_success"] >= out["dynamic"]["stable_success"]
    out["pass"] = bool(ok)
    return out
