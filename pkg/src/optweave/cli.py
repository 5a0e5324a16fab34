"""Command-line entry point: ``optweave <command> [options]``.

Exit codes: 0 success, 2 invalid input or configuration, 3 stage failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import (CALIBRATION_FORMAT, CHECKPOINT_FORMAT, CLIP_FORMAT, DATASET_FORMAT, MANIFEST_FORMAT,
               __version__)
from .kernels import BACKEND

EXIT_OK, EXIT_INVALID, EXIT_STAGE = 0, 2, 3

log = logging.getLogger("optweave")


class CliError(Exception):
    """Bad arguments or configuration (exit code 2)."""


def _version() -> str:
    return (f"optweave {__version__} (kernel backend: {BACKEND}); formats: clip={CLIP_FORMAT} "
            f"dataset={DATASET_FORMAT} checkpoint={CHECKPOINT_FORMAT} calibration={CALIBRATION_FORMAT} "
            f"manifest={MANIFEST_FORMAT}")


def _load_config(args):
    from .pipeline import RunConfig, smoke_profile
    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
    except (OSError, ValueError, TypeError, KeyError) as exc:
        raise CliError(f"cannot read config {args.config}: {exc}") from exc
    if getattr(args, "smoke", False):
        cfg = smoke_profile(cfg)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _run_dir(args, cfg, default_sub: str | None = None) -> Path:
    root = Path(getattr(args, "run", None) or cfg.out)
    root.mkdir(parents=True, exist_ok=True)
    return root


def _stage(name, cfg, root):
    from .pipeline import Manifest, run_stage
    manifest = Manifest.load(root)
    cfg.save(root / "config.json", with_out=False)
    return run_stage(name, cfg, root, manifest)


# -- commands -----------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    if args.out:
        cfg = replace(cfg, out=args.out)
    if args.clips is not None:
        cfg = replace(cfg, scenario=replace(cfg.scenario, n_clips=args.clips))
    root = _run_dir(args, cfg)
    outs = _stage("gen-data", cfg, root)
    print(f"wrote {len(outs)} clip files under {root}")
    return EXIT_OK


def cmd_label(args) -> int:
    from .oracle import build_guidance_dataset, save_dataset
    from .pipeline import load_clip_dir
    cfg = _load_config(args)
    oc = replace(cfg.oracle, **{k: v for k, v in (("horizon", args.horizon), ("alpha_thr", args.alpha_thr),
                                                  ("tau", args.tau), ("mc", args.mc),
                                                  ("stride", args.stride)) if v is not None})
    cfg = replace(cfg, oracle=oc)
    if args.clips is None:
        root = _run_dir(args, cfg)
        _stage("label", cfg, root)
        print(f"labelled datasets written under {root}")
        return EXIT_OK
    clips = load_clip_dir(args.clips)
    n = args.pairs if args.pairs is not None else cfg.scenario.n_pairs
    ds = build_guidance_dataset(clips, n, cfg.scenario.t_blend, oc, cfg.seed, cfg.env)
    out = Path(args.out or "d_op.jsonl")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out)
    print(f"wrote {len(ds)} sequences to {out}")
    return EXIT_OK


def cmd_train_vqvae(args) -> int:
    from .opvqvae import make_windows, save_model, train_opvqvae
    from .oracle import load_dataset
    cfg = _load_config(args)
    vq = replace(cfg.vq, **{k: v for k, v in (("lambda_opt", args.lambda_opt),
                                              ("lambda_token", args.lambda_token)) if v is not None})
    cfg = replace(cfg, vq=vq, vq_epochs=args.epochs if args.epochs is not None else cfg.vq_epochs)
    if args.data is None:
        _stage("train-vqvae", cfg, _run_dir(args, cfg))
        return EXIT_OK
    ds = load_dataset(args.data)
    res = train_opvqvae(make_windows(ds, vq), vq, cfg.vq_epochs, cfg.seed)
    save_model(res.model, args.out or "vq.ckpt")
    print(f"best epoch {res.best_epoch}; model written to {args.out or 'vq.ckpt'}")
    return EXIT_OK


def cmd_train_switch(args) -> int:
    from .oracle import load_dataset
    from .switchrl import save_policy, train_switch, write_curve
    cfg = _load_config(args)
    ppo = replace(cfg.ppo, **{k: v for k, v in (("lambda_start", args.lambda_start),
                                                ("lambda_end", args.lambda_end), ("k_bc", args.kbc))
                              if v is not None})
    cfg = replace(cfg, ppo=ppo, switch_iters=args.iters if args.iters is not None else cfg.switch_iters,
                  ablation=args.ablation or cfg.ablation)
    if args.data is None:
        _stage("train-switch", cfg, _run_dir(args, cfg))
        return EXIT_OK
    res = train_switch(load_dataset(args.data), ppo, cfg.switch_iters, cfg.seed, cfg.ablation, cfg.env)
    out = Path(args.out or "sw.ckpt")
    save_policy(res.policy, out, {"ablation": cfg.ablation, "best_iter": res.best_iter})
    write_curve(res.curve, out.with_suffix(".curve.csv"))
    print(f"best iteration {res.best_iter} (validation return {res.best_val:.3f}); policy written to {out}")
    return EXIT_OK


def cmd_calibrate_fusion(args) -> int:
    from .fusion import calibrate, save_calibration
    from .opvqvae import load_model
    from .oracle import load_dataset
    from .switchrl import load_policy
    cfg = _load_config(args)
    if args.delta is not None:
        cfg = replace(cfg, fusion_delta=args.delta)
    if args.policy is None and args.vq is None and args.data is None:
        _stage("calibrate-fusion", cfg, _run_dir(args, cfg))
        return EXIT_OK
    if not (args.policy and args.vq and args.data):
        raise CliError("--policy, --vq and --data must be given together")
    calib = calibrate(load_policy(args.policy), load_model(args.vq), load_dataset(args.data), cfg.ppo,
                      cfg.fusion_delta, cfg.n_recent, cfg.env)
    out = save_calibration(calib, args.out or "fusion.json")
    print(f"calibration written to {out}; median omega on training replays "
          f"{calib.report['omega_median']:.3f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .pipeline import eval_mode
    cfg = _load_config(args)
    root = _run_dir(args, cfg)
    summary = eval_mode(cfg, root, args.mode, args.data or "d_heldout.jsonl", args.out)
    print(json.dumps(summary, indent=1, sort_keys=True))
    return EXIT_OK


def cmd_bench(args) -> int:
    from .pipeline import stage_bench
    cfg = _load_config(args)
    root = _run_dir(args, cfg)
    methods = None if args.methods == "all" else args.methods.split(",")
    stage_bench(cfg, root, methods, args.seeds)
    if args.out:
        import shutil
        dest = Path(args.out)
        dest.mkdir(parents=True, exist_ok=True)
        for f in (root / "report").iterdir():
            shutil.copy2(f, dest / f.name)
    print(f"report written to {Path(args.out) if args.out else root / 'report'}")
    return EXIT_OK


def cmd_theory(args) -> int:
    from .analysis import theory_suite
    res = theory_suite(seed=args.seed or 0)
    text = json.dumps(res, indent=1, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    print(text)
    return EXIT_OK if res["pass"] else EXIT_STAGE


def cmd_pipeline(args) -> int:
    from .pipeline import run_pipeline
    cfg = _load_config(args)
    if args.out:
        cfg = replace(cfg, out=args.out)
    status = run_pipeline(cfg, cfg.out, force=args.force)
    for name, st in status.items():
        print(f"{name:18s} {st}")
    return EXIT_OK


def cmd_check(args) -> int:
    from .pipeline import complementarity_check, load_clip_dir
    cfg = _load_config(args)
    res = complementarity_check(load_clip_dir(args.clips), cfg.env)
    print(json.dumps(res, indent=1, sort_keys=True))
    return EXIT_OK if res["pass"] else EXIT_STAGE


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="optweave", description="Controller-switching pipeline on a planar surrogate.")
    p.add_argument("--version", action="version", version=_version())
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help="output path or directory"):
        sp.add_argument("--config", help="run configuration JSON")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help=out_help)
        sp.add_argument("--run", help="run directory holding pipeline artifacts (default: config 'out')")
        sp.add_argument("--smoke", action="store_true", help="use the small smoke-test profile")
        return sp

    sp = common(sub.add_parser("gen-data", help="generate clip files"), "run directory")
    sp.add_argument("--clips", type=int, help="number of training clips")
    sp.set_defaults(func=cmd_gen_data)

    sp = common(sub.add_parser("label", help="label blended clip pairs"), "dataset path (with --clips)")
    sp.add_argument("--clips", help="directory of clip files; omit to label the run directory")
    sp.add_argument("--pairs", type=int)
    sp.add_argument("--horizon", type=int)
    sp.add_argument("--stride", type=int)
    sp.add_argument("--alpha-thr", type=float, dest="alpha_thr")
    sp.add_argument("--tau", type=float)
    sp.add_argument("--mc", type=int, help="disturbance draws averaged per evaluation")
    sp.set_defaults(func=cmd_label)

    sp = common(sub.add_parser("train-vqvae", help="train the option-aware VQ-VAE"), "checkpoint path")
    sp.add_argument("--data")
    sp.add_argument("--lambda-opt", type=float, dest="lambda_opt")
    sp.add_argument("--lambda-token", type=float, dest="lambda_token")
    sp.add_argument("--epochs", type=int)
    sp.set_defaults(func=cmd_train_vqvae)

    sp = common(sub.add_parser("train-switch", help="train the switching policy"), "checkpoint path")
    sp.add_argument("--data")
    sp.add_argument("--iters", type=int)
    sp.add_argument("--lambda-start", type=float, dest="lambda_start")
    sp.add_argument("--lambda-end", type=float, dest="lambda_end")
    sp.add_argument("--kbc", type=int)
    sp.add_argument("--ablation", choices=("full", "bc-only", "no-guide", "individual"))
    sp.set_defaults(func=cmd_train_switch)

    sp = common(sub.add_parser("calibrate-fusion", help="calibrate the fusion thresholds"), "calibration path")
    sp.add_argument("--policy")
    sp.add_argument("--vq")
    sp.add_argument("--data")
    sp.add_argument("--delta", type=float)
    sp.set_defaults(func=cmd_calibrate_fusion)

    sp = common(sub.add_parser("eval", help="evaluate one selection mode with traces"), "output directory")
    sp.add_argument("--mode", required=True, choices=("switch-only", "fused", "fixed-D", "fixed-C", "oracle"))
    sp.add_argument("--data", help="dataset path relative to the run directory")
    sp.set_defaults(func=cmd_eval)

    sp = common(sub.add_parser("bench", help="benchmark all methods"), "report directory")
    sp.add_argument("--methods", default="all", help="'all' or a comma-separated list")
    sp.add_argument("--seeds", type=int, default=None)
    sp.set_defaults(func=cmd_bench)

    sp = common(sub.add_parser("theory", help="run the tabular theory suite"), "JSON report path")
    sp.add_argument("--all", action="store_true", help="run every experiment (default)")
    sp.set_defaults(func=cmd_theory)

    sp = common(sub.add_parser("pipeline", help="run every stage, skipping verified ones"), "run directory")
    sp.add_argument("--force", action="store_true", help="re-run every stage")
    sp.set_defaults(func=cmd_pipeline)

    sp = common(sub.add_parser("check", help="complementarity check on a clip directory"))
    sp.add_argument("--clips", required=True)
    sp.set_defaults(func=cmd_check)
    return p


def main(argv=None) -> int:
    from .pipeline import StageError
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except (ValueError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
