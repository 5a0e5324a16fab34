"""Acceptance suite A1-A8.

Each test records one PASS/FAIL line (printed in the terminal summary) and
then asserts. Thresholds and budgets are fixed; see README for the protocol
behind each check.
"""
import hashlib
import math
import time
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE
from oracles import best_option
from optweave.analysis import theory_suite
from optweave.env import ClipSpec, Terminal, generate_clip
from optweave.fusion import OPTION_HEAD, calibrate, fused_chooser
from optweave.netcore import gradient_check, log_softmax
from optweave.opvqvae import VqConfig, VqModel, compare_representations, loss_opvq, make_windows, train_opvqvae
from optweave.oracle import OracleConfig, blend_clips, build_guidance_dataset, junction_defects, label_clip
from optweave.pipeline import run_pipeline, smoke_profile
from optweave.scenarios import Bucket, Scenario, complementary, mid_range, out_of_range, sample_specs
from optweave.switchrl import (OBS_DIM, Batch, PpoConfig, SwitchPolicy, evaluate, fixed_chooser, policy_chooser,
                               ppo_loss, run_episode, schedule_chooser, summarize, train_switch, uniform_chooser)


def record(key, ok, detail):
    ACCEPTANCE[key] = (bool(ok), detail)
    print(f"{key}: {'PASS' if ok else 'FAIL'}  {detail}")


# -- A1 -----------------------------------------------------------------------

def test_a1_oracle_labels_match_resimulation():
    t0 = time.perf_counter()
    specs = [replace(s, perturb_prob=0.0, perturb_mag=0.0) for s in sample_specs(complementary(n_clips=50), 101)]
    cfg = OracleConfig()
    checked = mismatches = 0
    for i, spec in enumerate(specs):
        clip = generate_clip(spec, clip_id=f"a1-{i}")
        for e in label_clip(clip, cfg):
            if e.gated:
                continue
            checked += 1
            mismatches += int(e.c != best_option(clip, e.t0, cfg.horizon, cfg.gamma))
    dt = time.perf_counter() - t0
    ok = mismatches == 0 and checked > 0 and dt < 120
    record("A1", ok, f"{mismatches} mismatches over {checked} ungated labels on 50 clips; {dt:.1f}s")
    assert checked > 0
    assert mismatches == 0
    assert dt < 120


# -- A2 -----------------------------------------------------------------------

def test_a2_switching_dominance():
    t0 = time.perf_counter()
    ds = build_guidance_dataset(sample_specs(complementary(), 202), 100, 25, OracleConfig(), seed=202)
    cfg = PpoConfig()
    d = evaluate(ds.sequences, lambda s: fixed_chooser(0), cfg)
    c = evaluate(ds.sequences, lambda s: fixed_chooser(1), cfg)
    o = evaluate(ds.sequences, lambda s: schedule_chooser(s.step_labels), cfg)
    spread = abs(d.mean_return - c.mean_return)
    margin = max(d.mean_return, c.mean_return) + 0.05 * spread
    dt = time.perf_counter() - t0
    ok = o.success > d.success >= c.success and o.mean_return >= margin and dt < 600
    record("A2", ok, f"success O/D/C = {o.success:.2f}/{d.success:.2f}/{c.success:.2f}; "
                     f"return O {o.mean_return:.1f} vs needed {margin:.1f}; {dt:.1f}s")
    assert o.success > d.success >= c.success
    assert o.mean_return >= margin
    assert dt < 600


# -- A3 -----------------------------------------------------------------------

A3_SCENARIO = Scenario([Bucket(1.0, 0.2, 0.45, 0.1, 4.0)])


@pytest.mark.slow
def test_a3_representation_ordering():
    t0 = time.perf_counter()
    cfg = VqConfig()
    wins, rows = 0, []
    for seed in range(5):
        ds = build_guidance_dataset(sample_specs(A3_SCENARIO, seed), A3_SCENARIO.n_pairs, A3_SCENARIO.t_blend,
                                    OracleConfig(mc=8), seed=seed + 100)
        acc = compare_representations(make_windows(ds, cfg), cfg, epochs=40, seed=seed, probe_epochs=40)
        win = (acc["option_aware"] >= acc["vanilla"] + 0.03) and (acc["option_aware"] >= acc["raw"] + 0.03)
        wins += int(win)
        rows.append(f"{acc['option_aware']:.3f}/{acc['vanilla']:.3f}/{acc['raw']:.3f}")
    dt = time.perf_counter() - t0
    ok = wins >= 4 and dt < 1800
    record("A3", ok, f"opt/vanilla/raw per seed {rows}; {wins}/5 seeds with >=3pp margins; {dt:.0f}s")
    assert wins >= 4
    assert dt < 1800


# -- A4 -----------------------------------------------------------------------

@pytest.mark.slow
def test_a4_guidance_benefit():
    t0 = time.perf_counter()
    scn = complementary()
    train = build_guidance_dataset(sample_specs(scn, 400), 100, 25, OracleConfig(), seed=400)
    held = build_guidance_dataset(sample_specs(scn, 401), 100, 25, OracleConfig(), seed=401)
    cfg = PpoConfig()
    rand = evaluate(held.sequences, lambda s: uniform_chooser(np.random.default_rng(7)), cfg).mean_return
    beats_bc = beats_ng = ng_over_rand = 0
    rows = []
    for seed in range(5):
        ret = {}
        for ab in ("full", "bc-only", "no-guide"):
            pol = train_switch(train, cfg, 300, seed=seed, ablation=ab).policy
            ret[ab] = evaluate(held.sequences, lambda s: policy_chooser(pol, greedy=True), cfg).mean_return
        beats_bc += int(ret["full"] >= ret["bc-only"])
        beats_ng += int(ret["full"] >= ret["no-guide"])
        ng_over_rand += int(ret["no-guide"] >= rand)
        rows.append(f"{ret['full']:.1f}/{ret['bc-only']:.1f}/{ret['no-guide']:.1f}")
    dt = time.perf_counter() - t0
    ok = beats_bc >= 4 and beats_ng >= 4 and ng_over_rand == 5 and dt < 7200
    record("A4", ok, f"full/bc-only/no-guide per seed {rows}; random {rand:.1f}; full>=bc {beats_bc}/5, "
                     f"full>=no-guide {beats_ng}/5, no-guide>=random {ng_over_rand}/5; {dt:.0f}s")
    assert beats_bc >= 4
    assert beats_ng >= 4
    assert ng_over_rand == 5
    assert dt < 7200


# -- A5 -----------------------------------------------------------------------

@pytest.mark.slow
def test_a5_fusion_fallback():
    t0 = time.perf_counter()
    seed = 500
    scn = mid_range(n_clips=30)
    train = build_guidance_dataset(sample_specs(scn, seed), 100, 25, OracleConfig(), seed=seed)
    in_dist = build_guidance_dataset(sample_specs(scn, seed + 1), 20, 25, OracleConfig(), seed=seed + 1)
    ood = build_guidance_dataset(sample_specs(out_of_range(0.95, n_clips=10), seed + 2), 20, 25, OracleConfig(),
                                 seed=seed + 2)
    vcfg = VqConfig()
    vq = train_opvqvae(make_windows(train, vcfg), vcfg, 20, seed).model
    cfg = PpoConfig(rollout_steps=1024)
    pol = train_switch(train, cfg, 100, seed).policy
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        calib = calibrate(pol, vq, train, cfg)

    def fused(seqs):
        eps = [run_episode(s.clip, fused_chooser(pol, vq, calib, s.clip), cfg) for s in seqs]
        head = float(np.mean([i["source"] == OPTION_HEAD for e in eps for i in e.infos]))
        return head, summarize(eps)

    head_ood, fused_ood = fused(ood.sequences)
    head_id, _ = fused(in_dist.sequences)
    switch_ood = evaluate(ood.sequences, lambda s: policy_chooser(pol, greedy=True), cfg)
    dt = time.perf_counter() - t0
    c1, c2 = head_ood >= 0.8, (1.0 - head_id) >= 0.8
    c3 = fused_ood.mean_return >= switch_ood.mean_return
    record("A5", c1 and c2 and c3 and dt < 600,
           f"OOD option_head share {head_ood:.2f} (need >=0.80); in-dist switch_policy share {1 - head_id:.2f} "
           f"(need >=0.80); OOD return fused {fused_ood.mean_return:.1f} vs switch-only "
           f"{switch_ood.mean_return:.1f}; {dt:.0f}s")
    assert c1, f"OOD option_head share {head_ood:.2f}"
    assert c2, f"in-distribution switch_policy share {1 - head_id:.2f}"
    assert c3
    assert dt < 600


# -- A6 -----------------------------------------------------------------------

def test_a6_theory_suite():
    t0 = time.perf_counter()
    res = theory_suite(seed=0)
    scaled = res["rare"]["N_p_times_p_over_N0"]
    spread = max(scaled) / min(scaled)
    dt = time.perf_counter() - t0
    a = res["decay_gamma_0.9"]["pass"] and res["decay_gamma_0.99"]["pass"]
    b = res["snr"]["pass"]
    c = res["rare"]["pass"] and spread <= 2.0
    record("A6", a and b and c and dt < 300,
           f"slope rel err {res['decay_gamma_0.9']['rel_err']:.1e}/{res['decay_gamma_0.99']['rel_err']:.1e}; "
           f"SNR max rel err {res['snr']['max_rel_err']:.3f}; N*p spread {spread:.2f}, "
           f"eps-halving ratio {res['rare']['eps_halving_ratio']:.2f}; {dt:.1f}s")
    assert a and b and c
    assert dt < 300


# -- A7 -----------------------------------------------------------------------

def _diff_grads(hi, lo):
    return {k: hi[k] - lo[k] for k in lo}


def test_a7_gradient_checks():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    errs = {}

    # PPO total and the BC term alone
    pol = SwitchPolicy(16, rng)
    B = 32
    batch = Batch(rng.normal(size=(B, OBS_DIM)), rng.integers(2, size=B), np.log(rng.uniform(0.3, 0.7, B)),
                  rng.normal(size=B), rng.normal(size=B), rng.dirichlet([1, 1], size=B))
    pcfg = PpoConfig()
    r = ppo_loss(pol, batch, 0.6, pcfg)

    def ppo_total():
        pol.touch()
        return ppo_loss(pol, batch, 0.6, pcfg, need_grads=False).total

    errs["ppo_total"] = gradient_check(ppo_total, pol.params(), r.grads, 32, 1e-5, rng)
    g_bc = _diff_grads(ppo_loss(pol, batch, 1.6, pcfg).grads, r.grads)

    def bc():
        pol.touch()
        return ppo_loss(pol, batch, 0.0, pcfg, need_grads=False).bc

    errs["L_BC"] = gradient_check(bc, pol.params(), g_bc, 32, 1e-5, rng)

    # option-aware VQ loss and each component, quantization frozen
    vcfg = VqConfig(window=10, n_tokens=5, codebook_size=8, latent_dim=4, hidden=16, head_hidden=8,
                    mu=[0.0] * 6, sigma=[1.0] * 6)
    model = VqModel(vcfg, rng)
    X, y = rng.normal(size=(12, vcfg.input_dim)), rng.integers(2, size=12)
    base = loss_opvq(model, X, y)
    fz = base.frozen

    def grads_with(**kw):
        model.cfg = replace(vcfg, **kw)
        g = loss_opvq(model, X, y, fz).grads
        model.cfg = vcfg
        return g

    g_vq = grads_with(lambda_opt=0.0, lambda_token=0.0)
    g_commit = _diff_grads(grads_with(beta=vcfg.beta + 1.0), base.grads)
    g_opt = _diff_grads(grads_with(lambda_opt=vcfg.lambda_opt + 1.0), base.grads)
    g_tok = _diff_grads(grads_with(lambda_token=vcfg.lambda_token + 1.0), base.grads)
    g_cb = {k: (v if k == "codebook" else np.zeros_like(v)) for k, v in g_vq.items()}
    g_recon = {k: g_vq[k] - vcfg.beta * g_commit[k] - g_cb[k] for k in g_vq}
    for name, grads in (("total", base.grads), ("l_vq", g_vq), ("recon", g_recon), ("codebook", g_cb),
                        ("commit", g_commit), ("l_opt", g_opt), ("l_token", g_tok)):
        def f(name=name):
            model.touch()
            return getattr(loss_opvq(model, X, y, fz, need_grads=False), name)
        errs[f"opvq_{name}"] = gradient_check(f, model.params(), grads, 32, 1e-5, rng)

    # straight-through: forward value is the codebook entry; stop-gradients keep
    # the codebook out of the decoder path and the encoder out of the codebook term
    st_ok = np.array_equal(fz.e_k, model.codebook.entries[fz.k])
    st_ok &= all(np.all(g_recon[k] == 0) for k in ("codebook",))
    st_ok &= all(np.all(g_cb[k] == 0) for k in g_cb if k.startswith("enc"))
    st_ok &= all(np.all(g_commit[k] == 0) for k in g_commit if not k.startswith("enc"))
    dt = time.perf_counter() - t0
    worst = max(errs.values())
    ok = worst < 1e-4 and st_ok and dt < 60
    record("A7", ok, f"max rel err {worst:.1e} over {len(errs)} losses; straight-through/stop-gradient "
                     f"{'ok' if st_ok else 'violated'}; {dt:.1f}s")
    assert worst < 1e-4, errs
    assert st_ok
    assert dt < 60


# -- A8 -----------------------------------------------------------------------

def _tree_hashes(root: Path) -> dict:
    skip = {"manifest.json"}
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file() and p.name not in skip}


def test_a8_determinism_and_continuity(tmp_path):
    t0 = time.perf_counter()
    hashes = []
    for name in ("a", "b"):
        root = tmp_path / name
        cfg = replace(smoke_profile(), out=str(root))
        run_pipeline(cfg, root)
        hashes.append(_tree_hashes(root))
    same = hashes[0] == hashes[1] and len(hashes[0]) > 0

    rng = np.random.default_rng(808)
    worst_p = worst_v = 0.0
    for i in range(100):
        a = generate_clip(ClipSpec(120, float(rng.uniform()), seed=int(rng.integers(2**31))))
        b = generate_clip(ClipSpec(120, float(rng.uniform()), seed=int(rng.integers(2**31))))
        out = blend_clips(a, b, 25)
        dp, dv = junction_defects(out)[0]
        worst_p = max(worst_p, dp)
        worst_v = max(worst_v, dv / out.max_ref_speed())
    dt = time.perf_counter() - t0
    ok = same and worst_p < 1e-6 and worst_v < 0.1 and dt < 900
    record("A8", ok, f"{len(hashes[0])} artifacts {'identical' if same else 'DIFFER'} across two runs; "
                     f"blend C0 max {worst_p:.1e} m, C1 max {worst_v:.2e} x max speed; {dt:.0f}s")
    assert same
    assert worst_p < 1e-6 and worst_v < 0.1
    assert dt < 900
