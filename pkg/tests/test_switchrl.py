import math

import numpy as np
import pytest

from oracles import GAMMA_EFF
from optweave.env import DEFAULT_PARAMS, reset, rollout_fixed
from optweave.netcore import gradient_check, log_softmax
from optweave.switchrl import (BLOCK_DIM, OBS_DIM, Batch, ObsHistory, PpoConfig, SwitchPolicy, bc_weight,
                               build_obs, evaluate, fixed_chooser, gae, load_policy, make_batch, obs_block,
                               policy_chooser, ppo_loss, run_episode, save_policy, schedule_chooser,
                               train_switch, uniform_chooser)


def _gae_loop(r, v, done, gamma, lam):
    """Textbook backward recursion written out term by term."""
    n = len(r)
    adv = [0.0] * n
    for t in range(n):
        total, coef = 0.0, 1.0
        for k in range(t, n):
            boot = 0.0 if done[k] else v[k + 1]
            total += coef * (r[k] + gamma * boot - v[k])
            if done[k]:
                break
            coef *= gamma * lam
        adv[t] = total
    return np.array(adv)


def _batch(rng, B=24):
    return Batch(rng.normal(size=(B, OBS_DIM)), rng.integers(2, size=B), np.log(rng.uniform(0.3, 0.7, B)),
                 rng.normal(size=B), rng.normal(size=B), rng.dirichlet([1, 1], size=B))


def test_gamma_eff():
    assert PpoConfig().gamma_eff == pytest.approx(GAMMA_EFF, rel=1e-15)


def test_gae_matches_explicit_sum(rng):
    r = rng.normal(size=9)
    v = rng.normal(size=10)
    done = np.zeros(9)
    done[4] = done[8] = 1
    adv, ret = gae(r, v, done, 0.9, 0.8, normalize=False)
    np.testing.assert_allclose(adv, _gae_loop(r, v, done, 0.9, 0.8), atol=1e-12)
    np.testing.assert_allclose(ret, adv + v[:-1])
    with pytest.raises(ValueError):
        gae(r, v[:-1], done, 0.9, 0.8)


def test_bc_weight_schedule():
    cfg = PpoConfig(lambda_start=1.0, lambda_end=0.05, k_bc=300)
    assert bc_weight(0, cfg) == pytest.approx(1.0)
    assert bc_weight(150, cfg) == pytest.approx(0.525)
    assert bc_weight(300, cfg) == pytest.approx(0.05)
    assert bc_weight(1000, cfg) == pytest.approx(0.05)
    w = [bc_weight(k, cfg) for k in range(301)]
    assert all(a >= b for a, b in zip(w, w[1:]))


def test_obs_layout(calm_clip):
    s = reset(calm_clip, 3)
    b = obs_block(s, calm_clip, 1)
    assert b.shape == (BLOCK_DIM,)
    assert b[9] == 0.0 and b[10] == 1.0
    assert b[13] == pytest.approx(3 / calm_clip.length)
    assert np.all(b[2:4] == 0.0)
    h = ObsHistory()
    o1 = h.push(np.ones(BLOCK_DIM))
    assert np.all(o1[BLOCK_DIM:] == 0)
    for _ in range(6):
        o = h.push(np.full(BLOCK_DIM, 2.0))
    assert o.shape == (OBS_DIM,) and np.all(o == 2.0)
    with pytest.raises(ValueError):
        build_obs([np.zeros(BLOCK_DIM)] * 6)


@pytest.mark.parametrize("bc_only", [False, True])
def test_ppo_gradients(rng, bc_only):
    pol = SwitchPolicy(12, rng)
    b = _batch(rng)
    cfg = PpoConfig()
    r = ppo_loss(pol, b, 0.7, cfg, bc_only)
    if bc_only:
        assert r.total == r.bc

    def f():
        pol.touch()
        return ppo_loss(pol, b, 0.7, cfg, bc_only, need_grads=False).total

    assert gradient_check(f, pol.params(), r.grads, 32, 1e-5, rng) < 1e-4


def test_bc_term_gradient_alone(rng):
    pol = SwitchPolicy(12, rng)
    b = _batch(rng)
    cfg = PpoConfig()
    g0 = ppo_loss(pol, b, 0.0, cfg).grads
    g1 = ppo_loss(pol, b, 1.0, cfg).grads
    grads = {k: g1[k] - g0[k] for k in g0}

    def f():
        pol.touch()
        return ppo_loss(pol, b, 0.0, cfg, need_grads=False).bc

    assert gradient_check(f, pol.params(), grads, 32, 1e-5, rng) < 1e-4


def test_ppo_clipping_zeroes_gradient(rng):
    pol = SwitchPolicy(8, rng)
    b = _batch(rng, 4)
    b.log_probs = b.log_probs - 5.0      # ratio ~ e^5, far outside the clip range
    b.advantages = np.abs(b.advantages)  # positive advantages -> clipped branch active
    cfg = PpoConfig(entropy_coef=0.0)
    r = ppo_loss(pol, b, 0.0, cfg)
    assert r.clip_frac == 1.0
    assert all(np.all(r.grads[k] == 0) for k in r.grads if k.startswith("pi"))


def test_fixed_chooser_matches_fixed_rollout(calm_clip):
    cfg = PpoConfig()
    for c in (0, 1):
        ep = run_episode(calm_clip, fixed_chooser(c), cfg)
        ref = rollout_fixed(calm_clip, c)
        assert ep.status is ref.status
        assert ep.task_return == pytest.approx(math.fsum(DEFAULT_PARAMS.weighted_total(ref.terms)), abs=1e-9)
        assert ep.switches == 0


def test_guide_reward_accounting(small_dataset):
    seq = small_dataset.sequences[0]
    cfg = PpoConfig()
    pol = SwitchPolicy(8, np.random.default_rng(0))
    ep = run_episode(seq.clip, policy_chooser(pol, np.random.default_rng(1)), cfg, p_tilde=seq.p_tilde,
                     w_guide=0.5)
    assert math.fsum(ep.rewards) == pytest.approx(math.fsum(ep.step_totals), abs=1e-9)
    guide = ep.rewards - ep.task_rewards
    for j in range(ep.n):
        t = j * cfg.k_sw
        span = seq.p_tilde[t:min(t + cfg.k_sw, seq.clip.length)]
        logp = log_softmax(pol.logits(ep.obs[j]))
        assert guide[j] == pytest.approx(0.5 * float((span @ logp).sum()), abs=1e-9)
    assert np.all(guide <= 0.0)


def test_schedule_chooser_follows_labels(small_dataset):
    seq = small_dataset.sequences[1]
    cfg = PpoConfig()
    ep = run_episode(seq.clip, schedule_chooser(seq.step_labels), cfg)
    labels = seq.step_labels
    assert list(ep.options) == [labels[j * cfg.k_sw] for j in range(ep.n)]


def test_make_batch_shapes(small_dataset):
    cfg = PpoConfig()
    pol = SwitchPolicy(8, np.random.default_rng(0))
    eps = [run_episode(s.clip, policy_chooser(pol, np.random.default_rng(i)), cfg, p_tilde=s.p_tilde,
                       w_guide=0.5) for i, s in enumerate(small_dataset.sequences[:2])]
    b = make_batch(eps, cfg)
    n = sum(e.n for e in eps)
    assert len(b) == n and b.obs.shape == (n, OBS_DIM) and b.guides.shape == (n, 2)
    assert abs(b.advantages.mean()) < 1e-9


def test_train_switch_is_deterministic(tmp_path, small_dataset):
    cfg = PpoConfig(rollout_steps=64, minibatch=32, epochs=2, eval_every=2)
    a = train_switch(small_dataset, cfg, 3, seed=4)
    b = train_switch(small_dataset, cfg, 3, seed=4)
    assert [r["return"] for r in a.curve] == [r["return"] for r in b.curve]
    np.testing.assert_array_equal(a.policy.pi.weights[0], b.policy.pi.weights[0])
    p = save_policy(a.policy, tmp_path / "sw.ckpt")
    back = load_policy(p)
    o = np.ones(OBS_DIM)
    np.testing.assert_array_equal(back.logits(o), a.policy.logits(o))
    with pytest.raises(ValueError):
        train_switch(small_dataset, cfg, 1, seed=0, ablation="nope")


@pytest.mark.parametrize("ablation", ["bc-only", "no-guide", "individual"])
def test_ablations_run(small_dataset, ablation):
    cfg = PpoConfig(rollout_steps=64, minibatch=32, epochs=1, eval_every=1)
    res = train_switch(small_dataset, cfg, 2, seed=0, ablation=ablation)
    if ablation == "no-guide":
        assert all(r["lambda_bc"] == 0.0 for r in res.curve)
    else:
        assert res.curve[0]["lambda_bc"] > 0


def test_uniform_chooser_evaluates(small_dataset):
    ev = evaluate(small_dataset.sequences[:2], lambda s: uniform_chooser(np.random.default_rng(0)), PpoConfig())
    assert 0.0 <= ev.success <= 1.0 and len(ev.rows) == 2
