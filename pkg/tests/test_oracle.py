import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import QUINTIC_HALF, best_option, quintic, window_return
from optweave.env import ClipSpec, generate_clip
from optweave.oracle import (GuidanceEntry, OracleConfig, blend_clips, blend_weight, build_guidance_dataset,
                             evaluate_option, hold_labels, junction_defects, label_clip, load_dataset,
                             save_dataset, smooth_labels, split_individual)


def _entry(t0, c, p=None):
    p = np.array([1.0 - c, float(c)]) if p is None else np.asarray(p, dtype=float)
    return GuidanceEntry(t0, 0.0, 0.0, p, c, False)


def test_evaluate_option_matches_step_loop(calm_clip):
    cfg = OracleConfig(horizon=30)
    for t0 in (0, 40, 100):
        for c in (0, 1):
            assert evaluate_option(calm_clip, t0, c, cfg) == pytest.approx(
                window_return(calm_clip, t0, c, 30, cfg.gamma), abs=1e-12)


def test_labels_match_independent_comparison(calm_clip, dynamic_clip):
    cfg = OracleConfig(horizon=25, stride=15, alpha_thr=1e9)
    for clip in (calm_clip, dynamic_clip):
        for e in label_clip(clip, cfg):
            assert e.c == best_option(clip, e.t0, 25, cfg.gamma)


@pytest.mark.parametrize("H", [50, 150])
def test_step_and_seconds_horizons(H):
    # 50 steps and 3 s at 50 Hz both label correctly
    clip = generate_clip(ClipSpec(400, 0.5, 0.1, 4.0, seed=21))
    cfg = OracleConfig(horizon=H, stride=50, alpha_thr=1e9)
    entries = label_clip(clip, cfg)
    assert entries
    for e in entries:
        assert e.c == best_option(clip, e.t0, H, cfg.gamma)


def test_softmax_temperature(calm_clip):
    e = label_clip(calm_clip, OracleConfig(tau=2.0))[0]
    expect = 1.0 / (1.0 + np.exp((e.V_D - e.V_C) / 2.0))
    assert e.p_star[1] == pytest.approx(expect, rel=1e-12)


def test_gating_holds_previous_label(dynamic_clip):
    cfg = OracleConfig(alpha_thr=1e-9, stride=20)
    entries = label_clip(dynamic_clip, cfg)
    assert not entries[0].gated
    assert all(e.gated and e.c == entries[0].c for e in entries[1:])
    first = label_clip(dynamic_clip, OracleConfig(alpha_thr=1e-9, stride=20, gate_first=True))
    assert first[0].gated and first[0].c == 0


def test_window_count(calm_clip):
    cfg = OracleConfig(horizon=50, stride=10)
    assert len(label_clip(calm_clip, cfg)) == (calm_clip.length - 50) // 10 + 1


def test_short_clip_rejected():
    clip = generate_clip(ClipSpec(45, 0.2))
    with pytest.raises(ValueError):
        label_clip(clip, OracleConfig(horizon=50))


@pytest.mark.parametrize("kw", [dict(horizon=0), dict(stride=0), dict(gamma=1.0), dict(tau=0),
                                dict(smooth_window=4), dict(mc=0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        OracleConfig(**kw)


def test_hold_labels():
    out = hold_labels([_entry(0, 0), _entry(3, 1), _entry(6, 0)], 8)
    assert out.tolist() == [0, 0, 0, 1, 1, 1, 0, 0]


def test_smooth_labels_box_filter():
    entries = [_entry(0, 0), _entry(4, 1)]
    out = smooth_labels(entries, 3, 8)
    # at t=3 the window covers steps 2,3,4 -> one C step out of three
    assert out[3, 1] == pytest.approx(1 / 3)
    assert np.allclose(out.sum(axis=1), 1.0)
    assert out[0, 1] == 0.0 and out[7, 1] == 1.0
    np.testing.assert_array_equal(smooth_labels(entries, 1, 8)[:, 1], [0, 0, 0, 0, 1, 1, 1, 1])
    with pytest.raises(ValueError):
        smooth_labels(entries, 2, 8)


def test_blend_weight_shape():
    assert blend_weight(0.0) == 1.0 and blend_weight(1.0) == 0.0
    assert blend_weight(0.5) == pytest.approx(QUINTIC_HALF)
    for u in np.linspace(0, 1, 11):
        assert blend_weight(u) == pytest.approx(quintic(u), abs=1e-15)
    h = 1e-5
    for u in (0.0, 1.0):
        assert abs(blend_weight(u + h) - blend_weight(u - h)) / (2 * h) < 1e-8


def test_blend_unit_offset():
    a = generate_clip(ClipSpec(60, 0.0, seed=1))
    b = generate_clip(ClipSpec(60, 0.0, seed=2))
    b.ref_pos = b.ref_pos + np.array([-1.0, 0.0])
    out = blend_clips(a, b, 25)
    dp, dv = junction_defects(out)[0]
    assert dp < 1e-6
    assert dv < 0.1 * max(out.max_ref_speed(), 1e-9) or dv < 1e-6
    assert out.length == 120 and out.junctions == [60]
    np.testing.assert_allclose(out.ref_pos[60 + 25:], b.ref_pos[25:], atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(s1=st.integers(0, 10**6), s2=st.integers(0, 10**6), d1=st.floats(0, 1), d2=st.floats(0, 1),
       tb=st.integers(5, 30))
def test_blend_continuity(s1, s2, d1, d2, tb):
    a = generate_clip(ClipSpec(80, d1, seed=s1))
    b = generate_clip(ClipSpec(80, d2, seed=s2))
    out = blend_clips(a, b, tb)
    dp, dv = junction_defects(out)[0]
    assert dp < 1e-6
    assert dv < 0.1 * out.max_ref_speed()


def test_blend_rejects_long_window(calm_clip):
    with pytest.raises(ValueError):
        blend_clips(calm_clip, calm_clip, calm_clip.length)


def test_dataset_roundtrip(tmp_path, small_dataset):
    p = save_dataset(small_dataset, tmp_path / "d.jsonl")
    back = load_dataset(p)
    assert len(back) == len(small_dataset)
    for a, b in zip(back.sequences, small_dataset.sequences):
        assert np.array_equal(a.p_tilde, b.p_tilde)
        assert [e.c for e in a.entries] == [e.c for e in b.entries]
        assert np.array_equal(a.clip.ref_pos, b.clip.ref_pos)
    assert back.config == small_dataset.config


def test_dataset_is_deterministic(small_dataset):
    from optweave.scenarios import complementary, sample_specs
    again = build_guidance_dataset(sample_specs(complementary(n_clips=8, length_steps=120), 3), 6, 20,
                                   OracleConfig(), seed=3)
    for a, b in zip(again.sequences, small_dataset.sequences):
        assert np.array_equal(a.p_tilde, b.p_tilde)


def test_split_individual(small_dataset):
    parts = split_individual(small_dataset)
    assert len(parts) == 2 * len(small_dataset)
    for seq in parts.sequences:
        assert seq.clip.junctions == [] and seq.entries[0].t0 == 0
        assert seq.p_tilde.shape == (seq.clip.length, 2)
