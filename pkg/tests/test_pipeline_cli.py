import csv
import json
from dataclasses import replace

import numpy as np
import pytest

from optweave import cli
from optweave.pipeline import Manifest, RunConfig, run_pipeline, smoke_profile
from optweave.scenarios import Bucket, Scenario, complementary, is_calm, out_of_range, sample_specs


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = replace(smoke_profile(), out=str(root))
    status = run_pipeline(cfg, root)
    return cfg, root, status


def test_scenarios():
    specs = sample_specs(complementary(n_clips=40), 0)
    assert len({s.seed for s in specs}) == 40
    assert sample_specs(complementary(n_clips=40), 0) == specs
    assert all(s.dyn_level == 0.95 for s in sample_specs(out_of_range(0.95, n_clips=3), 1))
    assert is_calm(specs[0]) == (specs[0].dyn_level < 0.5)
    with pytest.raises(ValueError):
        Bucket(0.0, 0.1, 0.2)
    with pytest.raises(ValueError):
        Bucket(1.0, 0.5, 0.2)
    scn = Scenario([Bucket(1.0, 0.2, 0.4, 0.1, 2.0)], n_clips=3)
    assert Scenario.from_dict(scn.to_dict()) == scn


def test_config_roundtrip(tmp_path):
    cfg = smoke_profile()
    back = RunConfig.load(cfg.save(tmp_path / "c.json"))
    assert back == cfg and back.digest() == cfg.digest()
    assert replace(cfg, out="elsewhere").digest() == cfg.digest()
    with pytest.raises(ValueError):
        RunConfig.from_dict({"bogus": 1})


def test_pipeline_resume_and_invalidation(smoke_run):
    cfg, root, status = smoke_run
    assert set(status.values()) == {"ran"}
    assert set(run_pipeline(cfg, root).values()) == {"skipped"}
    # tampering with the VQ checkpoint re-runs that stage and everything downstream
    p = root / "vq.ckpt"
    p.write_text(p.read_text().replace('"kind"', '"kind" ', 1))
    again = run_pipeline(cfg, root)
    assert again["train-vqvae"] == "ran" and again["calibrate-fusion"] == "ran" and again["bench"] == "ran"
    assert again["label"] == "skipped" and again["train-switch"] == "skipped"
    man = Manifest.load(root)
    assert set(man.data["stages"]) == {"gen-data", "label", "train-vqvae", "train-switch", "calibrate-fusion",
                                       "bench"}


def test_report_files(smoke_run):
    cfg, root, _ = smoke_run
    summary = json.loads((root / "report" / "bench_summary.json").read_text())
    methods = {"fixed-D", "fixed-C", "oracle", "random", "switch-only", "fused"}
    assert set(summary["d_heldout"]) == methods
    for m in summary["d_heldout"].values():
        assert 0.0 <= m["success"] <= 1.0


def test_cli_eval_traces(smoke_run, tmp_path):
    cfg, root, _ = smoke_run
    rc = cli.main(["eval", "--mode", "fused", "--run", str(root), "--out", str(tmp_path / "ev")])
    assert rc == 0
    traces = sorted((tmp_path / "ev" / "traces").glob("*.csv"))
    assert traces
    with traces[0].open() as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["t", "option", "omega", "source"]
    assert {r["source"] for r in rows} <= {"switch_policy", "option_head"}


def test_cli_version(capsys):
    assert cli.main(["--version"]) == 0
    assert "clip=1" in capsys.readouterr().out


def test_cli_validation_errors(tmp_path, capsys):
    assert cli.main(["nonsense"]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text('{"nope": 1}')
    assert cli.main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "r")]) == 2
    assert cli.main(["label", "--tau", "-1", "--out", str(tmp_path / "r")]) == 2


def test_cli_stage_failure(tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert cli.main(["train-vqvae", "--smoke", "--run", str(empty)]) == 3


def test_cli_label_and_check(smoke_run, tmp_path, capsys):
    cfg, root, _ = smoke_run
    out = tmp_path / "d.jsonl"
    assert cli.main(["label", "--clips", str(root / "clips"), "--pairs", "3", "--out", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 3
    capsys.readouterr()
    rc = cli.main(["check", "--clips", str(root / "clips")])
    res = json.loads(capsys.readouterr().out)
    assert rc == (0 if res["pass"] else 3)


def test_cli_theory(tmp_path):
    out = tmp_path / "t.json"
    assert cli.main(["theory", "--all", "--out", str(out)]) == 0
    assert json.loads(out.read_text())["pass"] is True
