import csv
import io
import json

import numpy as np
import pytest
import yaml

from ttsbeam import baselines, cssca
from ttsbeam.harness import cli
from ttsbeam.harness import experiments as ex
from ttsbeam.harness.config import PRESETS, ExperimentConfig
from ttsbeam.harness.metrics import MetricsRecord, csv_header, fmt, records_to_csv

TINY = {
    "preset": "desk-scale",
    "system": {"M": 2, "N_y": 2, "N_z": 2, "K": 2},
    "targets": {"R": [1.0, 1.0]},
    "long_term": {"B": 2, "J": 3, "T_iters": 4},
    "evaluation": {"n_slots": 20},
    "sweep": {"axis": "N", "values": [4], "seeds": [0], "schemes": ["PDD-TJAPB", "random-phase"]},
}


@pytest.fixture
def tiny_yaml(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return str(path)


# -- config ---------------------------------------------------------------------

def test_presets():
    desk = ExperimentConfig.preset("desk-scale")
    assert desk.dims.N == 16 and desk.dims.K == 2 and desk.R == [3.0, 3.0]
    full = ExperimentConfig.preset("full-scale")
    assert full.dims.N == 40 and full.dims.M == 6 and full.n_slots == 2000
    assert set(PRESETS) == {"desk-scale", "full-scale"}
    with pytest.raises(KeyError):
        ExperimentConfig.preset("huge")


def test_hash_stable_and_sensitive():
    a, b = ExperimentConfig.preset("desk-scale"), ExperimentConfig.preset("desk-scale")
    assert a.hash() == b.hash() and len(a.hash()) == 12
    assert a.override(seed=1).hash() != a.hash()


def test_override_is_deep_and_pure():
    base = ExperimentConfig.preset("desk-scale")
    new = base.override(long_term={"T_iters": 7})
    assert new.long_term().T_iters == 7 and new.long_term().B == base.long_term().B
    assert base.long_term().T_iters == 200


@pytest.mark.parametrize("patch", [
    {"sweep": {"schemes": []}},
    {"sweep": {"schemes": ["magic"]}},
    {"sweep": {"axis": "speed"}},
    {"targets": {"R": [1.0]}},
    {"long_term": {"tau": 0.0}},
])
def test_validation_errors(patch):
    with pytest.raises(ValueError):
        ExperimentConfig.preset("desk-scale").override(**patch)


def test_yaml_load(tiny_yaml):
    cfg = ExperimentConfig.load(tiny_yaml)
    assert cfg.dims.N == 4 and cfg.long_term().gamma.scale == 1.0
    assert ExperimentConfig.from_dict(yaml.safe_load(cfg.dump())).hash() == cfg.hash()


# -- metrics --------------------------------------------------------------------

def test_metrics_record():
    rec = MetricsRecord("x", 1.0, [2.0, 1.5])
    assert rec.power_dbm == pytest.approx(30.0) and rec.worst_rate == 1.5
    assert MetricsRecord("x", 0.0, [0.0]).power_dbm == -np.inf
    assert np.isnan(MetricsRecord("x", float("nan"), [0.0]).power_dbm)
    with pytest.raises(ValueError):
        MetricsRecord("x", 1.0, [-1.0])


def test_fmt_and_csv():
    assert fmt(None) == "" and fmt(3) == "3" and fmt(float("nan")) == "nan"
    assert fmt(0.1 + 0.2) == "0.3"
    assert csv_header(2) == ["scheme", "axis", "seed", "power_dBm", "rate_user_1", "rate_user_2",
                             "worst_rate", "infeasible_slots", "wall_ms", "config_hash"]
    text = records_to_csv([MetricsRecord("a", 1e-3, [1.0, 2.0], wall_ms=5.0)])
    row = list(csv.reader(io.StringIO(text)))[1]
    assert row[3] == "0" and row[-2] == ""
    with pytest.raises(ValueError):
        records_to_csv([])


# -- experiments ----------------------------------------------------------------

def test_overhead_examples():
    assert ex.overhead_report(0, 0, 5, 10) == (0, 0, 5, 50)
    assert ex.overhead_report(3, 0, 5, 10) == (0, 15, 5, 50)
    assert ex.overhead_report(1, 1, 1, 1) == (1, 3, 1, 1)
    assert ex.overhead_report(6, 3, 40, 2000) == (18, 378, 40, 80000)
    with pytest.raises(ValueError):
        ex.overhead_report(-1, 1, 1, 1)


def test_apply_axis():
    cfg = ExperimentConfig.preset("desk-scale")
    assert ex.apply_axis(cfg, "N", 32).dims.N_z == 8
    with pytest.raises(ValueError):
        ex.apply_axis(cfg, "N", 10)
    assert ex.apply_axis(cfg, "targets", [2.5, 3.5]).R == [2.5, 3.5]
    assert ex.apply_axis(cfg, "beta", 0.4).data["channel"]["beta_Iu"] == 0.4
    assert ex.axis_label("targets", [2.5, 3.5]) == "R=2.5/3.5"
    assert ex.axis_label("N", 16.0) == "N=16"


def test_zero_multipliers_give_zero_power():
    cfg = ExperimentConfig.from_dict(TINY)
    rec = ex.evaluate_policy(np.zeros(4), np.zeros(2), cfg.scsi(), 10, 3, cfg.R)
    assert rec.power_w == 0.0
    np.testing.assert_array_equal(rec.rates, 0.0)


def test_seed_tags_disjoint():
    tags = [cssca.TRAIN_TAG, cssca.EVAL_TAG, cssca.INIT_TAG, cssca.BASELINE_TAG,
            cssca.BASELINE_EVAL_TAG, baselines.DELAY_TAG, baselines.AO_TAG]
    assert len(set(tags)) == len(tags)


def test_sweep_rows_are_seed_major():
    cfg = ExperimentConfig.from_dict(TINY).override(sweep={"seeds": [0, 1]})
    recs = ex.run_sweep(cfg)
    assert [(r.seed, r.scheme) for r in recs] == [(0, "PDD-TJAPB"), (0, "random-phase"),
                                                  (1, "PDD-TJAPB"), (1, "random-phase")]


def test_rate_table_difference():
    cfg = ExperimentConfig.from_dict(TINY)
    (scheme, pu, pe, diff), = ex.rate_target_table(cfg, [0.5, 1.5], schemes=["random-phase"])
    assert scheme == "random-phase"
    assert diff == pytest.approx(pu - pe, abs=1e-9)


def test_gradcheck_small():
    rows = ex.gradcheck(n_instances=2)
    assert rows and all(r.passed for r in rows)


# -- CLI ------------------------------------------------------------------------

def test_cli_overhead(capsys):
    assert cli.main(["overhead", "--M", "1", "--K", "1", "--N", "1", "--T_s", "1"]) == cli.EXIT_OK
    assert capsys.readouterr().out.splitlines()[1] == "channel_coefficients_per_slot,1,3"


def test_cli_optimize_and_evaluate(tiny_yaml, tmp_path):
    pol, trace, out = tmp_path / "p.json", tmp_path / "t.csv", tmp_path / "e.csv"
    assert cli.main(["optimize", "--config", tiny_yaml, "--out", str(pol), "--trace", str(trace)]) == 0
    assert set(json.loads(pol.read_text())) == {"theta", "lambda", "cap_active", "iterations"}
    assert len(trace.read_text().splitlines()) == 5
    code = cli.main(["evaluate", "--config", tiny_yaml, "--policy", str(pol), "--out", str(out)])
    assert code == cli.EXIT_OK
    assert out.read_text().splitlines()[1].startswith("PDD-TJAPB,,0,")


def test_cli_sweep_deterministic(tiny_yaml, tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for p in (a, b):
        assert cli.main(["sweep", "--config", tiny_yaml, "--out", str(p)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_cli_errors_exit_with_diagnostic(tiny_yaml, tmp_path):
    assert cli.main(["optimize", "--config", str(tmp_path / "missing.yaml")]) == cli.EXIT_DIAGNOSTIC
    assert cli.main(["sweep", "--config", tiny_yaml, "--axis", "N", "--values", "5"]) == cli.EXIT_DIAGNOSTIC
    assert cli.main(["sweep", "--config", tiny_yaml, "--schemes", "nope"]) == cli.EXIT_DIAGNOSTIC
    with pytest.raises(SystemExit):
        cli.main(["frobnicate"])


def test_cli_infeasible_slots_flagged(tmp_path, capsys):
    # 40 bit/s/Hz per user is out of reach at these path gains
    path = tmp_path / "hard.yaml"
    path.write_text(yaml.safe_dump({**TINY, "targets": {"R": [40.0, 40.0]}}))
    code = cli.main(["baseline", "--config", str(path), "--scheme", "random-phase"])
    assert code == cli.EXIT_DIAGNOSTIC
    rows = list(csv.reader(io.StringIO(capsys.readouterr().out)))
    assert rows[1][3] == "nan" and int(rows[1][-3]) == 20


def test_evaluation_converges_in_slot_count():
    cfg = ExperimentConfig.from_dict(TINY)
    theta, lam, scsi = np.linspace(0, 6, 4), np.array([0.5, 0.8]), cfg.scsi()
    small = ex.evaluate_policy(theta, lam, scsi, 1000, 3, cfg.R)
    large = ex.evaluate_policy(theta, lam, scsi, 2000, 3, cfg.R)
    stderr = np.std(large.slot_power) / np.sqrt(2000)
    assert abs(small.power_w - large.power_w) < 2 * stderr


def test_rate_table_has_both_cases():
    cfg = ExperimentConfig.from_dict(TINY)
    rows = ex.rate_target_table(cfg, [0.5, 1.5], schemes=["random-phase", "TTS-WSRMax"])
    assert [r[0] for r in rows] == ["random-phase", "TTS-WSRMax"]
    assert all(np.isfinite(r[1]) and np.isfinite(r[2]) for r in rows)
