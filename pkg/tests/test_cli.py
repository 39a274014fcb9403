import json
import os
from pathlib import Path

import numpy as np
import pytest

from iernlab import causal, cli
from iernlab import config as cfgmod
from iernlab import synthbench as sb
from iernlab.evalkit import EvalReport

FIXTURES = Path(__file__).with_name("fixtures")

SMALL = {
    "data": {"source": "toy", "n_train": 4, "n_test": 2},
    "arch": {"width": 4},
    "optimizer": {"epochs": 1, "batch_size": 8, "lr": 1e-3},
}


def _config(tmp_path, name="c.json", **updates):
    d = json.loads(json.dumps(SMALL))
    for key, val in updates.items():
        if isinstance(val, dict):
            d.setdefault(key, {}).update(val)
        else:
            d[key] = val
    p = tmp_path / name
    p.write_text(json.dumps(d))
    return str(p)


def _run(*argv):
    return cli.main([str(a) for a in argv])


# --- config ----------------------------------------------------------------------------


def test_print_config_shows_defaults(capsys):
    assert _run("train", "--print-config") == 0
    shown = json.loads(capsys.readouterr().out)
    assert shown == cfgmod.defaults()
    assert shown["optimizer"]["lr"] == 2e-4 and shown["optimizer"]["epochs"] == 80
    assert shown["weights"] == {"lambda1": 1.0, "lambda2": 5e-4, "lambda3": 1.0}


def test_config_validation(tmp_path):
    with pytest.raises(cfgmod.ConfigurationError):
        cfgmod.from_dict({"optimizer": {"epochs": 0}})
    with pytest.raises(cfgmod.ConfigurationError):
        cfgmod.from_dict({"method": "svm"})
    with pytest.raises(cfgmod.ConfigurationError):
        cfgmod.from_dict({"unknown_key": 1})
    with pytest.raises(cfgmod.ConfigurationError):
        cfgmod.from_dict({"data": {"source": "file", "train_path": str(tmp_path / "nope"), "test_path": "x"}})
    with pytest.raises(cfgmod.ConfigurationError):
        cfgmod.load(tmp_path / "missing.json")


def test_epochs_zero_rejected_with_exit_code(tmp_path, capsys):
    assert _run("train", "--config", _config(tmp_path, optimizer={"epochs": 0}), "--out", tmp_path / "o") == 2
    assert "epochs" in capsys.readouterr().err


# --- gen -----------------------------------------------------------------------------------


def test_gen_round_trip_and_determinism(tmp_path, capsys):
    cfg = _config(tmp_path)
    assert _run("gen", "--config", cfg, "--out", tmp_path / "a", "--seed", 3) == 0
    assert _run("gen", "--config", cfg, "--out", tmp_path / "b", "--seed", 3) == 0
    out = capsys.readouterr().out
    assert "train: 24 samples" in out
    built = cli.build_data(cfgmod.load(cfg, {"seed": 3}))
    for name in ("train", "test_iid", "test_ood"):
        a, b = tmp_path / "a" / "data" / name, tmp_path / "b" / "data" / name
        assert a.with_suffix(".bin").read_bytes() == b.with_suffix(".bin").read_bytes()
        assert a.with_suffix(".json").read_bytes() == b.with_suffix(".json").read_bytes()
        loaded = sb.load_dataset(a)
        assert loaded.x.tobytes() == built[name].x.tobytes()
        assert np.array_equal(loaded.cell_counts(), built[name].cell_counts())


def test_gen_rejects_zero_cell_emotion(tmp_path, capsys):
    degs = [sb.Degradation("identity").to_dict(), sb.Degradation("blur", 1.0).to_dict()]
    train = {"cooccurrence": [[2, 0], [0, 0]], "degradations": degs}
    test = {"cooccurrence": [[0, 2], [2, 0]], "degradations": degs}
    cfg = _config(tmp_path, data={"source": "spec", "spec": train, "test_spec": test})
    assert _run("gen", "--config", cfg, "--out", tmp_path / "o") == 2
    assert "no samples" in capsys.readouterr().err


# --- train / eval --------------------------------------------------------------------------


def test_train_logs_five_terms_and_eval_writes_report(tmp_path):
    cfg = _config(tmp_path, optimizer={"epochs": 2})
    out = tmp_path / "run"
    assert _run("train", "--config", cfg, "--out", out) == 0
    records = [json.loads(line) for line in (out / "train_log.jsonl").read_text().splitlines()]
    assert len(records) == 2
    for rec in records:
        assert set(rec["terms"]) == {"L_e", "L_c", "L_r", "L_CB", "L_Cls"}
        assert "train_acc" in rec and "total" in rec
    assert _run("gen", "--config", cfg, "--out", out) == 0
    assert _run("eval", "--checkpoint", out / "checkpoint", "--data", out / "data" / "test_ood",
                "--out", out / "eval") == 0
    report = EvalReport.load(out / "eval" / "report.json")
    report.validate()
    assert report.confusion.sum() == 24


def test_eval_rejects_empty_and_mismatched_data(tmp_path):
    cfg = _config(tmp_path, method="baseline")
    out = tmp_path / "run"
    assert _run("train", "--config", cfg, "--out", out) == 0
    empty = sb.build_split(sb.SyntheticSpec([[0, 0, 0]] * 6, list(sb.TOY_DEGRADATIONS)))
    sb.save_dataset(empty, tmp_path / "empty")
    assert _run("eval", "--checkpoint", out / "checkpoint", "--data", tmp_path / "empty", "--out", out) == 2
    other = sb.build_split(sb.SyntheticSpec([[1, 1, 1]] * 6, list(sb.TOY_DEGRADATIONS), image_size=(20, 20, 1)))
    sb.save_dataset(other, tmp_path / "other")
    assert _run("eval", "--checkpoint", out / "checkpoint", "--data", tmp_path / "other", "--out", out) == 2


def test_nwgm_without_trunk_is_a_configuration_error(tmp_path):
    cfg = _config(tmp_path, method="nwgm", weights={"lambda1": 0.0})
    assert _run("train", "--config", cfg, "--out", tmp_path / "o") == 2


def test_converged_model_fits_clean_training_set(tmp_path):
    degs = [sb.Degradation("identity").to_dict()]
    spec = {"cooccurrence": [[10]] * 6, "degradations": degs}
    cfg = _config(tmp_path, method="baseline", arch={"width": 8},
                  data={"source": "spec", "spec": spec, "test_spec": spec},
                  optimizer={"epochs": 80, "lr": 3e-3, "batch_size": 16})
    out = tmp_path / "run"
    assert _run("train", "--config", cfg, "--out", out) == 0
    assert _run("gen", "--config", cfg, "--out", out) == 0
    assert _run("eval", "--checkpoint", out / "checkpoint", "--data", out / "data" / "train", "--out", out) == 0
    assert EvalReport.load(out / "report.json").mean_acc >= 0.95


def _trajectory():
    cfg = cfgmod.from_dict({**SMALL, "optimizer": {"epochs": 3, "batch_size": 8, "lr": 1e-3}, "seed": 7})
    data = cli.build_data(cfg)
    _, records = cli.train_one(cfg, "iern", data["train"], 7)
    return [{**r["terms"], "total": r["total"]} for r in records]


def test_golden_three_epoch_trajectory():
    path = FIXTURES / "golden_trajectory.json"
    traj = _trajectory()
    if os.environ.get("IERNLAB_REGEN_GOLDEN"):
        path.parent.mkdir(exist_ok=True)
        path.write_text(json.dumps(traj, indent=2))
    golden = json.loads(path.read_text())
    assert len(golden) == len(traj) == 3
    for got, want in zip(traj, golden):
        assert set(got) == set(want)
        for k in want:
            assert abs(got[k] - want[k]) <= 1e-6, (k, got[k], want[k])


# --- compare --------------------------------------------------------------------------------


def test_compare_mean_is_mean_of_per_seed_reports(tmp_path):
    cfg = _config(tmp_path, methods=["baseline", "resample"], seeds=[0, 1])
    out = tmp_path / "cmp"
    assert _run("compare", "--config", cfg, "--out", out) == 0
    summary = json.loads((out / "compare.json").read_text())
    assert summary["format"] == "iernlab-compare"
    for row in summary["rows"]:
        reps = [EvalReport.load(out / "reports" / row["label"] / f"seed{s}_{row['split']}.json") for s in (0, 1)]
        assert row["mean_acc"] == pytest.approx(np.mean([r.mean_acc for r in reps]), abs=1e-12)
        assert np.allclose(row["per_class_mean"], np.mean([r.per_class_acc for r in reps], axis=0), atol=1e-12)
    table = (out / "compare.txt").read_text()
    assert "Average" in table and "anger" in table and "resample" in table


def test_compare_single_method_single_seed_matches_train_and_eval(tmp_path):
    cfg = _config(tmp_path, methods=["baseline"], seeds=[0], method="baseline", data={"source": "mixed", "per_cell": 3})
    assert _run("compare", "--config", cfg, "--out", tmp_path / "cmp") == 0
    assert _run("train", "--config", cfg, "--out", tmp_path / "t") == 0
    assert _run("gen", "--config", cfg, "--out", tmp_path / "t") == 0
    assert _run("eval", "--checkpoint", tmp_path / "t" / "checkpoint", "--data", tmp_path / "t" / "data" / "test",
                "--out", tmp_path / "t") == 0
    a = EvalReport.load(tmp_path / "cmp" / "reports" / "baseline" / "seed0_test.json")
    b = EvalReport.load(tmp_path / "t" / "report.json")
    assert np.array_equal(a.confusion, b.confusion)


def test_compare_lambda2_grid(tmp_path):
    cfg = _config(tmp_path, methods=["iern"], lambda2_grid=[1e-4, 1.0])
    assert _run("compare", "--config", cfg, "--out", tmp_path / "cmp") == 0
    labels = {r["label"] for r in json.loads((tmp_path / "cmp" / "compare.json").read_text())["rows"]}
    assert labels == {"iern l2=0.0001", "iern l2=1"}


def test_compare_rejects_mismatched_data(tmp_path):
    a = _config(tmp_path, "a.json")
    b = _config(tmp_path, "b.json", data={"n_train": 5})
    assert _run("compare", "--config", a, "--config", b, "--out", tmp_path / "cmp") == 2


# --- oracle / gradcheck ---------------------------------------------------------------------


def test_oracle_passes_and_is_deterministic(tmp_path, capsys):
    assert _run("oracle", "--out", tmp_path) == 0
    first = json.loads((tmp_path / "oracle.json").read_text())
    assert _run("oracle", "--out", tmp_path) == 0
    assert json.loads((tmp_path / "oracle.json").read_text()) == first
    assert capsys.readouterr().out.count("PASS") == 8


def test_oracle_catches_conditional_wired_as_backdoor():
    results = dict((n, ok) for n, ok, _ in cli.oracle_checks(0, backdoor_fn=causal.conditional, n_mc=10**5))
    assert not results["simpson-reversal"]
    assert not results["monte-carlo-do"]


def test_gradcheck_reports_five_terms(tmp_path):
    assert _run("gradcheck", "--out", tmp_path) == 0
    terms = json.loads((tmp_path / "gradcheck.json").read_text())["terms"]
    assert set(terms) == {"L_e", "L_c", "L_r", "L_CB", "L_Cls"}
    assert max(terms.values()) < 1e-4
