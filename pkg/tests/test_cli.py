import json

import pytest

from ruleworth.cli import main

TINY = {
    "problem": {"id": "pde2d"},
    "split": {"train_volume": 20, "test_volume": 100},
    "protocol": {"pretrain_epochs_max": 20, "finetune_epochs_max": 20, "plateau_patience": 20,
                 "eval_every": 10, "seeds": [0]},
    "network": {"hidden_layers": 1, "hidden_width": 5},
    "collocation": {"shape": [4, 4], "face_points": 4},
    "rules": {"drop": [2, 3, 4, 5]},
    "study": {"perturbations": [[6, "0.1"]], "volumes": [0, 20]},
    "workers": 1,
}


@pytest.fixture
def tiny(tmp_path, monkeypatch):
    monkeypatch.setenv("RULEWORTH_CACHE_DIR", str(tmp_path / "cache"))
    monkeypatch.delenv("RULEWORTH_WORKERS", raising=False)
    cfg = dict(TINY, output={"dir": str(tmp_path / "out")})
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(cfg))
    return path


def test_gen_data_and_ingest_check(tmp_path, capsys):
    out = tmp_path / "p.csv"
    assert main(["gen-data", "pde2d", "--grid", "4", "5", "--out", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 21
    assert main(["ingest-check", "pde2d", str(out)]) == 0
    assert "20 rows" in capsys.readouterr().out


def test_ingest_only_problem_exits_2(capsys):
    assert main(["gen-data", "burgers"]) == 2
    assert "ingest" in capsys.readouterr().err


def test_bad_arguments_exit_1(tmp_path, capsys):
    assert main(["importance"]) == 1
    assert main(["no-such-command"]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"problem": {"id": "pde2d"}, "colour": "red"}))
    assert main(["importance", str(bad)]) == 1
    assert "colour" in capsys.readouterr().err
    assert main(["detect-wrong-rules", str(bad).replace("bad", "none")]) == 1


def test_importance_csv_only_then_warm_rerun(tiny, tmp_path, capsys):
    assert main(["importance", str(tiny), "--csv-only"]) == 0
    out = tmp_path / "out"
    assert sorted(p.name for p in out.iterdir()) == ["report.csv", "report.json"]
    first = (out / "report.json").read_text()
    assert "trained jobs: 8" in capsys.readouterr().out
    assert main(["importance", str(tiny)]) == 0
    assert "trained jobs: 0" in capsys.readouterr().out
    assert (out / "report.json").read_text() == first
    assert any(p.suffix == ".svg" for p in out.iterdir())
    assert main(["report", str(out / "report.json"), "--plots", str(tmp_path / "figs")]) == 0
    assert any((tmp_path / "figs").iterdir())
    assert main(["relying-curve", str(tiny), "--rule", "6", "--csv-only"]) == 0
    assert (out / "relying_curve.csv").read_text().startswith("rule,r,mean,values")
    assert main(["relying-curve", str(tiny), "--rule", "2"]) == 1


def test_detect_wrong_rules(tiny, tmp_path, capsys):
    assert main(["detect-wrong-rules", str(tiny), "--perturb", "6=0.2", "--csv-only"]) == 0
    summary = json.loads((tmp_path / "out" / "wrong_rules.json").read_text())
    assert summary["tau"] == 0.1 and len(summary["scenarios"]) == 1
    assert summary["scenarios"][0]["scenario"] == "rule 6 -> 0.2"
    assert len(summary["scenarios"][0]["delta_ri"]) == 3
    assert main(["detect-wrong-rules", str(tiny), "--perturb", "6"]) == 1
    assert main(["detect-wrong-rules", str(tiny), "--perturb", "9=1"]) == 1


def test_volume_study(tiny, tmp_path):
    assert main(["volume-study", str(tiny), "--csv-only"]) == 0
    study = json.loads((tmp_path / "out" / "volume_study.json").read_text())
    assert study["parameter"] == "train_volume" and len(study["values"]) == 2
    assert main(["report", str(tmp_path / "out" / "volume_study.json")]) == 0


def test_report_on_missing_file_exits_2(tmp_path):
    assert main(["report", str(tmp_path / "nope.json")]) == 2
