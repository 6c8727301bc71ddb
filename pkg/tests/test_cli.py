import csv
import json
import subprocess
import sys

import pytest

from modalheart import cli
from modalheart.model import init_params, save_checkpoint
from modalheart.tensor import read_manifest


@pytest.fixture(scope="module")
def short_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    assert cli.main(["fixtures", "--preset", "short", "--out", str(root)]) == 0
    return root / "manifest.csv"


def test_case_zero_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["dataset", "--dry-run", "--case", "0"])
    assert exc.value.code == 2
    assert "1..14" in capsys.readouterr().err


def test_missing_manifest_exit_2(tmp_path, capsys):
    rc = cli.main(["decompose", "--manifest", str(tmp_path / "nope.csv"), "--out", str(tmp_path / "o")])
    assert rc == 2 and "not found" in capsys.readouterr().err
    assert cli.main(["dataset", "--out", str(tmp_path)]) == 2


def test_dry_run_case_14(tmp_path, capsys):
    assert cli.main(["dataset", "--dry-run", "--case", "14", "--out", str(tmp_path)]) == 0
    assert "104309" in capsys.readouterr().out
    rows = list(csv.reader(open(tmp_path / "counts.csv")))
    assert rows[-1] == ["14", "total", "104309"]


def test_subprocess_entry_point():
    r = subprocess.run([sys.executable, "-m", "modalheart.cli", "dataset", "--dry-run", "--case", "7"],
                       capture_output=True, text=True)
    assert r.returncode == 0 and "38273" in r.stdout
    r = subprocess.run([sys.executable, "-m", "modalheart.cli", "frobnicate"], capture_output=True, text=True)
    assert r.returncode == 2


def test_decompose_warns_on_short_clip(short_corpus, tmp_path, capsys):
    out = tmp_path / "dec"
    assert cli.main(["decompose", "--manifest", str(short_corpus), "--out", str(out)]) == 0
    err = capsys.readouterr().err
    assert "warning: sequence too short" in err and "99" in err
    rows = list(csv.DictReader(open(out / "summary.csv")))
    assert {r["status"] for r in rows} == {"ok", "skipped"}
    for r in rows:
        sid = r["sequence_id"]
        assert (out / "recon" / f"{sid}_svd1.mdt").exists()
        assert (out / "spectra" / f"{sid}.mdsp").exists() == (r["status"] == "ok")


def test_predict_and_eval(short_corpus, tmp_path, tiny_config):
    ckpt = tmp_path / "m.mdck"
    save_checkpoint(ckpt, init_params(tiny_config))
    rc = cli.main(["predict", "--checkpoint", str(ckpt), "--manifest", str(short_corpus),
                   "--kind", "hodmd-modes-abs", "--out", str(tmp_path / "pred")])
    assert rc == 0
    rows = list(csv.DictReader(open(tmp_path / "pred/predictions.csv")))
    assert rows and {r["test_kind"] for r in rows} == {"hodmd_modes_abs"}
    assert cli.main(["eval", "--predictions", str(tmp_path / "pred/predictions.csv"),
                     "--out", str(tmp_path / "rep")]) == 0
    rep = json.loads((tmp_path / "rep/metrics.json").read_text())
    assert rep["total"]["n_sequences"] == len(rows)
    assert (tmp_path / "rep/predicted_vs_true.png").exists()


def test_complex_parts_flag_required(short_corpus, tmp_path, tiny_config):
    ckpt = tmp_path / "m.mdck"
    save_checkpoint(ckpt, init_params(tiny_config))
    argv = ["predict", "--checkpoint", str(ckpt), "--manifest", str(short_corpus), "--out", str(tmp_path),
            "--kind", "hodmd-modes-real"]
    assert cli.main(argv) == 2


def test_eval_hand_example(tmp_path):
    p = tmp_path / "p.csv"
    p.write_text("sequence_id,heart_state,test_kind,n_images,predicted_months,true_months,error\n"
                 "a,CTL,original,1,25,27,-2\nb,OB,original,1,20,18,2\n")
    assert cli.main(["eval", "--predictions", str(p), "--out", str(tmp_path / "r")]) == 0
    rep = json.loads((tmp_path / "r/metrics.json").read_text())
    assert rep["total"]["rmse"] == 2.0
    assert rep["total"]["max_error"] == 2.0 and rep["total"]["min_error"] == -2.0


def test_fixtures_byte_deterministic(tmp_path):
    for d in ("a", "b"):
        assert cli.main(["fixtures", "--preset", "two-tone", "--seed", "3", "--out", str(tmp_path / d)]) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_checkpoint_config_mismatch_exit_1(short_corpus, tmp_path, tiny_config, capsys):
    ckpt = tmp_path / "m.mdck"
    save_checkpoint(ckpt, init_params(tiny_config))
    mc = tmp_path / "model.json"
    mc.write_text(json.dumps({"model": {"img_size": [32, 32], "patch": 8}}))
    rc = cli.main(["predict", "--checkpoint", str(ckpt), "--manifest", str(short_corpus),
                   "--model-config", str(mc), "--out", str(tmp_path / "p")])
    assert rc == 1 and "CheckpointError" in capsys.readouterr().err


def test_dataset_manifests_partition(short_corpus, tmp_path):
    out = tmp_path / "ds"
    assert cli.main(["dataset", "--manifest", str(short_corpus), "--case", "1", "--out", str(out)]) == 0
    ids = []
    for name in ("train", "val", "test"):
        entries = read_manifest(out / f"{name}_manifest.csv")
        assert all(path.exists() for path, _ in entries)
        ids += [ann.sequence_id for _, ann in entries]
    assert sorted(ids) == sorted(ann.sequence_id for _, ann in read_manifest(short_corpus))
    assert (out / "index.csv").exists()


def test_threads_flag_validated(tmp_path):
    assert cli.main(["dataset", "--dry-run", "--case", "1", "--threads", "0"]) == 2
