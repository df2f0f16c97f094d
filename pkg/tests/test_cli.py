import csv
import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from dmsp.cli import main
from dmsp.data import ScrConfig, generate_scr, load_csv, mask_target
from dmsp.model import forward, load_checkpoint

SMALL = ["--grid-size", "20", "--length-scale", "3", "--n-high", "25", "--n-low", "60"]
FAST = ["--hidden-dim", "4", "--patience", "3"]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run("gen-scr", "--seed", 3, "--out-dir", d, *SMALL) == 0
    assert run("train", "--data", d / "scr.csv", "--seed", 1, "--epochs", 3, "--out", d / "m.ckpt",
               "--report", d / "r.json", *FAST) == 0
    return d


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_gen_scr_deterministic(tmp_path, capsys):
    assert run("gen-scr", "--seed", 7, "--out-dir", tmp_path / "a", *SMALL) == 0
    assert run("gen-scr", "--seed", 7, "--out-dir", tmp_path / "b", *SMALL) == 0
    for name in ("scr.csv", "scr_truth.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    out = capsys.readouterr().out
    assert "N=2" in out and "n=25 p=3" in out and "n=60 p=2" in out


def test_gen_scr_defaults_counts(tmp_path):
    assert run("gen-scr", "--seed", 0, "--out-dir", tmp_path) == 0
    ds = load_csv(tmp_path / "scr.csv")
    assert [s.n for s in ds.sources] == [200, 2000]
    assert len(read_rows(tmp_path / "scr_truth.csv")) == 64 * 64


def test_gen_scr_zero_noise(tmp_path):
    assert run("gen-scr", "--seed", 5, "--out-dir", tmp_path, "--noise-sigma", 0, *SMALL) == 0
    ds = load_csv(tmp_path / "scr.csv")
    _, truth = generate_scr(ScrConfig(grid_size=20, length_scale=3, n_high=25, n_low=60, noise_sigma=0.0), 5)
    np.testing.assert_allclose(ds[1].targets, truth.at(ds[1].locations), atol=1e-12)


def test_train_report_schema(workdir):
    report = json.loads((workdir / "r.json").read_text())
    assert report["epochs_run"] == 3
    for rec in report["history"]:
        assert {"epoch", "train_loss_per_source", "val_loss", "fidelity_scores"} <= set(rec)


def test_train_deterministic(workdir, tmp_path):
    assert run("train", "--data", workdir / "scr.csv", "--seed", 1, "--epochs", 3, "--out", tmp_path / "m.ckpt",
               "--report", tmp_path / "r.json", *FAST) == 0
    assert (tmp_path / "m.ckpt").read_bytes() == (workdir / "m.ckpt").read_bytes()
    assert (tmp_path / "r.json").read_bytes() == (workdir / "r.json").read_bytes()


def test_train_resume_bitwise(workdir, tmp_path):
    data = workdir / "scr.csv"
    assert run("train", "--data", data, "--seed", 1, "--epochs", 2, "--out", tmp_path / "h.ckpt", *FAST) == 0
    assert run("train", "--data", data, "--resume", tmp_path / "h.ckpt", "--epochs", 3,
               "--out", tmp_path / "r.ckpt", "--report", tmp_path / "r.json") == 0
    assert (tmp_path / "r.ckpt").read_bytes() == (workdir / "m.ckpt").read_bytes()
    assert (tmp_path / "r.json").read_bytes() == (workdir / "r.json").read_bytes()


def test_train_frozen_mode_report(workdir, tmp_path):
    assert run("train", "--data", workdir / "scr.csv", "--seed", 0, "--epochs", 2, "--mode", "frozen-fidelity",
               "--out", tmp_path / "f.ckpt", "--report", tmp_path / "f.json", *FAST) == 0
    report = json.loads((tmp_path / "f.json").read_text())
    assert all(rec["fidelity_scores"] == [0.5, 0.5] for rec in report["history"])


def test_inspect_fidelity_fresh_checkpoint(workdir, tmp_path, capsys):
    assert run("train", "--data", workdir / "scr.csv", "--seed", 0, "--epochs", 0,
               "--out", tmp_path / "z.ckpt", *FAST) == 0
    capsys.readouterr()
    assert run("inspect-fidelity", "--checkpoint", tmp_path / "z.ckpt") == 0
    out = json.loads(capsys.readouterr().out)
    assert out == [{"source_id": 0, "logit": 0.0, "score": 0.5}, {"source_id": 1, "logit": 0.0, "score": 0.5}]


def test_predict_grid_and_fusion(workdir, tmp_path):
    assert run("predict", "--checkpoint", workdir / "m.ckpt", "--data", workdir / "scr.csv", "--grid", 6,
               "--out", tmp_path / "p.csv") == 0
    rows = read_rows(tmp_path / "p.csv")
    assert len(rows) == 36
    params, _, _ = load_checkpoint(workdir / "m.ckpt")
    c = params.scores
    for r in rows:
        fused = c[0] * float(r["pred_0"]) + c[1] * float(r["pred_1"])
        assert abs(float(r["fused"]) - fused) <= 1e-12


def test_predict_at_observed_location_matches_masked_forward(workdir, tmp_path):
    ds = load_csv(workdir / "scr.csv")
    params, _, _ = load_checkpoint(workdir / "m.ckpt")
    with open(tmp_path / "locs.csv", "w") as fh:
        fh.write("x,y\n")
        for j in (0, 5, 9):
            x, y = ds[1].locations[j]
            fh.write(f"{float(x)!r},{float(y)!r}\n")
    assert run("predict", "--checkpoint", workdir / "m.ckpt", "--data", workdir / "scr.csv",
               "--locations", tmp_path / "locs.csv", "--mask-observed", "--out", tmp_path / "p.csv") == 0
    rows = read_rows(tmp_path / "p.csv")
    for r, j in zip(rows, (0, 5, 9)):
        assert float(r["fused"]) == forward(params, mask_target(ds, 1, j)).fused


def test_eval_schema_and_residuals(workdir, tmp_path, capsys):
    capsys.readouterr()
    assert run("eval", "--checkpoint", workdir / "m.ckpt", "--data", workdir / "scr.csv",
               "--reference", f"truth={workdir / 'scr_truth.csv'}", "--residuals", tmp_path / "res.csv") == 0
    rep = json.loads(capsys.readouterr().out)
    assert set(rep) == {"mae", "rmse", "evs", "cod", "pearson", "n", "undefined"}
    res = read_rows(tmp_path / "res.csv")
    assert len(res) == rep["n"]
    mae = np.mean([abs(float(r["residual"])) for r in res])
    assert abs(mae - rep["mae"]) < 1e-12
    assert run("eval", "--checkpoint", workdir / "m.ckpt", "--data", workdir / "scr.csv",
               "--reference", "source=0", "--out", tmp_path / "e.json") == 0
    assert json.loads((tmp_path / "e.json").read_text())["n"] == 5


def test_plot_writes_valid_svg(workdir, tmp_path):
    assert run("plot", "--checkpoint", workdir / "m.ckpt", "--data", workdir / "scr.csv", "--grid", 8,
               "--out-dir", tmp_path) == 0
    for name in ("fidelity.svg", "prediction_vs_reference.svg", "prediction_map.svg"):
        root = ET.parse(tmp_path / name).getroot()
        assert root.tag.endswith("svg") and len(list(root.iter())) > 5


def test_bench(tmp_path):
    assert run("bench", "--seed", 0, "--scales", "1,2", "--n-high", 10, "--n-low", 20,
               "--hidden-dim", 4, "--out", tmp_path / "b.json") == 0
    res = json.loads((tmp_path / "b.json").read_text())
    assert [r["samples"] for r in res] == [30, 60]
    assert all(r["epoch_seconds"] > 0 for r in res)


def test_exit_codes(workdir, tmp_path, capsys):
    capsys.readouterr()
    assert run("--json-errors", "train", "--data", workdir / "scr.csv", "--out", tmp_path / "x") == 2
    err = json.loads(capsys.readouterr().err)
    assert err["exit_code"] == 2 and "seed" in err["message"]
    assert run("--json-errors", "nonsense") == 2
    capsys.readouterr()
    assert run("--json-errors", "train", "--data", tmp_path / "missing.csv", "--seed", 0, "--out", tmp_path / "x") == 3
    assert json.loads(capsys.readouterr().err)["error"] == "data"
    (tmp_path / "bad.csv").write_text("source_id,x,y,target\n0,1,oops,2\n")
    assert run("train", "--data", tmp_path / "bad.csv", "--seed", 0, "--out", tmp_path / "x") == 3
    assert "parse error: row 2" in capsys.readouterr().err
    (tmp_path / "tiny.csv").write_text("source_id,x,y,target\n" + "".join(f"0,{i},0,1\n" for i in range(3)))
    assert run("--json-errors", "train", "--data", tmp_path / "tiny.csv", "--seed", 0, "--k", 4,
               "--out", tmp_path / "x") == 4
    assert json.loads(capsys.readouterr().err)["error"] == "numeric"
    assert run("train", "--data", workdir / "scr.csv", "--seed", 0, "--mode", "half", "--out", tmp_path / "x") == 2
    assert run("eval", "--checkpoint", workdir / "m.ckpt", "--data", workdir / "scr.csv",
               "--reference", "source=9") == 2
