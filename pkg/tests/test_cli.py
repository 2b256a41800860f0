import csv
import hashlib
import json

import numpy as np
import pytest

from mspharm import models as M
from mspharm.cli import run
from mspharm.patches import extract_patches, prepare_cohort
from mspharm.sh import denormalize_channels
from mspharm.stats import EvalReport
from mspharm.tensor import Tensor
from mspharm.training import read_history
from mspharm.volume import load_manifest, read_mask, read_volume

SMALL = {"n_subjects": 2, "dims": [12, 12, 12], "channels": 3}
FAST = {"epochs": 1, "batch_size": 4, "max_batches_per_epoch": 2, "val_patches": 8, "lr0": 1e-3}


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode() + p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def cohort(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_json(root / "cohort.json", SMALL)
    assert run(["gen-data", "--config", cfg, "--out", str(root / "data"), "--quiet"]) == 0
    return root / "data"


def run_config(tmp_path, cohort, **extra):
    return write_json(tmp_path / "run.json", {"cohort": str(cohort), "width": 2, "train": FAST,
                                              "joint": FAST, **extra})


def test_gen_data_default_layout(tmp_path):
    assert run(["gen-data", "--out", str(tmp_path), "--quiet"]) == 0
    vols = [p for p in tmp_path.glob("sub-*/*.mspv") if p.name != "anatomy.mspv"]
    assert len(vols) == 16
    assert (tmp_path / "manifest.json").exists()


def test_gen_data_same_seed_same_bytes(tmp_path, cohort):
    cfg = write_json(tmp_path / "c.json", SMALL)
    assert run(["gen-data", "--config", cfg, "--out", str(tmp_path / "again"), "--quiet"]) == 0
    assert digest(tmp_path / "again") == digest(cohort)
    assert run(["gen-data", "--config", cfg, "--out", str(tmp_path / "other"), "--seed", "5", "--quiet"]) == 0
    assert digest(tmp_path / "other") != digest(cohort)


def test_malformed_config_reports_line(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{\n  "n_subjects": 2,\n  "dims": [12, 12 12]\n}')
    assert run(["gen-data", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    assert "line 3" in capsys.readouterr().err


def test_unknown_field_is_named(tmp_path, capsys):
    cfg = write_json(tmp_path / "c.json", {"n_subject": 3})
    assert run(["gen-data", "--config", cfg, "--out", str(tmp_path / "x")]) == 2
    assert "n_subject" in capsys.readouterr().err


def test_missing_cohort_is_io_error(tmp_path):
    cfg = write_json(tmp_path / "r.json", {"cohort": str(tmp_path / "nowhere")})
    assert run(["train", "--config", cfg, "--out", str(tmp_path / "o"), "--quiet"]) == 3


def test_bad_mode_and_thread_env(tmp_path, cohort, monkeypatch):
    cfg = run_config(tmp_path, cohort)
    assert run(["train", "--config", cfg, "--out", str(tmp_path / "o"), "--mode", "single:unet", "--quiet"]) == 2
    monkeypatch.setenv("MSP_THREADS", "zero")
    assert run(["train", "--config", cfg, "--out", str(tmp_path / "o"), "--quiet"]) == 2


def test_train_single_super_resolution(tmp_path, cohort):
    cfg = run_config(tmp_path, cohort)
    out = tmp_path / "o"
    code = run(["train", "--config", cfg, "--out", str(out), "--mode", "single:diqt",
                "--target", "connectom_sa", "--quiet"])
    assert code == 0
    net = M.load_checkpoint(out / "single-diqt" / "connectom_sa" / "model.mspc")
    assert net.target == 3
    assert "transposed_conv3d" in [l.kind for l in net.spec.layers]
    resolved = json.loads((out / "run_config.json").read_text())
    assert resolved["train"]["decay_period"] == 15 and resolved["split"]["fraction"] == 0.9
    assert len(read_history(out / "single-diqt" / "connectom_sa" / "history.csv")) == 1


@pytest.fixture(scope="module")
def msp_run(tmp_path_factory, cohort):
    root = tmp_path_factory.mktemp("msp")
    cfg = run_config(root, cohort, pretrain_arch="cnnrish5")
    outs = []
    for k in range(2):
        out = root / f"run{k}"
        assert run(["train", "--config", cfg, "--out", str(out), "--mode", "msp",
                    "--target", "prisma_st", "--quiet"]) == 0
        outs.append(out)
    return cfg, outs


def test_msp_pretrains_missing_singles(msp_run):
    _, (out, _) = msp_run
    phases = [r["phase"] for r in read_history(out / "msp" / "prisma_st" / "history.csv")]
    assert phases == ["pretrain:prisma_st", "pretrain:connectom_st", "pretrain:connectom_sa", "joint"]
    assert len(list((out / "singles").glob("*/model.mspc"))) == 3
    assert M.load_checkpoint(out / "msp" / "prisma_st" / "model.mspc").kind == "msp"


def test_train_rerun_is_identical(msp_run):
    _, (a, b) = msp_run
    for rel in ("msp/prisma_st/history.csv", "msp/prisma_st/model.mspc", "singles/connectom_sa/model.mspc"):
        assert (a / rel).read_bytes() == (b / rel).read_bytes()


def test_msp_reuses_pretrained(tmp_path, msp_run):
    cfg, (out, _) = msp_run
    dst = tmp_path / "o"
    assert run(["train", "--config", cfg, "--out", str(dst), "--mode", "msp", "--target", "connectom_st",
                "--pretrained", str(out / "singles"), "--quiet"]) == 0
    assert [r["phase"] for r in read_history(dst / "msp" / "connectom_st" / "history.csv")] == ["joint"]


def test_divergence_exit_code(tmp_path, msp_run):
    cfg, (out, _) = msp_run
    broken = tmp_path / "singles"
    for p in sorted((out / "singles").glob("*/model.mspc")):
        net = M.load_checkpoint(p)
        if net.target == 2:
            net.parameters()[-1].data[...] = np.inf
        (broken / p.parent.name).mkdir(parents=True)
        M.save_checkpoint(net, broken / p.parent.name / "model.mspc")
    code = run(["train", "--config", cfg, "--out", str(tmp_path / "o"), "--mode", "msp", "--target", "1",
                "--pretrained", str(broken), "--quiet"])
    assert code == 4


def test_evaluate_report_matches_csv(tmp_path, msp_run, capsys):
    cfg, (out, _) = msp_run
    dst = tmp_path / "eval"
    assert run(["evaluate", "--config", cfg, "--out", str(dst), "--pretrained", str(out)]) == 0
    table = capsys.readouterr().out
    report = EvalReport.from_json((dst / "report.json").read_text())
    assert report.models() == ["cnnrish5", "msp"]
    assert report.targets() == ["prisma_st", "connectom_st", "connectom_sa"]
    for row in report.rows:
        with open(dst / "errors" / f"{row.model}__{row.target}.csv", newline="") as fh:
            mses = [float(r["mse"]) for r in csv.DictReader(fh)]
        assert len(mses) == row.n
        assert abs(np.mean(mses) - row.mean) <= 1e-9 and abs(np.std(mses) - row.std) <= 1e-9
    assert table.strip() == (dst / "report.txt").read_text().strip()
    assert "±" in table


def test_evaluate_is_idempotent(tmp_path, msp_run):
    cfg, (out, _) = msp_run
    for k in range(2):
        assert run(["evaluate", "--config", cfg, "--out", str(tmp_path / str(k)), "--pretrained", str(out),
                    "--quiet"]) == 0
    assert digest(tmp_path / "0") == digest(tmp_path / "1")


def test_compare_model_with_itself(tmp_path, cohort, msp_run):
    _, (out, _) = msp_run
    ckpt = str(out / "singles" / "prisma_st" / "model.mspc")
    cfg = run_config(tmp_path, cohort, models={"a": ckpt, "b": ckpt})
    assert run(["compare", "--config", cfg, "--out", str(tmp_path / "c"), "--quiet"]) == 0
    report = EvalReport.from_json((tmp_path / "c" / "report.json").read_text())
    (test,) = report.tests
    assert test.degenerate and test.p == 1.0 and test.target == "prisma_st"


def test_compare_emits_every_pair(tmp_path, msp_run):
    cfg, (out, _) = msp_run
    assert run(["compare", "--config", cfg, "--out", str(tmp_path / "c"), "--pretrained", str(out),
                "--quiet"]) == 0
    report = EvalReport.from_json((tmp_path / "c" / "report.json").read_text())
    assert [(t.model_a, t.model_b, t.target) for t in report.tests] == [("cnnrish5", "msp", "prisma_st")]
    assert report.tests[0].m == 3
    assert "Wilcoxon" in (tmp_path / "c" / "report.txt").read_text()


def test_shape_mismatch_exit_code(tmp_path, cohort):
    wrong = tmp_path / "wrong.mspc"
    M.save_checkpoint(M.build_single("cnnrish5", 2, 2, width=2, target=1), wrong)
    cfg = run_config(tmp_path, cohort)
    assert run(["evaluate", "--config", cfg, "--out", str(tmp_path / "e"), "--pretrained", str(wrong),
                "--quiet"]) == 5


@pytest.mark.parametrize("target", ["prisma_st", "connectom_sa"])
def test_predict_stitches_patch_centres(tmp_path, cohort, msp_run, target):
    _, (out, _) = msp_run
    ckpt = out / "singles" / target / "model.mspc"
    cfg = run_config(tmp_path, cohort, subjects=["sub-01"])
    assert run(["predict", "--config", cfg, "--out", str(tmp_path / "p"), "--pretrained", str(ckpt),
                "--quiet"]) == 0
    vol = read_volume(tmp_path / "p" / "cnnrish5" / "sub-01" / f"{target}_pred.mspv")
    m = load_manifest(cohort / "manifest.json")
    scale = m.platforms[m.platform_index(target)].scale
    assert vol.dims == tuple(scale * d for d in m.base_dims)
    mask = read_mask(cohort / "sub-01" / "ge_st_mask.mspm").astype(bool)
    big = np.repeat(np.repeat(np.repeat(mask, scale, 0), scale, 1), scale, 2)
    assert not np.any(vol.data[~big])

    # oracle: predict one patch directly and denormalize its centre block
    ds = extract_patches(prepare_cohort(m))
    net = M.load_checkpoint(ckpt)
    i = int(np.flatnonzero(ds.centers[:, 0] == 1)[7])
    pred = net.predict(Tensor(ds[i].x[None])).data[0]
    mid = pred.shape[-1] // 2
    x, y, z = (scale * int(v) for v in ds.centers[i, 1:])
    for d in np.ndindex(scale, scale, scale):
        expect = denormalize_channels(pred[:, mid + d[0], mid + d[1], mid + d[2]][None], ds.cohort.stats[target])[0]
        np.testing.assert_allclose(vol.data[x + d[0], y + d[1], z + d[2]], expect, rtol=1e-6)
