import csv

import pytest

from replaycodec.cli import main
from replaycodec.evaluation import RDCurve, RDPoint


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Data manifests, a pre-trained and a fine-tuned checkpoint, one bitstream."""
    d = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--kind", "source_a", "--seed", "1", "--count", "8", "--out", str(d / "a.txt"),
                 "--ppm-dir", str(d / "ppm"), "--crop"]) == 0
    assert main(["gen-data", "--kind", "source_b", "--seed", "2", "--count", "8", "--out", str(d / "b.txt")]) == 0
    assert main(["pretrain", "--data", str(d / "a.txt"), "--out-dir", str(d / "pre"), "--iterations", "3",
                 "--batch-size", "2"]) == 0
    assert main(["finetune", "--data", str(d / "b.txt"), "--base", str(d / "pre" / "final.ckpt"), "--out-dir",
                 str(d / "ft"), "--strategy", "kr", "--replay-data", str(d / "a.txt"), "--iterations", "2",
                 "--batch-size", "2"]) == 0
    img = sorted((d / "ppm").glob("*.ppm"))[0]
    assert main(["encode", "--ckpt", str(d / "pre" / "final.ckpt"), "--input", str(img), "--lambda", "100",
                 "--out", str(d / "x.ccbs")]) == 0
    return d


def test_training_outputs(workdir):
    for sub in ("pre", "ft"):
        names = {p.name for p in (workdir / sub).iterdir()}
        assert {"final.ckpt", "train_log.csv", "MANIFEST.sha256"} <= names
        manifest = (workdir / sub / "MANIFEST.sha256").read_text()
        assert "final.ckpt" in manifest


def test_decode_and_gate(workdir, capsys):
    ckpt = str(workdir / "ft" / "final.ckpt")
    assert main(["decode", "--ckpt", ckpt, "--input", str(workdir / "x.ccbs"), "--out", str(workdir / "y.ppm")]) == 0
    assert main(["pretrain", "--data", str(workdir / "a.txt"), "--out-dir", str(workdir / "other"),
                 "--iterations", "1", "--batch-size", "2", "--seed", "9"]) == 0
    other = str(workdir / "other" / "final.ckpt")
    capsys.readouterr()
    assert main(["decode", "--ckpt", other, "--input", str(workdir / "x.ccbs"), "--out", str(workdir / "z.ppm")]) == 1
    assert "decode: IncompatibleModelError" in capsys.readouterr().err
    assert main(["decode", "--ckpt", other, "--input", str(workdir / "x.ccbs"), "--out", str(workdir / "z.ppm"),
                 "--force-decode"]) == 0
    assert (workdir / "z.ppm").exists()


def test_check_compat_identity_is_zero(workdir):
    ckpt = str(workdir / "pre" / "final.ckpt")
    img = str(sorted((workdir / "ppm").glob("*.ppm"))[0])
    out = workdir / "compat.csv"
    assert main(["check-compat", "--old", ckpt, "--new", ckpt, "--bitstreams", str(workdir / "x.ccbs"),
                 "--originals", img, "--csv", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert [float(r["delta_psnr"]) for r in rows] == [0.0]
    assert rows[0]["latents_equal"] == "1"


def test_eval_rd_is_idempotent(workdir):
    args = ["eval-rd", "--ckpt", str(workdir / "pre" / "final.ckpt"), "--data", str(workdir / "a.txt"),
            "--count", "2", "--grid", "4"]
    assert main(args + ["--csv", str(workdir / "r1.csv"), "--svg", str(workdir / "r1.svg")]) == 0
    assert main(args + ["--csv", str(workdir / "r2.csv"), "--svg", str(workdir / "r2.svg")]) == 0
    assert (workdir / "r1.csv").read_bytes() == (workdir / "r2.csv").read_bytes()
    assert (workdir / "r1.svg").read_bytes() == (workdir / "r2.svg").read_bytes()
    assert len(RDCurve.load_csv(workdir / "r1.csv")) == 4


def test_bd_rate_identical_is_zero(tmp_path, capsys):
    c = RDCurve([RDPoint(r, q, l) for r, q, l in [(0.3, 27, 1), (0.6, 29.5, 2), (1.0, 31.5, 3), (1.6, 33.4, 4)]])
    c.save_csv(tmp_path / "a.csv")
    c.scaled(1.1).save_csv(tmp_path / "b.csv")
    capsys.readouterr()
    assert main(["bd-rate", "--anchor", str(tmp_path / "a.csv"), "--test", str(tmp_path / "a.csv")]) == 0
    assert float(capsys.readouterr().out.split()[-1].rstrip("%")) == 0.0
    assert main(["bd-rate", "--anchor", str(tmp_path / "a.csv"), "--test", str(tmp_path / "b.csv")]) == 0
    assert float(capsys.readouterr().out.split()[-1].rstrip("%")) == pytest.approx(10.0, abs=0.01)


def test_scenario_tiny(tmp_path):
    args = ["scenario", "data_incremental", "--run-dir", str(tmp_path / "run"), "--cache-dir", str(tmp_path / "cache"),
            "--seeds", "1", "--pretrain-iters", "2", "--finetune-iters", "1", "--n-train", "4", "--n-test", "1",
            "--grid-size", "2", "--strategies", "ft_enc_dec,kr"]
    assert main(args) == 0
    rows = list(csv.DictReader((tmp_path / "run" / "summary.csv").open()))
    assert [r["model"] for r in rows] == ["pretrained", "ft_enc_dec", "kr_a0.5"]
    assert all(r["latents_equal"] == "1" for r in rows)
    assert (tmp_path / "run" / "summary.svg").exists()
    first = (tmp_path / "run" / "summary.csv").read_bytes()
    assert main(args) == 0  # cached rerun reproduces the summary
    assert (tmp_path / "run" / "summary.csv").read_bytes() == first


def test_usage_errors(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["bogus"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit):
        main(["finetune", "--data", "x", "--base", "y", "--out-dir", str(tmp_path), "--old-lambda-range", "9,1"])
    assert main(["decode", "--ckpt", "nope.ckpt", "--input", "nope.ccbs", "--out", str(tmp_path / "o.ppm")]) == 1
