import json
import re

import numpy as np
import pytest

from mqaf.cli import main
from mqaf.imaging import CorpusManifest
from mqaf.training import load_checkpoint

TINY = """seed = 3
[corpus]
n_references = 3
image_size = 32
severities = [1, 5]
[extractor]
input_size = 16
blocks = 2
dim = 8
[memory]
K = 4
[fusion]
awn_hidden = 8
[training]
epochs = 2
[evaluation]
test_fraction = 0.34
"""


@pytest.fixture
def workdir(tmp_path):
    (tmp_path / "c.toml").write_text(TINY)
    return tmp_path


@pytest.fixture
def trained(workdir):
    cfg = str(workdir / "c.toml")
    assert main(["gen-corpus", "--config", cfg, "--out", str(workdir / "corp")]) == 0
    assert main(["train", "--config", cfg, "--corpus", str(workdir / "corp"), "--out", str(workdir / "run")]) == 0
    return workdir


def test_unknown_flag_is_usage_error(capsys):
    assert main(["train", "--bogus"]) == 1
    err = capsys.readouterr().err
    assert "usage:" in err


def test_no_command_is_usage_error(capsys):
    assert main([]) == 1


def test_config_error_exit_code(workdir, capsys):
    (workdir / "bad.toml").write_text("[memory]\nK = 0\n")
    assert main(["train", "--config", str(workdir / "bad.toml")]) == 2
    assert "memory.K" in capsys.readouterr().err
    assert main(["train", "--set", "memory.nope=1"]) == 2


def test_print_config_is_byte_stable(workdir, capsys):
    assert main(["train", "--config", str(workdir / "c.toml"), "--print-config"]) == 0
    first = capsys.readouterr().out
    (workdir / "echo.toml").write_text(first)
    assert main(["train", "--config", str(workdir / "echo.toml"), "--print-config"]) == 0
    assert capsys.readouterr().out == first


def test_flags_override_file(workdir, capsys):
    assert main(["train", "--config", str(workdir / "c.toml"), "--set", "memory.K=6", "--seed", "11",
                 "--print-config"]) == 0
    out = capsys.readouterr().out
    assert "K = 6" in out and out.startswith("seed = 11")


def test_pipeline_outputs(trained, capsys):
    run = trained / "run"
    assert {p.name for p in run.iterdir()} >= {"model.ckpt", "metrics.csv", "provenance.json", "config.toml"}
    prov = json.loads((run / "provenance.json").read_text())
    assert {"config_hash", "seed", "version"} <= set(prov) and prov["seed"] == 3
    assert not set(prov["test_refs"]) & set(prov["train_refs"] + prov["val_refs"])
    state = load_checkpoint(run / "model.ckpt")
    assert state.meta["provenance"]["config_hash"] == prov["config_hash"]
    assert "[memory]" in state.meta["run_config"]
    lines = (run / "metrics.csv").read_text().splitlines()
    assert lines[0] == "epoch,l_pre,l_memory,l_alpha,mean_alpha,val_plcc,val_srcc" and len(lines) == 3


def test_score_nr_line(trained, capsys):
    m = CorpusManifest.load(trained / "corp" / "manifest.json")
    s = m.samples[0]
    capsys.readouterr()
    assert main(["score", str(trained / "corp" / s.path), "--checkpoint", str(trained / "run" / "model.ckpt")]) == 0
    line = capsys.readouterr().out.strip()
    assert "mode=NR" in line
    vals = dict(kv.split("=") for kv in line.split())
    assert vals["q"] == vals["s_dist"]


def test_score_identity_fr(trained, capsys):
    ref = str(trained / "corp" / "ref" / "ref000.ppm")
    capsys.readouterr()
    assert main(["score", ref, "--ref", ref, "--checkpoint", str(trained / "run" / "model.ckpt")]) == 0
    line = capsys.readouterr().out
    assert "mode=FR" in line and "s_ref=1.000000" in line


def test_score_without_checkpoint_uses_seeded_init(workdir, capsys):
    from mqaf.imaging import make_reference, save_image

    save_image(make_reference(64, seed=0), workdir / "x.ppm")
    assert main(["score", str(workdir / "x.ppm"), "--seed", "1"]) == 0
    assert "mode=NR" in capsys.readouterr().out


def test_score_data_errors(workdir, capsys):
    assert main(["score", str(workdir / "missing.ppm")]) == 3
    (workdir / "bad.ppm").write_bytes(b"P6\n2 2\n65535\n")
    assert main(["score", str(workdir / "bad.ppm")]) == 3
    assert "maxval" in capsys.readouterr().err


def test_eval_writes_reports(trained, capsys):
    out = trained / "ev"
    assert main(["eval", "--config", str(trained / "c.toml"), "--checkpoint", str(trained / "run" / "model.ckpt"),
                 "--corpus", str(trained / "corp"), "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert re.search(r"test \[FR\] n=\d+ PLCC=", text)
    report = json.loads((out / "report.json").read_text())
    assert report["mode"] == "FR" and report["n"] == 10
    assert (out / "scores.csv").read_text().startswith("sample_id,")
    assert main(["eval", "--config", str(trained / "c.toml"), "--checkpoint", str(trained / "run" / "model.ckpt"),
                 "--corpus", str(trained / "corp"), "--mode", "NR"]) == 0


def test_eval_missing_corpus(trained):
    assert main(["eval", "--checkpoint", str(trained / "run" / "model.ckpt"), "--corpus", str(trained / "nope")]) == 3


def test_eval_corrupt_checkpoint(trained):
    bad = trained / "bad.ckpt"
    data = bytearray((trained / "run" / "model.ckpt").read_bytes())
    data[-1] ^= 1
    bad.write_bytes(bytes(data))
    assert main(["eval", "--checkpoint", str(bad), "--corpus", str(trained / "corp")]) == 3


def test_gmad_and_inspect(trained, capsys):
    ck = str(trained / "run" / "model.ckpt")
    assert main(["gmad", "--config", str(trained / "c.toml"), "--checkpoint", ck, "--corpus", str(trained / "corp"),
                 "--tolerance", "0.05", "--top", "2", "--out", str(trained / "g")]) == 0
    assert (trained / "g" / "gmad.csv").read_text().startswith("id_a,id_b,defender_gap,attacker_gap")
    capsys.readouterr()
    assert main(["inspect-memory", "--checkpoint", ck]) == 0
    rows = capsys.readouterr().out.strip().splitlines()
    assert len(rows) == 5
    cos = np.array([[float(v) for v in r.split(",")] for r in rows[1:]])
    np.testing.assert_allclose(np.diag(cos), 1.0, atol=1e-6)
    np.testing.assert_allclose(cos, cos.T, atol=1e-12)


def test_lodo(trained, capsys):
    cfg = str(trained / "c.toml")
    assert main(["lodo", "--config", cfg, "--set", "training.epochs=1", "--corpus", str(trained / "corp"),
                 "--out", str(trained / "lodo")]) == 0
    folds = json.loads((trained / "lodo" / "lodo.json").read_text())
    assert len(folds) == 5 and all(f["split"].startswith("lodo:") for f in folds)


def test_nan_abort_exit_code(trained, monkeypatch):
    from mqaf import cli
    from mqaf.training import NumericalAbort

    def boom(*a, **k):
        raise NumericalAbort("non-finite loss")

    monkeypatch.setattr(cli, "train", boom)
    assert main(["train", "--config", str(trained / "c.toml"), "--corpus", str(trained / "corp"),
                 "--out", str(trained / "r2")]) == 4


def test_equal_provenance_equal_outputs(workdir):
    cfg = str(workdir / "c.toml")
    main(["gen-corpus", "--config", cfg, "--out", str(workdir / "c1")])
    main(["gen-corpus", "--config", cfg, "--out", str(workdir / "c2")])
    for name in ("manifest.json", "provenance.json"):
        assert (workdir / "c1" / name).read_bytes() == (workdir / "c2" / name).read_bytes()
    for d in ("a", "b"):
        main(["train", "--config", cfg, "--corpus", str(workdir / "c1"), "--out", str(workdir / d)])
    for name in ("model.ckpt", "metrics.csv", "provenance.json"):
        assert (workdir / "a" / name).read_bytes() == (workdir / "b" / name).read_bytes()


def test_selftest(capsys):
    assert main(["selftest"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 6 and all(line.startswith("PASS") for line in lines)


def test_selftest_failure_exits_nonzero(monkeypatch, capsys):
    from mqaf import selftest

    monkeypatch.setattr(selftest, "run_all", lambda: [selftest.CheckResult("x", False, "broken")])
    assert main(["selftest"]) != 0
    assert "FAIL" in capsys.readouterr().out
