import json
import time

import pytest

from bireal.cli import EXIT_CHECKSUM, EXIT_IO, EXIT_OK, EXIT_SHAPE, EXIT_USAGE, main

DATA = "synthetic:classes=4,size=8,n=192,test=64,spread=0.8,seed=1"
TRAIN = ["train", "--spec", "toy", "--data", DATA, "--epochs", "2", "--pretrain-epochs", "1", "--batch", "32", "--lr", "0.05"]


def jsonl(out):
    return [json.loads(line) for line in out.splitlines() if line.startswith("{")]


def test_analyze_jsonl(capsys):
    t0 = time.perf_counter()
    assert main(["analyze", "--spec", "bireal18", "--input-size", "224x224", "--format", "jsonl"]) == EXIT_OK
    assert time.perf_counter() - t0 < 1.0
    total = jsonl(capsys.readouterr().out)[-1]
    assert total["type"] == "total"
    assert total["memory_mbit"] == pytest.approx(33.6, rel=0.02)
    assert total["speedup_ratio"] == pytest.approx(11.06, rel=0.02)


def test_analyze_table_and_baselines(capsys):
    assert main(["analyze", "--spec", "bireal34", "--format", "table"]) == EXIT_OK
    assert "memory saving" in capsys.readouterr().out
    assert main(["analyze", "--spec", "bireal18", "--baseline", "self", "--format", "jsonl"]) == EXIT_OK
    assert jsonl(capsys.readouterr().out)[-1]["speedup_ratio"] == 1.0
    assert main(["analyze", "--spec", "bireal34", "--baseline", "bireal18", "--format", "jsonl"]) == EXIT_OK


def test_capability(capsys):
    assert main(["capability", "--spec", "fig3", "--format", "jsonl"]) == EXIT_OK
    rows = {r["tensor"]: r for r in jsonl(capsys.readouterr().out)}
    assert rows["s0.b0.sign0"]["log2_capability"] == 6272
    assert rows["s0.b0.conv0"]["values_per_entry"] == 289
    assert rows["s0.b0.add"]["values_per_entry"] == 289**2


def test_spec_file(tmp_path, capsys):
    from bireal.model import get_preset

    path = tmp_path / "net.json"
    path.write_text(json.dumps(get_preset("bireal18").to_dict()))
    assert main(["analyze", "--spec", str(path), "--format", "jsonl"]) == EXIT_OK
    path.write_text("{not json")
    assert main(["analyze", "--spec", str(path)]) == EXIT_USAGE


def test_train_eval_roundtrip(tmp_path, capsys):
    a, b = tmp_path / "a.brnm", tmp_path / "b.brnm"
    assert main(TRAIN + ["--out", str(a), "--seed", "3"]) == EXIT_OK
    trained = json.loads(capsys.readouterr().out)
    assert main(TRAIN + ["--out", str(b), "--seed", "3"]) == EXIT_OK
    capsys.readouterr()
    assert a.read_bytes() == b.read_bytes()
    report = [json.loads(l) for l in (tmp_path / "a.brnm.report.jsonl").read_text().splitlines()]
    assert report[-1]["top1"] == trained["top1"] and report[0]["type"] == "epoch"

    assert main(["eval", "--model", str(a), "--data", DATA, "--logits", str(tmp_path / "z.npy")]) == EXIT_OK
    res = json.loads(capsys.readouterr().out)
    assert res["top1"] == trained["top1"] and res["mode"] == "binary_infer"
    assert (tmp_path / "z.npy").exists()

    (tmp_path / "cut.brnm").write_bytes(a.read_bytes()[:-100])
    assert main(["eval", "--model", str(tmp_path / "cut.brnm"), "--data", DATA]) == EXIT_CHECKSUM
    assert main(["eval", "--model", str(a), "--data", DATA.replace("size=8", "size=9")]) == EXIT_SHAPE


def test_error_codes(tmp_path, capsys):
    assert main(["analyze", "--spec", "no-such-preset"]) == EXIT_USAGE
    assert main(["eval", "--model", str(tmp_path / "missing.brnm"), "--data", DATA]) == EXIT_IO
    (tmp_path / "junk").write_bytes(b"hello world, not a model")
    assert main(["eval", "--model", str(tmp_path / "junk"), "--data", DATA]) == EXIT_IO
    with pytest.raises(SystemExit) as exc:
        main(["analyze", "--spec", "bireal18", "--input-size", "big"])
    assert exc.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        main(["train", "--data", DATA, "--out", str(tmp_path / "m"), "--batch", "0"])
    assert exc.value.code == EXIT_USAGE


def test_ablate_small(tmp_path, capsys):
    out = tmp_path / "grid.jsonl"
    argv = ["ablate", "--spec", "toy", "--data", DATA, "--variants", "bireal", "--epochs", "1",
            "--pretrain-epochs", "1", "--batch", "64", "--out", str(out)]
    assert main(argv) == EXIT_OK
    assert "variant" in capsys.readouterr().out
    assert len(out.read_text().splitlines()) == 8
