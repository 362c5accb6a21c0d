import json

import numpy as np
import pytest

from fimgcn.cli import ABLATION_ROWS, format_ablation, main, parse_args, UsageError
from fimgcn.features import read_features
from fimgcn.model import load_checkpoint
from fimgcn.synth import SynthConfig, generate

SMALL = ["--channels", "4,4", "--strides", "1,2", "--temporal-kernel", "3",
         "--lstm-hidden", "3", "--attention-hidden", "3"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    generate(SynthConfig(n_sequences=12, n_frames=160, seed=4), out)
    return out


def test_gradcheck_exit_zero(capsys):
    assert main(["gradcheck"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["all_passed"] and len(report["groups"]) == 22


def test_gradcheck_failure_is_numeric(capsys):
    # a tolerance no finite difference can meet
    assert main(["gradcheck", "--tolerance", "0"]) == 3


def test_train_without_manifest_is_usage_error(capsys):
    assert main(["train", "--out", "x.ckpt"]) == 1
    assert "--manifest" in capsys.readouterr().err


def test_unknown_flag_and_bad_choice_are_usage_errors(capsys):
    assert main(["train", "--bogus"]) == 1
    assert main(["train", "--features", "depth"]) == 1
    assert main([]) == 1


def test_json_errors(tmp_path, capsys):
    assert main(["--json-errors", "train", "--manifest", str(tmp_path / "missing.csv"), "--out", "x"]) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["exit_code"] == 2 and err["error"] == "FileNotFoundError"


def test_config_file_merge(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"epochs": 7, "max-lr": 0.5, "features": "coords", "no_bilstm": True}))
    args = parse_args(["train", "--config", str(cfg), "--epochs", "3"])
    assert args.epochs == 3 and args.max_lr == 0.5 and args.features == "coords" and args.no_bilstm
    cfg.write_text(json.dumps({"epochz": 7}))
    with pytest.raises(UsageError):
        parse_args(["train", "--config", str(cfg)])
    cfg.write_text(json.dumps({"features": "depth"}))
    with pytest.raises(UsageError):
        parse_args(["train", "--config", str(cfg)])


def test_synth_preprocess_train_eval_attention(dataset, tmp_path, capsys):
    assert main(["synth", "--out-dir", str(tmp_path / "s"), "--n-sequences", "4", "--n-frames", "150"]) == 0
    assert (tmp_path / "s" / "manifest.csv").exists()

    assert main(["preprocess", "--manifest", str(dataset / "manifest.csv"), "--out-dir", str(tmp_path / "f"),
                 "--threads", "2"]) == 0
    index = json.loads((tmp_path / "f" / "index.json").read_text())
    assert len(index) == 12 and read_features(tmp_path / "f" / index[0]["features"]).shape == (9, 150, 17)

    ckpt = tmp_path / "m.ckpt"
    assert main(["train", "--manifest", str(dataset / "manifest.csv"), "--epochs", "2", "--batch-size", "4",
                 "--out", str(ckpt)] + SMALL) == 0
    history = json.loads((tmp_path / "m.ckpt.history.json").read_text())
    assert [r["epoch"] for r in history] == [1, 2]
    config = load_checkpoint(ckpt)[1]
    assert config.input_mean is not None and len(config.input_std) == 9
    capsys.readouterr()

    assert main(["eval", str(ckpt)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert set(report) >= {"confusion", "classwise_acc", "balanced_acc", "seed"}
    assert np.sum(report["confusion"]) == 2  # one held-out sequence per class

    assert main(["eval", str(ckpt), str(ckpt)]) == 0
    agg = json.loads(capsys.readouterr().out)
    assert agg["n_seeds"] == 2 and agg["std"] == 0.0

    csv = tmp_path / "a.csv"
    assert main(["attention", "--checkpoint", str(ckpt), "--sequence", str(dataset / "seq_0000.jsonl"),
                 "--out", str(csv)]) == 0
    lines = csv.read_text().splitlines()
    assert lines[0].startswith("# sequence=seq_0000") and lines[1] == "frame,joint,weight"
    total = sum(float(line.split(",")[2]) for line in lines[2:])
    assert abs(total - 1) < 1e-6

    noatt = tmp_path / "n.ckpt"
    assert main(["train", "--manifest", str(dataset / "manifest.csv"), "--epochs", "0", "--no-attention",
                 "--out", str(noatt)] + SMALL) == 0
    assert main(["attention", "--checkpoint", str(noatt), "--sequence", str(dataset / "seq_0000.jsonl"),
                 "--out", str(tmp_path / "b.csv")]) == 2


def test_train_outputs_are_reproducible(dataset, tmp_path):
    outs = []
    for name in ("a", "b"):
        ckpt = tmp_path / f"{name}.ckpt"
        assert main(["train", "--manifest", str(dataset / "manifest.csv"), "--epochs", "2", "--batch-size", "4",
                     "--threads", "1", "--seed", "3", "--out", str(ckpt)] + SMALL) == 0
        outs.append((ckpt.read_bytes(), (tmp_path / f"{name}.ckpt.history.json").read_bytes()))
    assert outs[0] == outs[1]


def test_skeleton_override(dataset, tmp_path, capsys):
    from importlib import resources
    doc = json.loads(resources.files("fimgcn").joinpath("data/skeleton17.json").read_text())
    custom = tmp_path / "skel.json"
    custom.write_text(json.dumps(doc))
    assert main(["preprocess", "--manifest", str(dataset / "manifest.csv"), "--out-dir", str(tmp_path / "f"),
                 "--skeleton", str(custom)]) == 0
    doc["edges"] = doc["edges"][:-1]
    custom.write_text(json.dumps(doc))
    assert main(["preprocess", "--manifest", str(dataset / "manifest.csv"), "--out-dir", str(tmp_path / "g"),
                 "--skeleton", str(custom)]) == 2


def test_ablation_table(dataset, tmp_path, capsys):
    out = tmp_path / "ablation.json"
    assert main(["ablation", "--manifest", str(dataset / "manifest.csv"), "--epochs", "1", "--batch-size", "4",
                 "--seeds", "0,1", "--out", str(out)] + SMALL) == 0
    table = json.loads(out.read_text())
    assert len(table["rows"]) == 4 == len(ABLATION_ROWS)
    assert all("gain" in r for r in table["rows"]) and table["rows"][0]["gain"] == 0.0
    assert all(len(r["balanced_acc"]) == 2 for r in table["rows"])
    text = capsys.readouterr().out
    assert text == format_ablation(table) + "\n" and "gain" in text.splitlines()[0]
