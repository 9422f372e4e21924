import json
import os

import numpy as np
import pytest

import tokentune

CONFIG = {
    "seed": 3,
    "regime": "tokentune",
    "k": 4,
    "model": {"vocab_size": 16, "max_positions": 16, "d_model": 16, "n_heads": 2,
              "d_ff": 32, "n_layers": 1, "causal": False, "n_classes": 2},
    "task": {"kind": "classification", "n_train": 32, "n_test": 16, "seq_len": 12},
    "train": {"batch_size": 8, "epochs": 1, "lr": 0.003},
}


@pytest.fixture
def config_path(tmp_path, monkeypatch):
    monkeypatch.delenv("TOKENTUNE_SEED", raising=False)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(CONFIG))
    return path


def test_version():
    assert tokentune.version().startswith("tokentune ")


def test_load_config_applies_overrides_and_seed(config_path, monkeypatch):
    cfg = tokentune.load_config(config_path, ["train.lr=0.01"])
    assert cfg["train"]["lr"] == 0.01
    assert cfg["seed"] == 3
    monkeypatch.setenv("TOKENTUNE_SEED", "11")
    assert tokentune.load_config(config_path, ["seed=5"])["seed"] == 11
    with pytest.raises(tokentune.ConfigError):
        tokentune.load_config(config_path, ["nope=1"])
    with pytest.raises(tokentune.IoError):
        tokentune.load_config(config_path.parent / "missing.json")


def test_classification_arrays():
    ids, mask, labels = tokentune.gen_classification(20, 10, n_classes=3, vocab_size=12,
                                                     min_len=4, seed=1)
    assert ids.shape == (20, 10) and mask.shape == (20, 10) and labels.shape == (20,)
    assert (ids[:, 0] == 0).all()
    assert set(np.unique(labels)) <= {0, 1, 2}
    # Markers for class c are token c + 2; the label's marker is the most frequent.
    for row, m, y in zip(ids, mask, labels):
        counts = [int(((row == c + 2) & (m == 1)).sum()) for c in range(3)]
        assert int(np.argmax(counts)) == y
    again = tokentune.gen_classification(20, 10, n_classes=3, vocab_size=12, min_len=4, seed=1)
    assert (again[0] == ids).all()


def test_dump_classification(tmp_path):
    path = tmp_path / "d.jsonl"
    tokentune.dump_classification(path, 5, 8, seed=2)
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    assert len(rows) == 5
    assert all(r["ids"][0] == 0 and r["label"] in (0, 1) for r in rows)


def test_corpus_is_deterministic():
    a = tokentune.generate_text_corpus(1000, seed=4)
    assert isinstance(a, bytes) and len(a) == 1000
    assert a == tokentune.generate_text_corpus(1000, seed=4)


def test_train_eval_and_checkpoint(config_path, tmp_path):
    out = tmp_path / "run"
    code, stdout, stderr = tokentune.run("train", config_path, out=str(out))
    assert code == 0, stderr
    assert "trained" in stdout
    metrics = [json.loads(line) for line in (out / "metrics.jsonl").read_text().splitlines()]
    assert [m["step"] for m in metrics] == [1, 2, 3, 4]

    header = tokentune.checkpoint_header(out / "model.ckpt")
    assert header["kind"] == "model" and header["dtype"] == "float32"
    assert header["config"]["d_model"] == 16
    weights = tokentune.checkpoint_weights(out / "model.ckpt")
    assert weights["cls.W2"].shape == (16, 2)
    assert {t["name"] for t in header["tensors"]} == set(weights)

    code, stdout, _ = tokentune.run("eval", config_path, out=str(out))
    assert code == 0
    final = json.loads((out / "eval.json").read_text())
    assert json.loads(stdout.splitlines()[0])["accuracy"] == final["accuracy"]


def test_exit_codes(config_path, tmp_path):
    assert tokentune.run("train", config_path, ["train.lr=-1"])[0] == 2
    assert tokentune.run("train", config_path, ["train.lr=1e30"], out=str(tmp_path / "x"))[0] == 3
    assert tokentune.run("eval", config_path, checkpoint=str(tmp_path / "none.ckpt"))[0] == 2
