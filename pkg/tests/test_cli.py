import json

import numpy as np
import pytest

from unsupmeta import checkpoint as C
from unsupmeta.cli import main

TINY = {
    "profile": "desk",
    "rule": {"lambda_hdims": 8, "lambda_deltadims": 4, "lambda_gradc": 2, "lambda_topdeltasize": 8,
             "lambda_computehsize": 8, "batch_size": 4},
    "objective": {"eval_repeats": 1},
    "trainer": {"meta_batch": 1, "labeled_per_class": 2, "unroll_start": [1, 2], "unroll_end": [2, 3],
                "unroll_ramp_steps": 10, "trunc_std_start": 2.0, "trunc_std_end": 3.0, "trunc_ramp": [0, 10],
                "meta_steps": 3},
    "tasks": {"glyph_grid": 8, "glyph_classes": [2, 4]},
    "arch": {"hidden_layers": [1, 1], "hidden_sizes": [6, 8], "embed_dim": 6},
}


@pytest.fixture
def config_file(tmp_path):
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps(TINY))
    return p


def _meta_rows(path):
    return [json.loads(l) for l in path.read_text().splitlines()]


def test_meta_train_reproducible(tmp_path, config_file, capsys):
    for name in ("a", "b"):
        assert main(["meta-train", "--config", str(config_file), "--out", str(tmp_path / name)]) == 0
    assert len(_meta_rows(tmp_path / "a" / "metrics.jsonl")) == 3
    assert (tmp_path / "a" / "theta.smup").read_bytes() == (tmp_path / "b" / "theta.smup").read_bytes()
    assert json.loads(capsys.readouterr().out.splitlines()[-1])["steps"] == 3


def test_meta_train_resume(tmp_path, config_file):
    assert main(["meta-train", "--config", str(config_file), "--out", str(tmp_path / "full")]) == 0
    assert main(["meta-train", "--config", str(config_file), "--steps", "1", "--out", str(tmp_path / "part")]) == 0
    ck = tmp_path / "part" / "checkpoint.smup"
    assert main(["meta-train", "--config", str(config_file), "--resume", str(ck), "--steps", "3",
                 "--out", str(tmp_path / "part")]) == 0
    a = C.load(tmp_path / "full" / "theta.smup").arrays
    b = C.load(tmp_path / "part" / "theta.smup").arrays
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert len(_meta_rows(tmp_path / "part" / "metrics.jsonl")) == 3


def test_meta_train_workers(tmp_path, config_file, capsys):
    assert main(["meta-train", "--config", str(config_file), "--out", str(tmp_path / "w"), "--steps", "2"]) == 0
    cfg = dict(TINY, workers=2)
    p = tmp_path / "w.json"
    p.write_text(json.dumps(cfg))
    assert main(["meta-train", "--config", str(p), "--deterministic", "--out", str(tmp_path / "c")]) == 0
    out = json.loads(capsys.readouterr().out.splitlines()[-1])
    assert out["applies"] == 3 and out["ledger"]["balanced"]


def test_invalid_config_is_usage_error(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"rule": {"lambda_hdims": -1}}))
    assert main(["meta-train", "--config", str(p)]) == 2
    assert "rule" in capsys.readouterr().err
    assert main(["info", "--config", str(tmp_path / "missing.json")]) == 2


def test_rollout_filters_and_pca(tmp_path, capsys):
    out = tmp_path / "r"
    assert main(["rollout", "--task", "glyphs", "--classes", "4", "--permute", "--hidden", "8",
                 "--steps", "6", "--eval-every", "3", "--out", str(out)]) == 0
    lines = (out / "rollout.csv").read_text().splitlines()
    assert [l.split(",")[0] for l in lines[1:]] == ["0", "3", "6"]
    assert main(["filters", str(out / "phi.smup"), "--out", str(tmp_path / "f")]) == 0
    assert len(list((tmp_path / "f").glob("*.pgm"))) == 8
    emb = np.random.default_rng(0).normal(size=(20, 4))
    np.save(tmp_path / "e.npy", emb)
    assert main(["pca", str(tmp_path / "e.npy"), "--out", str(tmp_path / "p")]) == 0
    assert (tmp_path / "p" / "pca.csv").exists()


def test_rollout_with_trained_theta(tmp_path, config_file):
    assert main(["meta-train", "--config", str(config_file), "--out", str(tmp_path / "m"), "--steps", "1"]) == 0
    assert main(["rollout", "--theta", str(tmp_path / "m" / "theta.smup"), "--steps", "2", "--eval-every", "1",
                 "--out", str(tmp_path / "r")]) == 0


def test_baseline_and_info(tmp_path, capsys):
    assert main(["baseline", "--task", "two_moons", "--train-steps", "5", "--n-test", "20",
                 "--out", str(tmp_path)]) == 0
    res = json.loads((tmp_path / "baseline.json").read_text())
    assert len(res["losses"]) == 6
    capsys.readouterr()
    assert main(["info", "--profile", "paper"]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["config"]["rule"]["hdims"] == 64
    C.save(tmp_path / "x.smup", C.Checkpoint("desk", {"a": np.zeros(2)}))
    assert main(["info", "--checkpoint", str(tmp_path / "x.smup")]) == 0


def test_idx_task_requires_files(capsys):
    assert main(["rollout", "--task", "idx"]) == 2


def test_unknown_subcommand():
    with pytest.raises(SystemExit):
        main(["frobnicate"])
