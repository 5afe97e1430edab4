"""Command-line interface: subcommands, artifacts, and exit codes."""

import json
import os

import numpy as np
import pytest

from curio.cli import main
from curio.dataio import ContainerReader, load_config

SIZE = 32


def write_cfg(path, data_dir, out_dir, **overrides):
    fields = {
        "preset": "desk",
        "input_size": SIZE,
        "seed": 7,
        "grasp_data": os.path.join(data_dir, "grasp.bin"),
        "push_data": os.path.join(data_dir, "push.bin"),
        "poke_data": os.path.join(data_dir, "poke.bin"),
        "identity_data": os.path.join(data_dir, "identity.bin"),
        "gallery_data": os.path.join(data_dir, "gallery.bin"),
        "out_dir": out_dir,
        "batch_size": 4,
        "stage1_iters": 5,
        "stage2_cycles": 3,
    }
    fields.update(overrides)
    text = "# test run\n" + "".join(
        f"{key} = {value}\n" for key, value in fields.items())
    path.write_text(text)
    return path


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    for task, count in (("grasp", "24"), ("push", "8"),
                        ("poke", "6"), ("identity", "16")):
        assert main(["gen-data", "--task", task, "--count", count,
                     "--seed", "9", "--out", str(data),
                     "--image-size", str(SIZE)]) == 0
    assert main(["gen-data", "--task", "gallery", "--count", "32",
                 "--views", "2", "--seed", "9", "--out", str(data),
                 "--image-size", str(SIZE)]) == 0
    cfg = write_cfg(root / "run.cfg", str(data), str(root / "run"))
    assert main(["train", "--config", str(cfg)]) == 0
    return {"root": root, "data": data, "cfg": cfg, "run": root / "run"}


# ------------------------------------------------------------------ gen-data


def test_gen_data_is_byte_identical(tmp_path):
    args = ["gen-data", "--task", "push", "--count", "5", "--seed", "3",
            "--image-size", str(SIZE)]
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    assert main([*args, "--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "push.bin").read_bytes()
    b = (tmp_path / "b" / "push.bin").read_bytes()
    assert a == b


def test_gen_data_all_splits_by_ratio(tmp_path):
    assert main(["gen-data", "--task", "all", "--count", "130",
                 "--seed", "1", "--out", str(tmp_path),
                 "--image-size", str(SIZE)]) == 0
    expected = {"grasp": 40, "push": 5, "poke": 1, "identity": 84}
    for task, count in expected.items():
        with ContainerReader(str(tmp_path / f"{task}.bin")) as reader:
            assert reader.count == count, task


def test_gen_data_count_zero_is_valid(tmp_path, capsys):
    assert main(["gen-data", "--task", "poke", "--count", "0",
                 "--seed", "0", "--out", str(tmp_path)]) == 0
    with ContainerReader(str(tmp_path / "poke.bin")) as reader:
        assert reader.count == 0
    assert main(["describe", str(tmp_path / "poke.bin")]) == 0
    assert "records       0" in capsys.readouterr().out


def test_gen_data_prints_summary_stats(tmp_path, capsys):
    assert main(["gen-data", "--task", "grasp", "--count", "6",
                 "--seed", "2", "--out", str(tmp_path),
                 "--image-size", str(SIZE)]) == 0
    assert "positive rate" in capsys.readouterr().out
    assert main(["gen-data", "--task", "poke", "--count", "4",
                 "--seed", "2", "--out", str(tmp_path),
                 "--image-size", str(SIZE)]) == 0
    assert "target variance" in capsys.readouterr().out


def test_gen_data_usage_errors(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["gen-data", "--task", "jump", "--count", "1",
              "--out", str(tmp_path)])
    assert exc.value.code == 2
    assert main(["gen-data", "--task", "poke", "--count", "-1",
                 "--out", str(tmp_path)]) == 2


# --------------------------------------------------------------------- train


def test_train_writes_checkpoints_and_log(workspace):
    run = workspace["run"]
    assert (run / "stage1.ckpt").exists()
    assert (run / "final.ckpt").exists()
    lines = [json.loads(l) for l in
             (run / "metrics.ndjson").read_text().splitlines()]
    stage2 = [l for l in lines if l["stage"] == 2]
    # one record per (cycle, task)
    assert len(stage2) == 3 * 4
    assert {l["task"] for l in stage2} == {"grasp", "push", "poke",
                                           "identity"}


def test_train_prints_hash_and_seed(workspace, tmp_path, capsys):
    assert main(["train", "--config", str(workspace["cfg"]),
                 "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    cfg = load_config(str(workspace["cfg"]))
    assert cfg.config_hash().hex() in out
    assert "seed         7" in out


def test_train_stage_one_then_two(workspace, tmp_path):
    cfg = workspace["cfg"]
    assert main(["train", "--config", str(cfg), "--stage", "1",
                 "--out", str(tmp_path)]) == 0
    assert (tmp_path / "stage1.ckpt").exists()
    assert not (tmp_path / "final.ckpt").exists()
    assert main(["train", "--config", str(cfg), "--stage", "2",
                 "--out", str(tmp_path)]) == 0
    assert (tmp_path / "final.ckpt").exists()


def test_train_missing_inputs_exit_3(workspace, tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "nope.cfg")]) == 3

    bad = write_cfg(tmp_path / "bad.cfg", str(tmp_path / "absent"),
                    str(tmp_path / "out"))
    assert main(["train", "--config", str(bad)]) == 3
    assert "absent" in capsys.readouterr().err


# ---------------------------------------------------------------------- eval


def test_eval_recall_rows_and_rerun_bytes(workspace, tmp_path, capsys):
    base = ["eval", "--checkpoint", str(workspace["run"] / "final.ckpt"),
            "--config", str(workspace["cfg"]), "--metric", "recall"]
    assert main([*base, "--out", str(tmp_path / "a")]) == 0
    out = capsys.readouterr().out
    for token in ("k=1", "k=5", "k=10", "k=20", "instance", "category"):
        assert token in out
    assert main([*base, "--out", str(tmp_path / "b")]) == 0
    for name in ("eval_recall.txt", "eval_recall.ndjson"):
        first = (tmp_path / "a" / name).read_bytes()
        second = (tmp_path / "b" / name).read_bytes()
        assert first == second, name


def test_eval_knn_and_gallery_metrics(workspace, tmp_path, capsys):
    base = ["eval", "--checkpoint", str(workspace["run"] / "final.ckpt"),
            "--config", str(workspace["cfg"]), "--out", str(tmp_path)]
    assert main([*base, "--metric", "knn"]) == 0
    assert "knn" in capsys.readouterr().out
    assert main([*base, "--metric", "gallery", "--neighbors", "3"]) == 0
    out = capsys.readouterr().out
    assert "query" in out
    # three neighbor ids per query row
    first_row = next(l for l in out.splitlines() if l.startswith("query"))
    assert len(first_row.split("->")[1].split()) == 3


def test_eval_exit_codes(workspace, tmp_path, capsys):
    ckpt = str(workspace["run"] / "final.ckpt")
    cfg64 = write_cfg(tmp_path / "c64.cfg", str(workspace["data"]),
                      str(tmp_path), input_size=64)
    assert main(["eval", "--checkpoint", ckpt, "--config", str(cfg64),
                 "--metric", "recall"]) == 4

    no_gallery = write_cfg(tmp_path / "ng.cfg", str(workspace["data"]),
                           str(tmp_path), gallery_data="")
    assert main(["eval", "--checkpoint", ckpt, "--config", str(no_gallery),
                 "--metric", "recall"]) == 3
    assert "gallery" in capsys.readouterr().err

    with pytest.raises(SystemExit) as exc:
        main(["eval", "--checkpoint", ckpt,
              "--config", str(workspace["cfg"]), "--metric", "accuracy"])
    assert exc.value.code == 2


# ----------------------------------------------------------------- gradcheck


def test_gradcheck_ops_scope_passes(capsys):
    assert main(["gradcheck", "--scope", "ops", "--self-test"]) == 0
    out = capsys.readouterr().out
    for op in ("conv2d", "relu", "lrn", "maxpool", "linear", "reshape",
               "concat", "sum_all", "scale", "shift", "mse_loss",
               "cosine_embedding_loss", "per_bin_softmax_loss",
               "softmax_cross_entropy"):
        assert any(line.split()[0] == op and "PASS" in line
                   for line in out.splitlines()), op
    assert "corrupted backward flagged as expected" in out
    assert "all checks passed" in out


def test_gradcheck_network_scope_passes(capsys):
    assert main(["gradcheck", "--scope", "network",
                 "--input-size", str(SIZE), "--samples", "2"]) == 0
    out = capsys.readouterr().out
    assert f"network/desk ({SIZE} px)" in out


def test_gradcheck_failure_is_nonzero(capsys):
    assert main(["gradcheck", "--scope", "ops", "--tolerance", "-1"]) == 1
    assert "check(s) failed" in capsys.readouterr().out


# -------------------------------------------------------------------- ablate


def test_ablate_five_deterministic_rows(workspace, tmp_path, capsys):
    cfg = str(workspace["cfg"])
    assert main(["ablate", "--config", cfg,
                 "--out", str(tmp_path / "a")]) == 0
    out = capsys.readouterr().out
    for label in ("all", "except-grasp", "except-push", "except-poke",
                  "except-identity"):
        assert label in out
    assert main(["ablate", "--config", cfg,
                 "--out", str(tmp_path / "b")]) == 0
    first = (tmp_path / "a" / "ablation.ndjson").read_bytes()
    second = (tmp_path / "b" / "ablation.ndjson").read_bytes()
    assert first == second

    rows = [json.loads(l) for l in first.decode().splitlines()]
    assert len(rows) == 5
    hashes = [r["config_hash"] for r in rows]
    assert len(set(hashes)) == 5
    assert rows[0]["config_hash"] == load_config(cfg).config_hash().hex()


# ------------------------------------------------------------------ describe


def test_describe_all_artifact_kinds(workspace, capsys):
    paths = [str(workspace["data"] / "grasp.bin"),
             str(workspace["run"] / "final.ckpt"),
             str(workspace["cfg"])]
    assert main(["describe", *paths]) == 0
    out = capsys.readouterr().out
    assert out.count("config hash") == 3
    assert out.count("seed") == 3


def test_describe_error_exits(tmp_path):
    assert main(["describe", str(tmp_path / "ghost.bin")]) == 3
    junk = tmp_path / "junk.bin"
    junk.write_bytes(b"\x00" * 64)
    assert main(["describe", str(junk)]) == 4


# ---------------------------------------------------------------- thread cap


def test_thread_cap_env(workspace, monkeypatch, capsys):
    cfg = str(workspace["cfg"])
    monkeypatch.setenv("CURIO_THREADS", "3")
    monkeypatch.delenv("OMP_NUM_THREADS", raising=False)
    monkeypatch.setenv("MKL_NUM_THREADS", "7")
    assert main(["describe", cfg]) == 0
    capsys.readouterr()
    assert os.environ["OMP_NUM_THREADS"] == "3"
    # explicit per-library settings win over the cap
    assert os.environ["MKL_NUM_THREADS"] == "7"

    monkeypatch.setenv("CURIO_THREADS", "zero")
    assert main(["describe", cfg]) == 2
