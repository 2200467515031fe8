import json

import pytest

from poiformer import cli
from poiformer.tensor_core import GradReport

SMALL_SPEC = {"num_users": 8, "num_pois": 12, "num_categories": 3, "seq_len": 10, "seed": 2}
TINY = {"d": 8, "heads": 2, "d_c": 4, "encoder_layers": 1, "query_layers": 1, "decoder_layers": 1,
        "max_len": 16, "num_negatives": 5, "batch_size": 8, "epochs": 2, "record_wall_time": False}


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture
def data_dir(tmp_path, capsys):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps(SMALL_SPEC))
    assert run(capsys, "synth", "--spec", spec, "--out", tmp_path / "raw")[0] == 0
    code, _, _ = run(capsys, "prepare", "--input", tmp_path / "raw" / "checkins.tsv", "--min-user", 1,
                     "--min-poi", 1, "--out", tmp_path / "split")
    assert code == 0
    return tmp_path / "split"


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(TINY))
    return path


def test_synth_is_byte_identical_and_sized(tmp_path, capsys):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"num_users": 50, "seq_len": 40}))
    code, out, _ = run(capsys, "synth", "--spec", spec, "--out", tmp_path / "a")
    assert code == 0 and json.loads(out)["checkins"] == 2000
    run(capsys, "synth", "--spec", spec, "--out", tmp_path / "b")
    assert (tmp_path / "a" / "checkins.tsv").read_bytes() == (tmp_path / "b" / "checkins.tsv").read_bytes()
    assert (tmp_path / "a" / "run_meta.json").exists()


@pytest.mark.parametrize("spec", [{"num_users": 5, "bogus": 1}, {"transition_noise": 3.0}, [1, 2]])
def test_synth_invalid_spec_exits_2(tmp_path, capsys, spec):
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(spec))
    code, _, err = run(capsys, "synth", "--spec", path, "--out", tmp_path / "o")
    assert code == 2 and "invalid synthetic spec" in err


def test_prepare_counts_follow_n_minus_3(tmp_path, capsys):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"num_users": 50, "seq_len": 40}))
    run(capsys, "synth", "--spec", spec, "--out", tmp_path / "raw")
    code, out, _ = run(capsys, "prepare", "--input", tmp_path / "raw" / "checkins.tsv", "--min-user", 1,
                       "--min-poi", 1, "--out", tmp_path / "split")
    counts = json.loads(out)
    assert code == 0
    assert counts["train_pairs"] == 50 * (40 - 3) and counts["val_pairs"] == counts["test_pairs"] == 50
    for name in ("train.tsv", "val.tsv", "test.tsv", "vocab.tsv"):
        assert (tmp_path / "split" / name).exists()


def test_prepare_empty_input_warns(tmp_path, capsys, caplog):
    empty = tmp_path / "empty.tsv"
    empty.write_text("")
    code, out, _ = run(capsys, "prepare", "--input", empty, "--out", tmp_path / "split")
    assert code == 0 and "no check-ins" in caplog.text
    assert json.loads(out)["train_pairs"] == 0
    assert (tmp_path / "split" / "train.tsv").read_text() == ""


def test_prepare_malformed_line_17(tmp_path, capsys):
    lines = ["1\t0\t1.3\t103.8\t9"] * 16 + ["1\t0\t1.3"]
    path = tmp_path / "bad.tsv"
    path.write_text("\n".join(lines) + "\n")
    code, _, err = run(capsys, "prepare", "--input", path, "--out", tmp_path / "split")
    assert code == 2 and "line 17" in err


def test_train_smoke_and_eval(tmp_path, capsys, data_dir, config):
    out = tmp_path / "run"
    code, _, _ = run(capsys, "train", "--config", config, "--data-dir", data_dir, "--out", out)
    assert code == 0
    assert len((out / "metrics.jsonl").read_text().splitlines()) == 2
    meta = json.loads((out / "run_meta.json").read_text())
    assert meta["config"]["d"] == 8
    dump = tmp_path / "scores.jsonl"
    code, first, _ = run(capsys, "eval", "--checkpoint", out, "--data-dir", data_dir, "--dump-scores", dump)
    assert code == 0
    metrics = json.loads(first)
    assert set(metrics) == {"recall@1", "recall@5", "recall@10", "ndcg@5", "ndcg@10", "num_queries"}
    assert metrics["num_queries"] == SMALL_SPEC["num_users"]
    assert len(dump.read_text().splitlines()) == SMALL_SPEC["num_users"]
    _, second, _ = run(capsys, "eval", "--checkpoint", out, "--data-dir", data_dir)
    assert first == second


def test_ablation_flags(tmp_path, capsys, data_dir, config):
    run(capsys, "train", "--config", config, "--data-dir", data_dir, "--ablation", "no_contrastive",
        "--epochs", 1, "--out", tmp_path / "nc")
    assert json.loads((tmp_path / "nc" / "run_meta.json").read_text())["config"]["lambda"] == 0.0
    run(capsys, "train", "--config", config, "--data-dir", data_dir, "--ablation", "encoder_only",
        "--epochs", 1, "--out", tmp_path / "eo")
    names = [t["name"] for t in json.loads((tmp_path / "eo" / "model.json").read_text())["tensors"]]
    assert not any(n.startswith("decoder.") for n in names)


def test_poi_seed_env_overrides_config(tmp_path, capsys, data_dir, config, monkeypatch):
    monkeypatch.setenv("POI_SEED", "17")
    run(capsys, "train", "--config", config, "--data-dir", data_dir, "--epochs", 1, "--out", tmp_path / "r")
    meta = json.loads((tmp_path / "r" / "run_meta.json").read_text())
    assert meta["config"]["seed"] == 17 and meta["poi_seed_env"] == "17"


def test_invalid_config_exits_2(tmp_path, capsys, data_dir):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"d": 8, "heads": 3}))
    code, _, err = run(capsys, "train", "--config", bad, "--data-dir", data_dir, "--out", tmp_path / "r")
    assert code == 2 and "invalid config" in err


def test_numeric_failure_exits_3(tmp_path, capsys, data_dir, config, monkeypatch):
    from poiformer.trainer import NumericalError

    def boom(cfg, split, out_dir=None):
        raise NumericalError("non-finite loss at epoch 1, batch 0", {"epoch": 1})

    monkeypatch.setattr(cli, "train", boom)
    code, _, err = run(capsys, "train", "--config", config, "--data-dir", data_dir, "--out", tmp_path / "r")
    assert code == 3 and "non-finite" in err
    assert json.loads((tmp_path / "r" / "diagnostic.json").read_text()) == {"epoch": 1}


def test_eval_version_mismatch_exits_4(tmp_path, capsys, data_dir, config):
    out = tmp_path / "run"
    run(capsys, "train", "--config", config, "--data-dir", data_dir, "--epochs", 1, "--out", out)
    manifest = json.loads((out / "model.json").read_text())
    manifest["format_version"] = 99
    (out / "model.json").write_text(json.dumps(manifest))
    code, _, err = run(capsys, "eval", "--checkpoint", out, "--data-dir", data_dir)
    assert code == 4 and "format_version" in err


def test_gradcheck_failure_exits_5(capsys, monkeypatch):
    monkeypatch.setattr(cli, "run_all", lambda seed: ([(GradReport("add", 0.5, 3), 1e-4)], False))
    code, out, _ = run(capsys, "gradcheck")
    assert code == 5 and "FAIL" in out


def test_ablate_table(tmp_path, capsys, data_dir, config):
    code, out, _ = run(capsys, "ablate", "--config", config, "--data-dir", data_dir, "--seeds", 1,
                       "--epochs", 1, "--out", tmp_path / "abl")
    assert code == 0
    assert all(name in out for name in ("full", "no_contrastive", "encoder_only"))
    assert set(json.loads((tmp_path / "abl" / "ablation.json").read_text())) == {"full", "no_contrastive", "encoder_only"}


def test_schema(capsys):
    code, out, _ = run(capsys, "schema")
    assert code == 0 and "lambda" in json.loads(out)["properties"]
