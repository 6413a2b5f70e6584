import csv
import json

import numpy as np
import pytest

from topafa.cli import main, run_bench
from topafa.config import ConfigError, RunConfig, defaults, parse_config
from topafa.io import HEADER, load_checkpoint, write_embeddings
from topafa.metrics import epsilon_jl

SMALL = {
    "synth": {"d": 16, "k0": 4, "n_samples": 2048, "seed": 3},
    "train": {"batch_size": 128, "iterations": 60, "lr": 0.003, "log_every": 5},
    "activation": {"kind": "top_afa"},
    "eval": {"batch_size": 500},
    "bench": {"iterations": 5, "warmup": 1, "batch_size": 128, "k": 4},
}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "c.json"
    cfg.write_text(json.dumps(SMALL))
    assert main(["synth", "--config", str(cfg), "--out", str(root / "data")]) == 0
    data = root / "data" / "embeddings.afae"
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(root / "ckpt")]) == 0
    assert main(["eval", "--config", str(cfg), "--ckpt", str(root / "ckpt"), "--data", str(data),
                 "--out", str(root / "report")]) == 0
    return root


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_synth_outputs(pipeline):
    gt = json.loads((pipeline / "data" / "ground_truth.json").read_text())
    assert gt["d"] == 16 and gt["h"] == 256 and gt["k0"] == 4 and gt["noise_sigma"] == 0
    assert (pipeline / "data" / "codes.bin").exists()
    manifest = json.loads((pipeline / "data" / "manifest.json").read_text())
    assert manifest["seed"] == 3 and len(manifest["config_hash"]) == 64
    assert manifest["format_versions"] == {"embedding": 1, "checkpoint": 1}


def test_train_outputs(pipeline):
    params, spec, info = load_checkpoint(pipeline / "ckpt")
    assert (params.d, params.h) == (16, 256) and spec.kind == "top_afa"
    rows = read_csv(pipeline / "ckpt" / "train_log.csv")
    assert rows[0] == ["iter", "loss_total", "loss_mse", "loss_aux", "loss_afa", "nmse", "mean_l0", "dead_count"]
    assert len(rows) == 1 + 12 + 1  # every 5th iteration plus the last


def test_eval_report(pipeline):
    report = json.loads((pipeline / "report" / "report.json").read_text())
    assert report["afa_bound_violations"] == 0
    assert report["n_inputs"] == 2048
    assert report["epsilon_jl"] == pytest.approx(epsilon_jl(256, 16))
    assert 0 <= report["epsilon_dict"] <= 1
    for name in ("nmse", "epsilon_lbo"):
        stats = read_csv(pipeline / "report" / f"violin_{name}_stats.csv")
        assert stats[0] == ["stat", "value"]
        assert [r[0] for r in stats[1:]] == ["min", "p25", "median", "p75", "max", "mean", "n_kept"]
        hist = read_csv(pipeline / "report" / f"violin_{name}_hist.csv")
        assert hist[0] == ["bin_lo", "bin_hi", "count"] and len(hist) == 65


def test_zf_jl(pipeline):
    out = pipeline / "zf.csv"
    data = pipeline / "data" / "embeddings.afae"
    assert main(["zf", "--ckpt", str(pipeline / "ckpt"), "--data", str(data), "--epsilon", "jl",
                 "--out", str(out)]) == 0
    rows = read_csv(out)
    assert rows[0] == ["z_norm", "f_norm", "bound_lo", "bound_hi"]
    eps = epsilon_jl(256, 16)
    # eps_JL(256, 16) > 1, so the band is unbounded above
    z, _, lo, hi = map(float, rows[1])
    assert lo == pytest.approx(z / np.sqrt(1 + min(eps, 1.0) * 255))
    assert hi == float("inf")
    manifest = json.loads((pipeline / "zf.manifest.json").read_text())
    assert manifest["epsilon"] == pytest.approx(eps)


def test_zf_numeric_epsilon(pipeline):
    out = pipeline / "zf2.csv"
    data = pipeline / "data" / "embeddings.afae"
    assert main(["zf", "--ckpt", str(pipeline / "ckpt"), "--data", str(data), "--epsilon", "0.001",
                 "--out", str(out)]) == 0
    z, _, lo, hi = map(float, read_csv(out)[1])
    assert lo == pytest.approx(z / np.sqrt(1.255)) and hi == pytest.approx(z / np.sqrt(0.745))
    assert main(["zf", "--ckpt", str(pipeline / "ckpt"), "--data", str(data), "--epsilon", "abc",
                 "--out", str(out)]) == 1


def test_train_reproducible(pipeline, tmp_path):
    cfg = pipeline / "c.json"
    data = pipeline / "data" / "embeddings.afae"
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(tmp_path / "again")]) == 0
    for name in ("weights.bin", "train_log.csv"):
        assert (tmp_path / "again" / name).read_bytes() == (pipeline / "ckpt" / name).read_bytes()


def test_bench(pipeline, capsys):
    cfg = pipeline / "c.json"
    data = pipeline / "data" / "embeddings.afae"
    assert main(["bench", "--config", str(cfg), "--data", str(data), "--out", str(pipeline / "bench.json")]) == 0
    out = capsys.readouterr().out
    assert "top_afa" in out and "topk" in out
    doc = json.loads((pipeline / "bench.json").read_text())
    assert set(doc["median_seconds"]) == {"topk", "batch_topk", "top_afa"}


def test_unknown_flag(capsys):
    assert main(["train", "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err


def test_no_command():
    assert main([]) == 1


def test_missing_data(tmp_path):
    assert main(["train", "--data", str(tmp_path / "none.afae"), "--out", str(tmp_path / "o")]) == 2


def test_corrupt_data(tmp_path):
    bad = tmp_path / "bad.afae"
    bad.write_bytes(b"XXXX" + bytes(16))
    assert main(["eval", "--ckpt", str(tmp_path), "--data", str(bad), "--out", str(tmp_path / "o")]) == 2


def test_numerical_abort(tmp_path):
    data = tmp_path / "x.afae"
    write_embeddings(data, np.random.default_rng(0).standard_normal((64, 4)))
    cfg = tmp_path / "c.json"
    # a 1e300 step sends the weights to overflow on the next forward pass
    cfg.write_text(json.dumps({"train": {"batch_size": 32, "iterations": 5, "h": 8, "lr": 1e300},
                               "activation": {"kind": "relu"}}))
    with np.errstate(all="ignore"):
        assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(tmp_path / "o")]) == 3


def test_unknown_config_key(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"train": {"learning_rate": 1}}))
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1


class TestConfig:
    def test_rejects_unknown_sections(self):
        with pytest.raises(ConfigError):
            parse_config({"optim": {}})

    def test_rejects_bad_types(self):
        with pytest.raises(ConfigError):
            parse_config({"train": {"iterations": "many"}})
        with pytest.raises(ConfigError):
            parse_config({"train": {"iterations": True}})

    def test_rejects_invalid_values(self):
        with pytest.raises(ConfigError):
            parse_config({"activation": {"kind": "topk"}})

    def test_synth_h_follows_d(self):
        assert parse_config({"synth": {"d": 10}}).synth.h == 160

    def test_roundtrip(self):
        doc = defaults()
        assert parse_config(doc).to_dict() == doc


def test_print_defaults_golden(capsys):
    assert main(["--print-defaults"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["train"]["batch_size"] == 4096
    assert doc["train"]["iterations"] == 20000
    assert doc["train"]["alpha_aux"] == 1 / 32
    assert doc["train"]["lambda_afa"] == 1 / 16
    assert doc["train"]["lambda_sparsity"] == 0
    assert doc["train"]["expansion_factor"] == 16 and doc["train"]["h"] is None
    assert doc["synth"]["expansion_factor"] == 16
    assert doc["synth"]["h"] == 16 * doc["synth"]["d"]
    assert doc["activation"]["kind"] == "top_afa"
    assert doc == defaults()


def test_subcommand_print_defaults(capsys):
    assert main(["train", "--data", "x", "--out", "y", "--print-defaults"]) == 0
    assert json.loads(capsys.readouterr().out) == defaults()
