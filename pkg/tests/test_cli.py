import csv
import json

import numpy as np
import pytest

from vtae import cli
from vtae.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK

from conftest import run_cli
from helpers import reference_text


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


class TestConfig:
    def test_unknown_keys_listed(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"train": {"lr": 1e-3, "bogus": 1}, "extra": 2}))
        assert run_cli("train", "--config", cfg, "--out", tmp_path / "o") == EXIT_CONFIG
        err = capsys.readouterr().err
        assert "extra" in err and "train.bogus" in err

    def test_invalid_json(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text("{not json")
        assert run_cli("train", "--config", cfg, "--out", tmp_path / "o") == EXIT_CONFIG

    def test_missing_config_file(self, tmp_path):
        assert run_cli("train", "--config", tmp_path / "nope.json", "--out", tmp_path) == EXIT_CONFIG

    def test_flags_override_file(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"seed": 3, "train": {"epochs": 7}}))
        args = cli.build_parser().parse_args(["train", "--config", str(cfg), "--epochs", "2"])
        resolved = cli.resolve_config(args)
        assert resolved["seed"] == 3 and resolved["train"]["epochs"] == 2

    def test_defaults(self):
        cfg = cli.default_config()
        assert cfg["diagnose"]["samples"] == 8000
        assert "8,000 randomly generated samples" in reference_text()
        assert cfg["evaluate"]["levels"] == [0.1, 0.25, 0.4]

    def test_mnist_without_data_dir(self, tmp_path, capsys):
        assert run_cli("train", "--out", tmp_path) == EXIT_DATA
        assert "--data-dir" in capsys.readouterr().err

    def test_checkpoint_required(self, tmp_path):
        assert run_cli("diagnose", "--out", tmp_path) == EXIT_CONFIG


class TestTrain:
    def test_outputs(self, donut_run):
        rows = read_csv(donut_run / "metrics.csv")
        assert rows[0] == ["epoch", "elbo", "kl", "recon", "grad_ratio"]
        assert len(rows) == 31
        man = json.loads((donut_run / "manifest.json").read_text())
        assert man["command"] == "train" and "metrics.csv" in man["outputs"]
        assert (donut_run / "checkpoint" / "manifest.json").exists()

    def test_lr_zero_warns_and_keeps_parameters(self, tmp_path, caplog):
        from vtae.vae import load_checkpoint

        with caplog.at_level("WARNING"):
            code = run_cli("train", "--dataset", "donut", "--lr", 0, "--epochs", 2, "--out", tmp_path, "--no-plots")
        assert code == EXIT_OK
        assert any("learning rate is 0" in r.message for r in caplog.records)
        model, _ = load_checkpoint(tmp_path / "checkpoint")
        fresh = cli.VaeModel(model.arch, seed=0)
        for a, b in zip(model.parameters(), fresh.parameters()):
            assert np.array_equal(a.data, b.data)

    def test_training_plot(self, tmp_path):
        assert run_cli("train", "--dataset", "donut", "--epochs", 1, "--out", tmp_path) == EXIT_OK
        assert (tmp_path / "training.png").read_bytes()[:4] == b"\x89PNG"


class TestInterpolate:
    def test_equal_endpoints_constant_curve(self, donut_run, tmp_path):
        code = run_cli("interpolate", "--checkpoint", donut_run / "checkpoint", "--out", tmp_path,
                       "--endpoints", "5,5", "--steps", 5, "--no-plots")
        assert code == EXIT_OK
        rows = read_csv(tmp_path / "pair00_geodesic.csv")
        body = np.array(rows[1:], dtype=float)
        assert np.all(body[:, 1] == 0.0)
        assert np.all(body[:, 2:] == body[0, 2:])

    def test_schema_and_plots(self, donut_run, tmp_path):
        code = run_cli("interpolate", "--checkpoint", donut_run / "checkpoint", "--out", tmp_path,
                       "--z1=-1,0.5", "--z2=1,0.5", "--steps", 20)
        assert code == EXIT_OK
        rows = read_csv(tmp_path / "pair00_geodesic.csv")
        assert rows[0] == ["s", "speed", "g_1", "g_2"] and all(len(r) == 2 + 2 for r in rows)
        assert (tmp_path / "pair00_paths.png").exists() and (tmp_path / "pair00_speed.png").exists()

    def test_wrong_latent_size(self, donut_run, tmp_path):
        code = run_cli("interpolate", "--checkpoint", donut_run / "checkpoint", "--out", tmp_path,
                       "--z1", "1,2,3", "--z2", "0,0,0")
        assert code == EXIT_CONFIG

    def test_index_out_of_range(self, donut_run, tmp_path):
        code = run_cli("interpolate", "--checkpoint", donut_run / "checkpoint", "--out", tmp_path,
                       "--endpoints", "0,99999")
        assert code == EXIT_CONFIG


class TestDiagnose:
    def test_flat_decoder_constant_condition(self, flat_checkpoint, tmp_path):
        code = run_cli("diagnose", "--checkpoint", flat_checkpoint, "--out", tmp_path, "--samples", 300)
        assert code == EXIT_OK
        rows = read_csv(tmp_path / "diagnostics.csv")
        assert rows[0] == ["z_index", "condition_number", "mf", "normalized_mf"]
        body = np.array(rows[1:], dtype=float)
        assert len(body) == 300
        assert np.ptp(body[:, 1]) == 0.0
        assert abs(body[:, 3].mean() - 1.0) < 1e-12
        assert (tmp_path / "diagnostics.png").exists()

    def test_normalized_mf_mean_on_trained(self, donut_run, tmp_path):
        out = cli.main(["diagnose", "--checkpoint", str(donut_run / "checkpoint"), "--out", str(tmp_path),
                        "--samples", "500", "--no-plots"])
        assert out == EXIT_OK
        body = np.array(read_csv(tmp_path / "diagnostics.csv")[1:], dtype=float)
        assert abs(body[:, 3].mean() - 1.0) < 1e-12

    def test_bad_sample_count(self, flat_checkpoint, tmp_path):
        assert run_cli("diagnose", "--checkpoint", flat_checkpoint, "--out", tmp_path, "--samples", 0) == EXIT_CONFIG


class TestEvaluate:
    def test_point_model(self, donut_run, tmp_path):
        code = run_cli("evaluate", "--checkpoint", donut_run / "checkpoint", "--out", tmp_path, "--iw-k", 5)
        assert code == EXIT_OK
        rows = read_csv(tmp_path / "iw_loglik.csv")
        assert rows[0] == ["split", "index", "iw_loglik", "bits_per_dim"] and len(rows) == 101

    def test_empty_split_writes_nothing(self, mnist_dir, tmp_path, capsys):
        from vtae import datahub

        ck = tmp_path / "train"
        assert run_cli("train", "--data-dir", mnist_dir, "--n-train", 64, "--epochs", 1, "--out", ck,
                       "--no-plots") == EXIT_OK
        only3 = tmp_path / "only3"
        only3.mkdir()
        ds = datahub.Dataset(np.zeros((4, 1, 28, 28)), np.full(4, 3), split="test")
        datahub.write_idx(ds, *(only3 / n for n in datahub.IDX_NAMES["test"]))
        out = tmp_path / "eval"
        code = run_cli("evaluate", "--checkpoint", ck / "checkpoint", "--out", out,
                       "--data-dir", only3, "--holdout-digit", 3)
        assert code == EXIT_DATA
        assert "empty" in capsys.readouterr().err
        assert not out.exists()

    def test_image_model_reports(self, mnist_dir, tmp_path):
        ck = tmp_path / "train"
        assert run_cli("train", "--data-dir", mnist_dir, "--n-train", 64, "--epochs", 1, "--out", ck,
                       "--no-plots", "--holdout-digit", 3) == EXIT_OK
        out = tmp_path / "eval"
        code = run_cli("evaluate", "--checkpoint", ck / "checkpoint", "--out", out, "--iw-k", 3,
                       "--levels", "0.1,0.4")
        assert code == EXIT_OK
        for name in ("iw_loglik.csv", "denoise_gaussian.csv", "denoise_salt-pepper.json", "roc.csv",
                     "roc.json", "denoise.png", "roc.png"):
            assert (out / name).exists(), name
        roc = json.loads((out / "roc.json").read_text())
        assert "digit 3" in roc["protocol"] and 0.0 <= roc["auc"] <= 1.0


def test_prepare_sample(tmp_path, capsys):
    pytest.importorskip("mlxtend")
    assert run_cli("prepare-sample", tmp_path) == EXIT_OK
    assert (tmp_path / "t10k-images-idx3-ubyte").exists() or any(tmp_path.iterdir())
