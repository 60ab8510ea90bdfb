"""End-to-end command-line tests on a small configuration."""

import csv
import json
import math

import pytest

from cbnn.checkpoint import load_checkpoint
from cbnn.cli import main

SMALL_CONFIG = {
    "data": {
        "csv": "data/surrogate.csv",
        "currents": [0.5, 2.0],
        "temperatures": [283.0, 303.0],
        "soc_points": 50,
        "voltage_noise": 0.003,
        "thermal_noise": 40.0,
        "seed": 5,
    },
    "model": {"hidden_layers": [8], "activation": "tanh"},
    "train": {
        "epochs": 3,
        "batch_size": 64,
        "learning_rate": 0.002,
        "mc_samples_per_step": 2,
        "seed": 5,
        "tolerance_lr_scale": 10.0,
    },
    "eval": {"n_samples": 200, "seed": 0, "violation_points": 40},
}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Generated dataset plus one trained checkpoint of each kind."""
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "cfg.json"
    cfg = json.loads(json.dumps(SMALL_CONFIG))
    cfg["data"]["csv"] = str(root / "data" / "surrogate.csv")
    cfg_path.write_text(json.dumps(cfg))
    assert main(["generate", "--config", str(cfg_path)]) == 0
    for kind in ("bnn", "bcpnn"):
        code = main(
            ["train", "--model", kind, "--config", str(cfg_path), "--out", str(root / f"{kind}.json")]
        )
        assert code == 0
    return root, cfg_path


class TestGenerate:
    def test_writes_expected_rows(self, workdir):
        root, _ = workdir
        with open(root / "data" / "surrogate.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert len(rows) == 1 + 2 * 2 * 50
        assert rows[0][-1] == "split"

    def test_regeneration_is_byte_identical(self, workdir, tmp_path):
        root, cfg_path = workdir
        cfg = json.loads(cfg_path.read_text())
        cfg["data"]["csv"] = str(tmp_path / "again.csv")
        p2 = tmp_path / "cfg2.json"
        p2.write_text(json.dumps(cfg))
        assert main(["generate", "--config", str(p2)]) == 0
        a = (root / "data" / "surrogate.csv").read_bytes()
        b = (tmp_path / "again.csv").read_bytes()
        assert a == b

    def test_malformed_config_names_key(self, tmp_path, capsys):
        p = tmp_path / "bad.json"
        p.write_text(json.dumps({"data": {"csv": 1, "soc_points": "many"}}))
        assert main(["generate", "--config", str(p)]) == 1
        assert "soc_points" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path):
        assert main(["generate", "--config", str(tmp_path / "none.json")]) == 1

    def test_invalid_json(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{not json")
        assert main(["generate", "--config", str(p)]) == 1


class TestTrain:
    def test_bnn_checkpoint_has_no_tolerance(self, workdir):
        root, _ = workdir
        ck = load_checkpoint(root / "bnn.json")
        assert not ck["state"].has_tolerance
        ck = load_checkpoint(root / "bcpnn.json")
        assert ck["state"].has_tolerance

    def test_trace_written(self, workdir):
        root, _ = workdir
        with open(root / "bcpnn.trace.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["epoch", "nll_term", "kl_theta", "kl_rho", "total"]
        assert len(rows) == 1 + SMALL_CONFIG["train"]["epochs"]
        for row in rows[1:]:
            total = float(row[1]) + float(row[2]) + float(row[3])
            assert math.isfinite(total)
            assert abs(total - float(row[4])) < 1e-9

    def test_deterministic_retrain(self, workdir, tmp_path):
        root, cfg_path = workdir
        out = tmp_path / "again.json"
        assert main(["train", "--model", "bcpnn", "--config", str(cfg_path), "--out", str(out)]) == 0
        assert out.read_bytes() == (root / "bcpnn.json").read_bytes()
        assert (tmp_path / "again.trace.csv").read_bytes() == (root / "bcpnn.trace.csv").read_bytes()

    def test_unknown_model_rejected(self, workdir):
        root, cfg_path = workdir
        assert main(["train", "--model", "gp", "--config", str(cfg_path), "--out", "x.json"]) == 1


class TestEvaluate:
    def test_report_structure(self, workdir, tmp_path):
        root, cfg_path = workdir
        out = tmp_path / "eval"
        code = main(
            [
                "evaluate",
                "--ckpt", str(root / "bcpnn.json"),
                "--data", str(root / "data" / "surrogate.csv"),
                "--out", str(out),
                "--config", str(cfg_path),
            ]
        )
        assert code == 0
        report = json.loads((out / "report.json").read_text())
        assert report["model"] == "bcpnn"
        assert set(report["violation"]["per_constraint"][0]) == {"constraint", "mean", "std", "median"}
        assert len(report["per_output"]) == 8
        # lognormal summary invariant
        for row in report["tolerance_posterior"]:
            e_r = math.exp(row["mu_rho"] + row["sigma_rho"] ** 2 / 2)
            assert abs(row["mean_r"] - e_r) < 1e-10 * max(e_r, 1.0)
            std_r = e_r * math.sqrt(math.expm1(row["sigma_rho"] ** 2))
            assert abs(row["std_r"] - std_r) < 1e-10 * max(std_r, 1.0)
        assert (out / "violations_samples.csv").exists()
        assert (out / "violations_hist.csv").exists()
        assert (out / "metrics_per_output.csv").exists()

    def test_bnn_report_has_no_tolerance_section(self, workdir, tmp_path):
        root, cfg_path = workdir
        out = tmp_path / "eval_bnn"
        assert main(
            [
                "evaluate",
                "--ckpt", str(root / "bnn.json"),
                "--data", str(root / "data" / "surrogate.csv"),
                "--out", str(out),
                "--config", str(cfg_path),
            ]
        ) == 0
        report = json.loads((out / "report.json").read_text())
        assert "tolerance_posterior" not in report
        assert report["violation"]["per_constraint"][0]["mean"] > 0

    def test_deterministic_report(self, workdir, tmp_path):
        root, cfg_path = workdir
        outs = []
        for i in range(2):
            out = tmp_path / f"ev{i}"
            assert main(
                [
                    "evaluate",
                    "--ckpt", str(root / "bcpnn.json"),
                    "--data", str(root / "data" / "surrogate.csv"),
                    "--out", str(out),
                    "--config", str(cfg_path),
                ]
            ) == 0
            outs.append((out / "report.json").read_bytes())
        assert outs[0] == outs[1]

    def test_incompatible_dataset_rejected(self, workdir, tmp_path, capsys):
        root, cfg_path = workdir
        # regenerate with a different seed: normalization stats change
        cfg = json.loads(cfg_path.read_text())
        cfg["data"]["csv"] = str(tmp_path / "other.csv")
        cfg["data"]["seed"] = 6
        p2 = tmp_path / "cfg2.json"
        p2.write_text(json.dumps(cfg))
        assert main(["generate", "--config", str(p2)]) == 0
        code = main(
            [
                "evaluate",
                "--ckpt", str(root / "bcpnn.json"),
                "--data", str(tmp_path / "other.csv"),
                "--out", str(tmp_path / "ev"),
            ]
        )
        assert code == 1

    def test_missing_checkpoint(self, workdir, tmp_path):
        root, _ = workdir
        code = main(
            [
                "evaluate",
                "--ckpt", str(tmp_path / "none.json"),
                "--data", str(root / "data" / "surrogate.csv"),
                "--out", str(tmp_path / "ev"),
            ]
        )
        assert code == 1


class TestDecompose:
    def test_csv_terms_sum_to_total(self, workdir, tmp_path):
        root, cfg_path = workdir
        out = tmp_path / "dec"
        assert main(
            [
                "decompose",
                "--ckpt", str(root / "bcpnn.json"),
                "--data", str(root / "data" / "surrogate.csv"),
                "--out", str(out),
                "--config", str(cfg_path),
            ]
        ) == 0
        with open(out / "decomposition.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 8
        for row in rows:
            total = float(row["total"])
            s = (
                float(row["aleatoric"])
                - float(row["constraint_reduction"])
                + float(row["epistemic"])
                + float(row["tolerance_uncertainty"])
                + float(row["interaction"])
            )
            assert abs(s - total) < max(6e-3 * abs(total), 1e-9)
