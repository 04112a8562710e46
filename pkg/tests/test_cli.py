import json
import os

import numpy as np
import pytest

from spikeslab.cli import main, parse_args, trial_seeds


class TestParsing:
    def test_defaults(self):
        args = parse_args(["bars"])
        assert args.seed == 0 and args.engine == "truncated"
        assert args.h_prime == 5 and args.gamma == 3

    def test_config_file_defaults_cli_wins(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"seed": 42, "iters": 7}))
        args = parse_args(["bars", "--config", str(cfg)])
        assert args.seed == 42 and args.iters == 7
        args = parse_args(["bars", "--config", str(cfg), "--seed", "5"])
        assert args.seed == 5 and args.iters == 7

    def test_missing_config_exit_code(self, tmp_path):
        rc = main(["bars", "--config", str(tmp_path / "nope.json"),
                   "--output-dir", str(tmp_path / "out")])
        assert rc == 4

    def test_invalid_config_exit_code(self, tmp_path):
        cfg = tmp_path / "bad.json"
        cfg.write_text("{not json")
        rc = main(["bars", "--config", str(cfg)])
        assert rc == 2

    def test_trial_seeds_deterministic(self):
        assert trial_seeds(3, 4) == trial_seeds(3, 4)
        assert len(set(trial_seeds(3, 4))) == 4


class TestCommands:
    def test_bars_smoke(self, tmp_path):
        out = tmp_path / "bars"
        rc = main(["bars", "--latents", "6", "--n-points", "120",
                   "--iters", "10", "--h-prime", "4", "--gamma", "3",
                   "--output-dir", str(out)])
        assert rc == 0
        man = json.loads((out / "manifest.json").read_text())
        assert man["command"] == "bars"
        assert "reports.csv" in man["outputs"]
        reports = json.loads((out / "reports.json").read_text())
        names = {r["name"] for r in reports}
        assert {"mean_q", "kl_from_q", "bar_hits"} <= names

    def test_bars_invalid_truncation_exit_code(self, tmp_path):
        rc = main(["bars", "--latents", "6", "--h-prime", "0",
                   "--output-dir", str(tmp_path / "x")])
        assert rc == 2

    def test_recovery_smoke(self, tmp_path):
        out = tmp_path / "rec"
        rc = main(["recovery", "--latents", "4", "--n-values", "200,400",
                   "--iters", "5", "--trials", "2", "--engine", "exact",
                   "--output-dir", str(out)])
        assert rc == 0
        lines = (out / "amari_sweep.csv").read_text().strip().splitlines()
        assert lines[0].startswith("n_points,")
        assert len(lines) == 3

    def test_separation_synthetic_smoke(self, tmp_path):
        out = tmp_path / "sep"
        rc = main(["separation", "--latents", "3", "--n-points", "150",
                   "--iters", "10", "--output-dir", str(out)])
        assert rc == 0
        reports = json.loads((out / "reports.json").read_text())
        assert reports[0]["name"] == "amari"

    def test_separation_missing_sources_exit_code(self, tmp_path):
        rc = main(["separation", "--sources",
                   str(tmp_path / "nope.csv"),
                   "--output-dir", str(tmp_path / "y")])
        assert rc == 4

    def test_posteriors_smoke(self, tmp_path):
        out = tmp_path / "post"
        rc = main(["posteriors", "--latents", "5", "--n-points", "40",
                   "--iters", "5", "--output-dir", str(out)])
        assert rc == 0
        lines = (out / "popcount_mass.csv").read_text().strip().splitlines()
        vals = np.array([[float(v) for v in ln.split(",")[1:]]
                         for ln in lines[1:]])
        np.testing.assert_allclose(vals.sum(axis=1), 1.0, atol=1e-12)
        marg = (out / "marginals.csv").read_text().strip().splitlines()
        assert len(marg) == 41

    def test_denoise_smoke(self, tmp_path):
        from spikeslab.denoise import GrayImage, write_pgm
        rng = np.random.default_rng(0)
        img = GrayImage(np.round(rng.uniform(0, 255, (24, 24))))
        ipath = tmp_path / "in.pgm"
        write_pgm(img, ipath)
        out = tmp_path / "den"
        rc = main(["denoise", "--image", str(ipath), "--crop", "16",
                   "--latents", "8", "--h-prime", "4", "--gamma", "3",
                   "--iters", "3", "--output-dir", str(out)])
        assert rc == 0
        assert (out / "denoised_trial0.pgm").exists()
        assert (out / "sparsity_trial0.csv").exists()
        reports = json.loads((out / "reports.json").read_text())
        names = {r["name"] for r in reports}
        assert "psnr_gain_db" in names

    def test_denoise_missing_image_exit_code(self, tmp_path):
        rc = main(["denoise", "--image", str(tmp_path / "no.pgm"),
                   "--output-dir", str(tmp_path / "z")])
        assert rc == 4

    def test_manifest_written_first_and_updated(self, tmp_path):
        out = tmp_path / "m"
        rc = main(["posteriors", "--latents", "4", "--n-points", "20",
                   "--iters", "2", "--output-dir", str(out)])
        assert rc == 0
        man = json.loads((out / "manifest.json").read_text())
        assert man["version"]
        assert man["trial_seeds"]
        for name in man["outputs"]:
            assert (out / name).exists()
