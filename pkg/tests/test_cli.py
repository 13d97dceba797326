import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from latentshield.cli import main
from latentshield.imageio import load_image, save_image_png, load_float_sidecar
from latentshield.runconfig import (
    ConfigError,
    config_hash,
    parse_flat_config,
    resolve_config,
)
from latentshield.synthdata import make_test_image


@pytest.fixture()
def png_dir(tmp_path):
    d = tmp_path / "in"
    d.mkdir()
    for i in range(3):
        save_image_png(d / f"img{i}.png", make_test_image(i, 16))
    return d


def run_cli(*argv):
    return main(list(argv))


class TestConfigParsing:
    def test_sections_flatten(self):
        cfg = parse_flat_config("[protect]\nepsilon = 0.05\n# note\n\n[encoder]\nseed=3\n")
        assert cfg == {"protect.epsilon": "0.05", "encoder.seed": "3"}

    def test_bad_lines_rejected(self):
        with pytest.raises(ConfigError, match="key = value"):
            parse_flat_config("epsilon 0.05")
        with pytest.raises(ConfigError, match="duplicate"):
            parse_flat_config("a=1\na=2")

    def test_unknown_keys_rejected_before_compute(self):
        with pytest.raises(ConfigError, match="unknown config keys"):
            resolve_config({"a": "1"}, {"b": "2"}, {})

    def test_flags_override_file(self):
        resolved = resolve_config({"a": "1", "b": "2"}, {"a": "10"}, {"a": "99"})
        assert resolved["a"] == "99" and resolved["b"] == "2"

    def test_hash_stable_under_ordering(self):
        h1 = config_hash({"a": "1", "b": "2"})
        h2 = config_hash({"b": "2", "a": "1"})
        assert h1 == h2
        assert h1 != config_hash({"a": "1", "b": "3"})


class TestProtectCommand:
    def test_outputs_per_input(self, png_dir, tmp_path):
        out = tmp_path / "out"
        code = run_cli("protect", "--in", str(png_dir), "--out", str(out),
                       "--loss", "add-log", "--preset", "micro-4x",
                       "--steps", "8", "--seed", "3", "--no-figures")
        assert code == 0
        assert sorted(p.name for p in out.glob("img*.png")) == \
               ["img0.png", "img1.png", "img2.png"]
        assert len(list(out.glob("*_trajectory.csv"))) == 3
        assert (out / "manifest.csv").is_file()
        assert (out / "resolved_config.txt").is_file()
        manifest = (out / "manifest.csv").read_text().strip().splitlines()
        assert manifest[0] == "input,output,trajectory,config_hash"
        assert len(manifest) == 4

    def test_deterministic_across_processes(self, png_dir, tmp_path):
        outs = []
        env = dict(os.environ, PYTHONPATH="src")
        for name in ("a", "b"):
            out = tmp_path / name
            cmd = [sys.executable, "-m", "latentshield.cli", "protect",
                   "--in", str(png_dir), "--out", str(out), "--preset", "micro-4x",
                   "--steps", "6", "--seed", "11", "--no-figures"]
            res = subprocess.run(cmd, cwd=Path(__file__).resolve().parents[1],
                                 env=env, capture_output=True, text=True)
            assert res.returncode == 0, res.stderr
            outs.append(out)
        for name in ("img0.png", "img1.png", "img2.png", "img0_trajectory.csv"):
            assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()

    def test_unreadable_input_skipped_with_exit_1(self, png_dir, tmp_path, capsys):
        (png_dir / "broken.png").write_bytes(b"not a png")
        out = tmp_path / "out"
        code = run_cli("protect", "--in", str(png_dir), "--out", str(out),
                       "--preset", "micro-4x", "--steps", "4", "--seed", "0",
                       "--no-figures")
        assert code == 1
        captured = capsys.readouterr()
        assert "broken.png" in captured.err

    def test_keep_float_sidecar(self, png_dir, tmp_path):
        out = tmp_path / "out"
        code = run_cli("protect", "--in", str(png_dir), "--out", str(out),
                       "--preset", "micro-4x", "--steps", "4", "--seed", "0",
                       "--keep-float", "--no-figures")
        assert code == 0
        sidecars = sorted(out.glob("*_float.lse1"))
        assert len(sidecars) == 3
        arrays = load_float_sidecar(sidecars[0])
        assert set(arrays) == {"delta", "x_protected"}
        assert float(np.max(np.abs(arrays["delta"]))) <= 0.05

    def test_empty_input_dir_is_config_error(self, tmp_path):
        empty = tmp_path / "empty"
        empty.mkdir()
        code = run_cli("protect", "--in", str(empty), "--out", str(tmp_path / "o"))
        assert code == 2

    def test_env_seed_fallback(self, png_dir, tmp_path, monkeypatch):
        out1, out2 = tmp_path / "e1", tmp_path / "e2"
        monkeypatch.setenv("LATENT_SHIELD_SEED", "77")
        assert run_cli("protect", "--in", str(png_dir), "--out", str(out1),
                       "--preset", "micro-4x", "--steps", "4", "--no-figures") == 0
        assert run_cli("protect", "--in", str(png_dir), "--out", str(out2),
                       "--preset", "micro-4x", "--steps", "4", "--seed", "77",
                       "--no-figures") == 0
        assert (out1 / "img0.png").read_bytes() == (out2 / "img0.png").read_bytes()

    def test_weight_file_matches_preset(self, png_dir, tmp_path):
        from latentshield.encoder import init_encoder, save_encoder
        weights = tmp_path / "enc.lse1"
        save_encoder(init_encoder(7, "micro-4x"), weights)
        by_preset, by_file = tmp_path / "p", tmp_path / "w"
        assert run_cli("protect", "--in", str(png_dir), "--out", str(by_preset),
                       "--preset", "micro-4x", "--encoder-seed", "7",
                       "--steps", "4", "--seed", "0", "--no-figures") == 0
        assert run_cli("protect", "--in", str(png_dir), "--out", str(by_file),
                       "--weights", str(weights),
                       "--steps", "4", "--seed", "0", "--no-figures") == 0
        assert (by_preset / "img0.png").read_bytes() == (by_file / "img0.png").read_bytes()

    def test_figures_written_by_default(self, png_dir, tmp_path):
        out = tmp_path / "out"
        assert run_cli("protect", "--in", str(png_dir), "--out", str(out),
                       "--preset", "micro-4x", "--steps", "4", "--seed", "0") == 0
        assert len(list(out.glob("*_trajectory.png"))) == 3

    def test_unknown_config_key_exit_2(self, png_dir, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("[protect]\nwarp_drive = on\n")
        code = run_cli("protect", "--in", str(png_dir), "--out", str(tmp_path / "o"),
                       "--config", str(cfg))
        assert code == 2

    def test_eight_over_255_budget_variant(self, png_dir, tmp_path):
        out = tmp_path / "out"
        code = run_cli("protect", "--in", str(png_dir), "--out", str(out),
                       "--preset", "micro-4x", "--epsilon", "0.0313",
                       "--steps", "6", "--seed", "1", "--keep-float", "--no-figures")
        assert code == 0
        for sc in out.glob("*_float.lse1"):
            delta = load_float_sidecar(sc)["delta"]
            assert float(np.max(np.abs(delta))) <= 0.0313

    def test_parallel_jobs_match_sequential(self, png_dir, tmp_path):
        # scheduling must not leak into the artifacts (per-image seed
        # streams are position-derived); only the config echo differs
        seq, par = tmp_path / "seq", tmp_path / "par"
        for out, jobs in ((seq, "1"), (par, "2")):
            code = run_cli("protect", "--in", str(png_dir), "--out", str(out),
                           "--preset", "micro-4x", "--steps", "5", "--seed", "4",
                           "--jobs", jobs, "--no-figures")
            assert code == 0
        for name in ("img0.png", "img1.png", "img2.png", "img1_trajectory.csv"):
            assert (seq / name).read_bytes() == (par / name).read_bytes()


class TestStatsCommand:
    def test_identical_dirs_all_zero(self, png_dir, tmp_path):
        out = tmp_path / "stats"
        code = run_cli("stats", "--clean", str(png_dir), "--pert", str(png_dir),
                       "--out", str(out), "--preset", "micro-4x", "--no-figures")
        assert code == 0
        rows = (out / "stats.csv").read_text().strip().splitlines()
        assert len(rows) == 4
        for row in rows[1:]:
            fields = row.split(",")
            assert float(fields[1]) == 0.0 and float(fields[2]) == 0.0

    def test_unmatched_listed_nonzero_exit(self, png_dir, tmp_path, capsys):
        pert = tmp_path / "pert"
        pert.mkdir()
        for name in ("img0.png", "img1.png"):
            save_image_png(pert / name, load_image(png_dir / name))
        code = run_cli("stats", "--clean", str(png_dir), "--pert", str(pert),
                       "--out", str(tmp_path / "s"), "--preset", "micro-4x",
                       "--no-figures")
        assert code == 1
        assert "img2.png" in capsys.readouterr().err

    def test_svg_per_pair(self, png_dir, tmp_path):
        out = tmp_path / "stats"
        code = run_cli("stats", "--clean", str(png_dir), "--pert", str(png_dir),
                       "--out", str(out), "--preset", "micro-4x", "--svg",
                       "--no-figures")
        assert code == 0
        assert len(list(out.glob("*_shift.svg"))) == 3


class TestExperimentCommand:
    def test_mismatch_grid_size(self, tmp_path):
        cfg = tmp_path / "exp.cfg"
        cfg.write_text("\n".join([
            "[experiment]", "seeds = 0,1",
            "[data]", "images = 2", "size = 16", "seed = 9",
            "[train]", "steps = 20", "lr = 0.003", "batch = 1",
            "[protect]", "steps = 6",
            "[eval]", "draws = 6",
            "[mismatch]", "c_explo = 0,1", "defenses = none,pid",
            "pretrain_steps = 30",
        ]) + "\n")
        out = tmp_path / "exp"
        code = run_cli("experiment", "mismatch", "--config", str(cfg),
                       "--out", str(out))
        assert code == 0
        rows = (out / "report.csv").read_text().strip().splitlines()
        assert len(rows) == 1 + 2 * 2 * 2
        assert (out / "summary.json").is_file()
        assert (out / "report_summary.png").is_file()

    def test_adaptive_condition_groups(self, tmp_path):
        cfg = tmp_path / "exp.cfg"
        cfg.write_text("\n".join([
            "[experiment]", "seeds = 0", "figures = false",
            "[data]", "images = 2", "size = 16", "seed = 9",
            "[train]", "steps = 15", "batch = 1",
            "[protect]", "steps = 6",
            "[eval]", "draws = 6",
        ]) + "\n")
        out = tmp_path / "exp"
        code = run_cli("experiment", "adaptive", "--config", str(cfg),
                       "--out", str(out))
        assert code == 0
        rows = (out / "report.csv").read_text().strip().splitlines()[1:]
        conditions = {r.split(",")[1] for r in rows}
        assert len(conditions) == 4

    def test_corruption_grid(self, tmp_path):
        cfg = tmp_path / "exp.cfg"
        cfg.write_text("\n".join([
            "[experiment]", "seeds = 0", "figures = false",
            "[data]", "images = 2", "size = 16", "seed = 9",
            "[train]", "steps = 15", "batch = 1",
            "[protect]", "steps = 6",
            "[eval]", "draws = 6",
            "[corruption]", "kinds = jpeg,smooth_uniform",
        ]) + "\n")
        out = tmp_path / "exp"
        code = run_cli("experiment", "corruption", "--config", str(cfg),
                       "--out", str(out))
        assert code == 0
        rows = (out / "report.csv").read_text().strip().splitlines()[1:]
        # defenses {none, pid} x conditions {identity, jpeg, smooth}
        assert len(rows) == 2 * 3

    def test_invalid_key_rejected_before_compute(self, tmp_path):
        cfg = tmp_path / "exp.cfg"
        cfg.write_text("[mismatch]\nplasma = hot\n")
        code = run_cli("experiment", "mismatch", "--config", str(cfg),
                       "--out", str(tmp_path / "exp"))
        assert code == 2

    def test_jpeg_default_quality_75(self):
        from latentshield.cli import EXPERIMENT_DEFAULTS
        assert EXPERIMENT_DEFAULTS["corruption.jpeg_quality"] == "75"


class TestGradcheckCommand:
    def test_passes_on_shipped_presets(self, capsys):
        code = run_cli("gradcheck", "--preset", "micro-4x", "--seed", "3")
        out = capsys.readouterr().out
        assert code == 0
        assert out.count("PASS") == 8

    def test_unattainable_tolerance_fails(self, capsys):
        code = run_cli("gradcheck", "--preset", "micro-4x", "--seed", "3",
                       "--tol", "1e-12")
        assert code == 1
        assert "FAIL" in capsys.readouterr().out

    def test_corrupt_weight_file_exit_nonzero(self, tmp_path, capsys):
        bad = tmp_path / "weights.lse1"
        bad.write_bytes(b"LSE1XXXX" + b"\x01" * 30)
        code = run_cli("gradcheck", "--preset", "micro-4x", "--weights", str(bad))
        assert code == 2
        assert "failed to load" in capsys.readouterr().err
