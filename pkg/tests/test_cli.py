import subprocess
import sys

import numpy as np
import pytest

from tsf import io
from tsf.cli import main
from tsf.forward import stability_check

SMALL = """
nx=16
ny=16
nz=8
dx_m=5e-4
dt_s=0.25
frame_dt_s=0.25
n_frames=41
t_on_s=5.0
src_sigma_px=2.0
k_true=1.069e-7
eps_prime_true=2.0
gaussian_sigma_K=0.02
seed=3
epochs=60
k_max=1.6e-7
"""


@pytest.fixture
def cfg(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text(SMALL)
    return str(p)


@pytest.fixture
def bundle(tmp_path, cfg):
    out = tmp_path / "bundle"
    assert main(["simulate", "--config", cfg, "--out", str(out)]) == 0
    return str(out)


class TestUsage:
    @pytest.mark.parametrize("argv", [[], ["frobnicate"], ["recover", "--in", "x"], ["classify", "--manifest", "m",
                                      "--window", "2", "--model", "mlp", "--out", "o"]])
    def test_usage_errors(self, argv, capsys):
        assert main(argv) == 1

    def test_help(self, capsys):
        assert main(["--help"]) == 0
        assert "simulate" in capsys.readouterr().out

    def test_module_entry_point(self):
        r = subprocess.run([sys.executable, "-m", "tsf", "gradcheck", "--config", "small"],
                           capture_output=True, text=True)
        assert r.returncode == 0, r.stderr
        assert "PASS" in r.stdout


class TestGradcheck:
    def test_bundled_small_config(self, capsys):
        assert main(["gradcheck", "--config", "small", "--probes", "32", "--rel-tol", "1e-4"]) == 0
        out = capsys.readouterr().out
        err = float(out.split("max_rel_err=")[1].split()[0])
        assert err <= 1e-4 and "probes=64" in out

    def test_missing_config(self, capsys):
        assert main(["gradcheck", "--config", "/nonexistent.cfg"]) == 2


class TestSimulateInfo:
    def test_info_agrees_with_stability_check(self, bundle, capsys):
        capsys.readouterr()
        assert main(["info", "--in", bundle, "--k", "1.6e-7"]) == 0
        out = dict(line.split("=", 1) for line in capsys.readouterr().out.splitlines())
        rep = stability_check(1.6e-7, io.read_bundle(bundle).grid)
        assert out["stable"] == str(rep.stable).lower()
        assert float(out["cfl_factor"]) == rep.cfl_factor
        assert float(out["peak_rise_K"]) > 1.0
        assert main(["info", "--in", bundle, "--k", "1e-5"]) == 0
        assert "stable=false" in capsys.readouterr().out

    def test_seeded_simulation_is_byte_identical(self, tmp_path, cfg):
        for name in ("a", "b"):
            assert main(["simulate", "--config", cfg, "--out", str(tmp_path / name), "--seed", "9"]) == 0
        assert (tmp_path / "a/frames.bin").read_bytes() == (tmp_path / "b/frames.bin").read_bytes()
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "c"), "--seed", "10"]) == 0
        assert (tmp_path / "a/frames.bin").read_bytes() != (tmp_path / "c/frames.bin").read_bytes()

    def test_noise_override(self, tmp_path, cfg):
        assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "z"), "--noise-sigma", "0"]) == 0
        s = io.read_bundle(tmp_path / "z")
        assert np.all(s.frames[0] == np.float32(293.15))


class TestRecover:
    def test_outputs_and_determinism(self, tmp_path, bundle, cfg, capsys):
        for name in ("r1", "r2"):
            assert main(["recover", "--in", bundle, "--out", str(tmp_path / name), "--config", cfg]) == 0
        out = capsys.readouterr().out
        assert "k_core_mean=" in out and "metal_flag=false" in out
        for f in ("k.csv", "eps_prime.csv", "k.pgm", "eps_prime.pgm", "loss.csv", "summary.txt"):
            assert (tmp_path / "r1" / f).read_bytes() == (tmp_path / "r2" / f).read_bytes()
        assert len((tmp_path / "r1/loss.csv").read_text().splitlines()) == 61

    def test_overrides(self, tmp_path, bundle, cfg):
        assert main(["recover", "--in", bundle, "--out", str(tmp_path / "r"), "--config", cfg,
                     "--epochs", "3", "--lr0", "0.05", "--roi-radius", "4"]) == 0
        summary = (tmp_path / "r/summary.txt").read_text()
        assert "epochs=3" in summary and "roi_pixels=52" in summary

    def test_unstable_config(self, tmp_path, bundle, capsys):
        bad = tmp_path / "bad.cfg"
        bad.write_text(SMALL.replace("k_max=1.6e-7", "k_max=1e-5"))
        assert main(["recover", "--in", bundle, "--out", str(tmp_path / "r"), "--config", str(bad)]) == 3
        assert "CFL factor" in capsys.readouterr().err

    def test_default_bounds_respect_stability(self, tmp_path, bundle):
        assert main(["recover", "--in", bundle, "--out", str(tmp_path / "r"), "--epochs", "2"]) == 0

    def test_corrupt_bundle(self, tmp_path, bundle, capsys):
        fb = tmp_path / "bundle/frames.bin"
        fb.write_bytes(fb.read_bytes()[:100])
        assert main(["recover", "--in", bundle, "--out", str(tmp_path / "r")]) == 2
        assert "expected" in capsys.readouterr().err
        assert main(["info", "--in", bundle]) == 2

    def test_two_layer(self, tmp_path, bundle, cfg, capsys):
        assert main(["recover2", "--in", bundle, "--out", str(tmp_path / "r"), "--thickness-m", "1e-3",
                     "--config", cfg, "--epochs", "20"]) == 0
        assert "k_bottom=" in capsys.readouterr().out
        assert main(["recover2", "--in", bundle, "--out", str(tmp_path / "r"), "--thickness-m", "3e-4",
                     "--config", cfg]) == 2

    def test_baseline(self, tmp_path, bundle, capsys):
        assert main(["baseline2d", "--in", bundle, "--out", str(tmp_path / "b")]) == 0
        assert "k_center=" in capsys.readouterr().out
        assert io.read_map_csv(tmp_path / "b/k_raw.csv").shape == (16, 16)

    def test_missing_beam(self, tmp_path, bundle):
        meta = tmp_path / "bundle/meta.txt"
        meta.write_text("".join(l + "\n" for l in meta.read_text().splitlines() if not l.startswith("src_")))
        assert main(["baseline2d", "--in", bundle, "--out", str(tmp_path / "b")]) == 2
        assert main(["baseline2d", "--in", bundle, "--out", str(tmp_path / "b"), "--center", "7.5", "7.5"]) == 0


class TestClassify:
    def make_manifest(self, tmp_path):
        rng = np.random.default_rng(0)
        lines = ["bundle_path,label,center_x,center_y"]
        for c in range(4):
            for j in range(4):
                d = tmp_path / f"c{c}_{j}"
                d.mkdir()
                io.write_map_csv(np.full((7, 7), (1 + c) * 1e-7) + 1e-9 * rng.normal(size=(7, 7)), d / "k.csv")
                io.write_map_csv(np.full((7, 7), 1.0 + c % 2) + 1e-2 * rng.normal(size=(7, 7)), d / "eps_prime.csv")
                lines.append(f"c{c}_{j},mat{c},3,3")
        (tmp_path / "m.csv").write_text("\n".join(lines) + "\n")
        return str(tmp_path / "m.csv")

    @pytest.mark.parametrize("model", ["centroid", "mlp"])
    def test_loo(self, tmp_path, model, capsys):
        m = self.make_manifest(tmp_path)
        argv = ["classify", "--manifest", m, "--window", "3", "--model", model, "--loo", "--out"]
        assert main(argv + [str(tmp_path / "o1")]) == 0
        assert "accuracy=100.0%" in capsys.readouterr().out
        assert main(argv + [str(tmp_path / "o2")]) == 0
        a = (tmp_path / "o1/confusion.csv").read_bytes()
        assert a == (tmp_path / "o2/confusion.csv").read_bytes()
        assert (tmp_path / "o1/accuracy.csv").read_text().splitlines()[1] == "18,100.0%"

    def test_bad_manifest(self, tmp_path):
        (tmp_path / "m.csv").write_text("bundle_path,label,center_x,center_y\nnope,a,1,1\n")
        assert main(["classify", "--manifest", str(tmp_path / "m.csv"), "--window", "1", "--model",
                     "centroid", "--out", str(tmp_path / "o")]) == 2


@pytest.mark.slow
def test_wood_workflow(tmp_path, capsys):
    assert main(["simulate", "--config", "wood", "--out", str(tmp_path / "b")]) == 0
    assert main(["recover", "--in", str(tmp_path / "b"), "--out", str(tmp_path / "r"), "--config", "wood"]) == 0
    out = capsys.readouterr().out
    k = float(out.split("k_core_mean=")[1].split()[0])
    assert k == pytest.approx(1.069e-7, rel=1e-2)
