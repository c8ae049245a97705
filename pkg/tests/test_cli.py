"""Command-line entry point: configuration, exit codes, manifests and exports."""

import json
import os

import numpy as np
import pytest

from convexint.cli import RunConfig, main, read_manifest, target_from_expr
from convexint.torus_field import GridSpec, load_fields

SMALL = """
[grid]
N = 16
n_t = 9
[scheme]
Q = 0
[output]
export_times = 0, 0.5, 1
residual_family = 6
"""


def write(tmp_path, text, name="run.ini"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


class TestConfig:
    def test_defaults(self):
        cfg = RunConfig.load()
        assert (cfg.d, cfg.N, cfg.n_t) == (3, 128, 33)
        assert cfg.p == pytest.approx(4 / 3)
        assert cfg.scheme["lam_policy"] == "auto"
        assert cfg.scheme_config().c == pytest.approx(4.0)

    def test_overrides_and_variant(self, tmp_path):
        path = write(tmp_path, "[exponents]\nd = 5\np = 3/2\n[scheme]\nlam_policy = 2, 4\n")
        cfg = RunConfig.load(path, variant="diffusion")
        assert cfg.d == 5 and cfg.p == 1.5
        assert cfg.variant == "diffusion"
        assert cfg.scheme["lam_policy"] == [2, 4]

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            RunConfig.load(str(tmp_path / "nope.ini"))

    def test_target_expression(self):
        target = target_from_expr("2 + (1 - t) * sin(2 * pi * x1)", 3)
        grid = GridSpec(3, 8)
        vals = target.sample(0.0, grid)
        assert vals.shape == (8, 8, 8)
        assert vals[2, 0, 0] == pytest.approx(3.0)
        assert target.sample_dt(0.5, grid)[2, 0, 0] == pytest.approx(-1.0, abs=1e-9)

    def test_target_has_no_builtins(self):
        target = target_from_expr("__import__('os')", 3)
        with pytest.raises(NameError):
            target.sample(0.0, GridSpec(3, 8))


class TestVerifyLemmas:
    def test_default_passes(self, tmp_path, capsys):
        assert main(["verify-lemmas", "--out", str(tmp_path)]) == 0
        assert "checks passed" in capsys.readouterr().out
        manifest = read_manifest(str(tmp_path))
        assert manifest["report"]["passed"]
        assert os.path.exists(tmp_path / manifest["report"]["csv"])

    def test_unresolvable_lambda(self, tmp_path, capsys):
        path = write(tmp_path, "[lemmas]\nN = 8\nlambdas = 32\n")
        assert main(["verify-lemmas", "--config", path]) == 2
        assert "ResolutionTooCoarse" in capsys.readouterr().err


class TestBuildMikado:
    @pytest.fixture
    def quick(self, tmp_path):
        return write(tmp_path, "[mikado]\nquadrature_N = 262144\nexport_N = 32\n", "mk.ini")

    def test_concentration_too_small(self, quick, capsys):
        assert main(["build-mikado", "--config", quick, "--mu", "4"]) == 2
        assert "ConcentrationTooSmall" in capsys.readouterr().err

    def test_inadmissible(self, quick, capsys):
        assert main(["build-mikado", "--config", quick, "--p", "2", "--p-tilde", "2"]) == 2
        assert "InadmissibleExponents" in capsys.readouterr().err

    def test_exports(self, quick, tmp_path):
        out = tmp_path / "mk"
        assert main(["build-mikado", "--config", quick, "--mu", "16", "--out", str(out)]) == 0
        manifest = read_manifest(str(out))
        assert sorted(manifest["blocks"]) == ["1", "2", "3"]
        values, grid, n_comp, _ = load_fields(str(out / manifest["blocks"]["2"]["W"]))
        assert (grid.N, n_comp) == (32, 3)
        assert main(["report", "--out", str(out)]) == 0


class TestScheme:
    def test_mean_drift_target(self, tmp_path, capsys):
        path = write(tmp_path, SMALL + "[target]\nexpr = 2 + t + 0 * x1\n")
        assert main(["iterate", "--config", path, "--out", str(tmp_path / "o")]) == 2
        assert "MeanDrift" in capsys.readouterr().err

    def test_zero_steps_exports_initial_data(self, tmp_path):
        out = tmp_path / "q0"
        assert main(["iterate", "--config", write(tmp_path, SMALL), "--out", str(out)]) == 0
        manifest = read_manifest(str(out))
        assert [rec["q"] for rec in manifest["steps"]] == [0]
        files = manifest["steps"][0]["exports"]["files"]
        rho, grid, _, n_t = load_fields(str(out / files["rho"]))
        assert n_t == 3 and grid.N == 16
        assert manifest["steps"][0]["weak_residual"] < 1e-3
        assert (out / "norms.csv").exists()

    def test_manifest_is_reproducible(self, tmp_path):
        path = write(tmp_path, SMALL)
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["iterate", "--config", path, "--out", str(a), "--seed", "7"]) == 0
        assert main(["iterate", "--config", path, "--out", str(b), "--seed", "7"]) == 0
        assert (a / "manifest.json").read_bytes() == (b / "manifest.json").read_bytes()
        for rel in json.loads((a / "manifest.json").read_text())["steps"][0]["exports"]["files"].values():
            assert (a / rel).read_bytes() == (b / rel).read_bytes()

    def test_single_step_and_report(self, tmp_path, capsys):
        path = write(tmp_path, SMALL + "[step]\nlam = 2\n")
        out = tmp_path / "s"
        code = main(["step", "--config", path, "--out", str(out)])
        manifest = read_manifest(str(out))
        assert [rec["q"] for rec in manifest["steps"]] == [0, 1]
        rec = manifest["steps"][1]
        assert rec["params"]["lam"] == 2 and rec["params"]["mu"] == 16
        assert code == (0 if rec["report"]["passed"] else 2)
        assert (out / rec["report"]["csv"]).exists()
        capsys.readouterr()
        assert main(["report", "--out", str(out)]) == code
        assert "exported fields load cleanly" in capsys.readouterr().out

    def test_bad_seed(self):
        assert main(["verify-lemmas", "--seed", "-1"]) == 2

    def test_exported_rho_matches_target_at_endpoints(self, tmp_path):
        out = tmp_path / "e"
        main(["iterate", "--config", write(tmp_path, SMALL), "--out", str(out)])
        rel = read_manifest(str(out))["steps"][0]["exports"]["files"]["rho"]
        rho, grid, *_ = load_fields(str(out / rel))
        x = grid.coords()
        expected = np.broadcast_to(np.sin(2 * np.pi * x[0]) + 2.0, grid.shape)
        np.testing.assert_allclose(rho[0, 0], expected, atol=1e-14)
