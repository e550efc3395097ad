import json
import re
from pathlib import Path

import numpy as np
import pytest

from mobflow.cli import main, run_command
from mobflow.config import InitialSpec, build_initial, parse_config
from mobflow.errors import ConfigError
from mobflow.grid import Grid
from mobflow.plotting import emit_plot

MINIMAL = """
command = "jko"

[domain]
extents = [1.0]
cells = [32]

[model]
p = 1.5
alpha = 0.5
chi = 1.0
eps = 1e-2

[discretization]
tau = 1e-3
t_end = 2e-3
n_t = 4

[solver]
max_iter = 1200
tol = 1e-7

[initial.u]
preset = "cosine-perturbed"
amplitude = 0.2

[initial.v]
preset = "cosine-perturbed"
amplitude = 0.2
normalize = false
"""


def write_config(tmp_path, text=MINIMAL, name="run.toml"):
    path = tmp_path / name
    path.write_text(text)
    return path


class TestPresets:
    def test_uniform_probability(self):
        g = Grid((2.0,), (32,))
        f = build_initial(g, InitialSpec(preset="uniform"))
        assert abs(f.mass() - 1.0) <= 1e-12
        assert np.allclose(f.values, 0.5)

    def test_cosine_perturbed_mass(self):
        g = Grid((1.0,), (32,))
        f = build_initial(g, InitialSpec(preset="cosine-perturbed", amplitude=0.3))
        assert abs(f.mass() - 1.0) <= 1e-12
        assert f.min() > 0

    def test_bump_support(self):
        g = Grid((1.0,), (64,))
        f = build_initial(g, InitialSpec(preset="bump", center=(0.3,), width=0.2))
        x = g.axis_centers(0)
        assert np.all(f.values[np.abs(x - 0.3) > 0.12] == 0.0)
        assert abs(f.mass() - 1.0) <= 1e-12

    def test_two_bumps(self):
        g = Grid((1.0,), (64,))
        f = build_initial(g, InitialSpec(preset="two-bumps", centers=(0.3, 0.6), width=0.2))
        assert abs(f.mass() - 1.0) <= 1e-12

    def test_gaussian_2d(self):
        g = Grid((1.0, 1.0), (16, 16))
        f = build_initial(g, InitialSpec(preset="gaussian-bump", center=(0.5, 0.5), width=0.4))
        assert abs(f.mass() - 1.0) <= 1e-12

    def test_unknown_preset(self):
        g = Grid((1.0,), (16,))
        with pytest.raises(ConfigError):
            build_initial(g, InitialSpec(preset="nope"))


class TestParseConfig:
    def test_minimal_with_defaults(self, tmp_path):
        spec = parse_config(write_config(tmp_path))
        assert spec.command == "jko"
        assert spec.grid.cells == (32,)
        assert spec.params.alpha == 0.5
        assert spec.sweeps_max == 5  # documented default
        assert spec.stride == 1

    def test_bad_alpha_reported_with_field_path(self, tmp_path):
        bad = MINIMAL.replace("alpha = 0.5", "alpha = 1.2")
        with pytest.raises(ConfigError, match=r"model: alpha must lie in \(0,1\)"):
            parse_config(write_config(tmp_path, bad))

    def test_uncovered_regime_rejected_without_flag(self, tmp_path):
        # p below the equality case with alpha under the window threshold
        bad = MINIMAL.replace("p = 1.5", "p = 1.4")
        with pytest.raises(ConfigError, match="critical"):
            parse_config(write_config(tmp_path, bad))
        spec = parse_config(write_config(tmp_path, bad), allow_uncovered=True)
        assert spec.allow_uncovered

    def test_multiple_violations_collected(self, tmp_path):
        bad = MINIMAL.replace("alpha = 0.5", "alpha = 1.2").replace("tau = 1e-3", "tau = -1.0")
        with pytest.raises(ConfigError) as info:
            parse_config(write_config(tmp_path, bad))
        msg = str(info.value)
        assert "model:" in msg and "discretization.tau" in msg

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            parse_config(tmp_path / "absent.toml")

    def test_overrides(self, tmp_path):
        spec = parse_config(write_config(tmp_path), out_dir=tmp_path / "o", seed=7)
        assert spec.out_dir == tmp_path / "o"
        assert spec.seed == 7

    def test_output_dir_must_be_a_directory(self, tmp_path):
        blocker = tmp_path / "blocker"
        blocker.write_text("not a directory")
        with pytest.raises(ConfigError, match="output.dir"):
            parse_config(write_config(tmp_path), out_dir=blocker)


class TestRunCommand:
    def test_jko_steady_run(self, tmp_path):
        text = MINIMAL.replace('preset = "cosine-perturbed"', 'preset = "uniform"')
        spec = parse_config(write_config(tmp_path, text), out_dir=tmp_path / "out")
        assert run_command(spec) == 0
        out = tmp_path / "out"
        for name in ("manifest.json", "report.json", "energy.svg", "mass.svg", "norms.svg"):
            assert (out / name).exists()
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["regime"] == "Thm11"
        assert manifest["spec"]["tau"] == 1e-3
        diag = json.loads((out / "report.json").read_text())
        assert diag["passed"] is True
        # steady data: the recorded energies form a flat line
        energies = [row["E"] for row in manifest["diagnostics"]]
        assert max(energies) - min(energies) <= 1e-8

    def test_rerun_is_bit_identical(self, tmp_path):
        spec_a = parse_config(write_config(tmp_path), out_dir=tmp_path / "a", seed=3)
        spec_b = parse_config(write_config(tmp_path), out_dir=tmp_path / "b", seed=3)
        assert run_command(spec_a) == 0
        assert run_command(spec_b) == 0
        for name in ["report.json", "diagnostics.csv"] + [
            p.name for p in (tmp_path / "a").glob("u_*.csv")
        ]:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_reference_and_compare(self, tmp_path):
        jko_spec = parse_config(write_config(tmp_path), out_dir=tmp_path / "jko")
        assert run_command(jko_spec) == 0
        ref_text = MINIMAL.replace('command = "jko"', 'command = "reference"')
        ref_spec = parse_config(write_config(tmp_path, ref_text), out_dir=tmp_path / "ref")
        assert run_command(ref_spec) == 0
        cmp_text = (
            MINIMAL.replace('command = "jko"', 'command = "compare"')
            + f'\n[compare]\na = "{tmp_path / "jko"}"\nb = "{tmp_path / "ref"}"\n'
        )
        cmp_spec = parse_config(write_config(tmp_path, cmp_text), out_dir=tmp_path / "cmp")
        assert run_command(cmp_spec) == 0
        assert (tmp_path / "cmp" / "discrepancy.csv").exists()
        assert (tmp_path / "cmp" / "discrepancy.svg").exists()
        payload = json.loads((tmp_path / "cmp" / "discrepancy.json").read_text())
        assert payload["u_diff_max"] < 0.05

    def test_wdist_command(self, tmp_path):
        text = MINIMAL.replace('command = "jko"', 'command = "wdist"') + (
            '\n[initial.mu0]\npreset = "uniform"\n'
            '[initial.mu1]\npreset = "cosine-perturbed"\namplitude = 0.1\n'
        )
        spec = parse_config(write_config(tmp_path, text), out_dir=tmp_path / "w")
        assert run_command(spec) == 0
        result = json.loads((tmp_path / "w" / "distance.json").read_text())
        assert result["value"] > 0
        assert (tmp_path / "w" / "rho_00000.csv").exists()

    def test_diagnose_command(self, tmp_path):
        jko_spec = parse_config(write_config(tmp_path), out_dir=tmp_path / "jko")
        assert run_command(jko_spec) == 0
        text = MINIMAL.replace('command = "jko"', 'command = "diagnose"') + (
            f'\n[diagnose]\ntrajectory = "{tmp_path / "jko"}"\n'
        )
        spec = parse_config(write_config(tmp_path, text), out_dir=tmp_path / "diag")
        assert run_command(spec) == 0
        assert (tmp_path / "diag" / "report.json").exists()

    def test_diagnose_failure_exit_code(self, tmp_path):
        jko_spec = parse_config(write_config(tmp_path), out_dir=tmp_path / "jko")
        assert run_command(jko_spec) == 0
        # corrupt the recorded mass so the conservation check trips
        manifest_path = tmp_path / "jko" / "manifest.json"
        manifest = json.loads(manifest_path.read_text())
        manifest["diagnostics"][1]["mass"] = 2.0
        manifest_path.write_text(json.dumps(manifest))
        text = MINIMAL.replace('command = "jko"', 'command = "diagnose"') + (
            f'\n[diagnose]\ntrajectory = "{tmp_path / "jko"}"\n'
        )
        spec = parse_config(write_config(tmp_path, text), out_dir=tmp_path / "diag")
        assert run_command(spec) == 4

    def test_sweep_command(self, tmp_path):
        text = MINIMAL.replace('command = "jko"', 'command = "sweep"') + (
            "\n[sweep]\nparameter = 'tau'\nvalues = [2e-3, 1e-3]\n"
        )
        spec = parse_config(write_config(tmp_path, text), out_dir=tmp_path / "sweep")
        assert run_command(spec) == 0
        rows = (tmp_path / "sweep" / "sweep.csv").read_text().strip().splitlines()
        assert len(rows) == 3  # header + one row per value
        assert (tmp_path / "sweep" / "residuals.svg").exists()

    def test_solver_failure_exit_code(self, tmp_path):
        # a fixed dt far above the stability bound must abort with code 3
        text = MINIMAL.replace('command = "jko"', 'command = "reference"').replace(
            "t_end = 2e-3", "t_end = 2e-3\ndt = 10.0"
        )
        spec = parse_config(write_config(tmp_path, text), out_dir=tmp_path / "fail")
        assert run_command(spec) == 3
        manifest = json.loads((tmp_path / "fail" / "manifest.json").read_text())
        assert manifest["failed_stage"] == "reference"


class TestMain:
    def test_exit_code_for_bad_config(self, tmp_path, capsys):
        bad = MINIMAL.replace("alpha = 0.5", "alpha = 1.2")
        path = write_config(tmp_path, bad)
        assert main(["jko", "--config", str(path)]) == 2
        assert "alpha" in capsys.readouterr().err

    def test_cli_roundtrip(self, tmp_path):
        path = write_config(tmp_path)
        code = main(["jko", "--config", str(path), "--out", str(tmp_path / "out"), "--seed", "1"])
        assert code == 0
        assert (tmp_path / "out" / "report.json").exists()


class TestEmitPlot:
    def test_single_point_marker(self, tmp_path):
        emit_plot({"pt": ([1.0], [2.0])}, tmp_path / "p.svg")
        svg = (tmp_path / "p.svg").read_text()
        assert svg.startswith("<svg")
        assert "<circle" in svg

    def test_two_series_with_legend(self, tmp_path):
        emit_plot(
            {"a": ([0, 1, 2], [0, 1, 4]), "b": ([0, 1, 2], [1, 1, 1])},
            tmp_path / "p.svg",
            title="t",
        )
        svg = (tmp_path / "p.svg").read_text()
        assert svg.count("<polyline") == 2
        assert ">a</text>" in svg and ">b</text>" in svg

    def test_decimation_keeps_file_small(self, tmp_path):
        n = 10000
        xs = list(range(n))
        ys = [np.sin(0.01 * x) for x in xs]
        emit_plot({"big": (xs, ys)}, tmp_path / "big.svg")
        data = (tmp_path / "big.svg").read_text()
        assert len(data.encode()) < 2_000_000
        pts = re.search(r'points="([^"]+)"', data).group(1)
        assert len(pts.split()) <= 2000

    def test_empty_series_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            emit_plot({"e": ([], [])}, tmp_path / "e.svg")
