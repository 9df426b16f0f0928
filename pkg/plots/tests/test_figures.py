import json
from pathlib import Path

import numpy as np
import pytest

from degenlag_plots import FigureRecipe, MissingColumnError, plot, poloidal_coordinates
from degenlag_plots.cli import main

FIXTURES = Path(__file__).parent / "fixtures"


def recipe(kind, inputs, out, **kw):
    return FigureRecipe(kind=kind, inputs=[str(FIXTURES / i) for i in inputs], output=str(out), **kw)


class TestPoloidalTransform:
    def test_hand_values(self):
        big_r, big_z = poloidal_coordinates(np.array([0.05]), np.array([0.0]), r0=1.0)
        assert big_r[0] == pytest.approx(1.05)
        assert big_z[0] == pytest.approx(0.0)

    def test_quarter_turn(self):
        big_r, big_z = poloidal_coordinates(np.array([0.05]), np.array([np.pi / 2]), r0=1.0)
        assert big_r[0] == pytest.approx(1.0)
        assert big_z[0] == pytest.approx(0.05)


class TestFigureKinds:
    @pytest.mark.parametrize(
        "kind,inputs",
        [
            ("phase", ["traj_lv.csv"]),
            ("poloidal", ["traj_gc_DT.csv", "traj_gc_BT.csv"]),
            ("energy", ["traj_lv.csv"]),
            ("loss", ["trace_reg.csv", "trace_noreg.csv"]),
            ("convergence", ["convergence.csv"]),
        ],
    )
    def test_renders_without_error(self, tmp_path, kind, inputs):
        out = tmp_path / f"{kind}.png"
        written = plot(recipe(kind, inputs, out))
        assert written == out
        assert out.exists() and out.stat().st_size > 1000

    def test_decimation_flag(self, tmp_path):
        out = tmp_path / "dec.png"
        plot(recipe("phase", ["traj_lv.csv"], out, decimate=51))
        assert out.exists()

    def test_glob_inputs(self, tmp_path):
        r = FigureRecipe(
            kind="poloidal",
            inputs=[str(FIXTURES / "traj_gc_*.csv")],
            output=str(tmp_path / "g.png"),
        )
        assert len(r.resolve_inputs()) == 2
        plot(r)

    def test_unknown_kind_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            FigureRecipe(kind="heatmap", inputs=["x"], output=str(tmp_path / "x.png"))


class TestErrors:
    def test_empty_file_no_image(self, tmp_path):
        out = tmp_path / "e.png"
        with pytest.raises(ValueError, match="empty|no data"):
            plot(recipe("phase", ["empty.csv"], out))
        assert not out.exists()

    def test_missing_column_names_file(self, tmp_path):
        with pytest.raises(MissingColumnError, match="nocolumn.csv"):
            plot(recipe("phase", ["nocolumn.csv"], tmp_path / "x.png"))

    def test_missing_input(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            plot(recipe("phase", ["does_not_exist.csv"], tmp_path / "x.png"))


class TestCli:
    def test_single_recipe(self, tmp_path):
        payload = {
            "kind": "energy",
            "inputs": [str(FIXTURES / "traj_lv.csv")],
            "output": str(tmp_path / "energy.png"),
        }
        rp = tmp_path / "recipe.json"
        rp.write_text(json.dumps(payload))
        assert main([str(rp)]) == 0
        assert (tmp_path / "energy.png").exists()

    def test_recipe_list(self, tmp_path):
        payload = [
            {
                "kind": "loss",
                "inputs": [str(FIXTURES / "trace_reg.csv")],
                "output": str(tmp_path / "a.png"),
            },
            {
                "kind": "convergence",
                "inputs": [str(FIXTURES / "convergence.csv")],
                "output": str(tmp_path / "b.png"),
            },
        ]
        rp = tmp_path / "recipes.json"
        rp.write_text(json.dumps(payload))
        assert main([str(rp)]) == 0
        assert (tmp_path / "a.png").exists() and (tmp_path / "b.png").exists()

    def test_bad_recipe_exit_codes(self, tmp_path):
        assert main([str(tmp_path / "missing.json")]) == 2
        bad = tmp_path / "bad.json"
        bad.write_text("{broken")
        assert main([str(bad)]) == 2
        err = tmp_path / "err.json"
        err.write_text(
            json.dumps(
                {
                    "kind": "phase",
                    "inputs": [str(FIXTURES / "nocolumn.csv")],
                    "output": str(tmp_path / "x.png"),
                }
            )
        )
        assert main([str(err)]) == 1
