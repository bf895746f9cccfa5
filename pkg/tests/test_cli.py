"""Tests de extremo a extremo del CLI sobre escenas chicas del fantoma."""
import json

import numpy as np
import pytest

import cli
from colon_recon.formats import read_depth, read_json, read_trajectory
from colon_recon.utils import PipelineConfig, deep_update

from conftest import SMALL_CONFIG


def _write_config(folder, **sections):
    cfg = deep_update(SMALL_CONFIG, sections)
    cfg["paths"] = {"dataset": str(folder / "scene"), "output": str(folder / "out")}
    path = folder / "config.json"
    path.write_text(json.dumps(cfg), encoding="utf-8")
    return str(path)


@pytest.fixture(scope="module")
def scene(tmp_path_factory):
    """Dataset en-face de 4 frames renderizado una sola vez."""
    folder = tmp_path_factory.mktemp("scene")
    config = _write_config(folder)
    assert cli.main(["--config", config, "render", "--out", str(folder / "scene")]) == 0
    return folder, config


class TestRender:

    def test_layout(self, scene):
        folder, _ = scene
        root = folder / "scene"
        for sub, ext in (("rgb", "png"), ("depth", "pfm"), ("normals", "pfm")):
            assert sorted(p.name for p in (root / sub).iterdir()) == [f"00000{i}.{ext}" for i in range(4)]
        assert len(read_trajectory(root / "trajectory.txt")) == 4
        manifest = read_json(root / "manifest.json")
        assert manifest["source"] == "render"
        assert manifest["view"] == "en-face"
        assert manifest["phantom"]["fold_amplitude"] == 0.1

    def test_same_seed_is_bit_identical(self, scene, tmp_path):
        folder, config = scene
        assert cli.main(["--config", config, "render", "--out", str(tmp_path / "again")]) == 0
        for path in sorted((folder / "scene").rglob("*")):
            if path.is_file():
                other = tmp_path / "again" / path.relative_to(folder / "scene")
                assert other.read_bytes() == path.read_bytes(), path.name

    def test_invalid_fold_amplitude_writes_nothing(self, config_file, tmp_path):
        out = tmp_path / "never"
        code = cli.main(["--config", str(config_file), "render", "--fold-amplitude", "1.2", "--out", str(out)])
        assert code == 1
        assert not out.exists()


class TestLosses:

    def test_report(self, scene, tmp_path):
        folder, config = scene
        code = cli.main(["--config", config, "losses", "--dataset", str(folder / "scene"),
                         "--pair", "000000", "000001", "--out", str(tmp_path), "--dump-maps"])
        assert code == 0
        data = read_json(tmp_path / "losses_000000_000001.json")
        assert set(data["report"]) == {"photo", "norm", "depth", "orth", "smooth", "total", "pixel_count"}
        assert data["report"]["pixel_count"] > 0
        assert any((tmp_path / "maps").iterdir())

    def test_lambda_override_and_ablation(self, scene, tmp_path):
        folder, config = scene
        args = ["--config", config, "losses", "--dataset", str(folder / "scene"), "--pair", "000001", "000000"]
        assert cli.main(args + ["--lambda2", "0.5", "--out", str(tmp_path / "a")]) == 0
        assert cli.main(args + ["--no-norm", "--out", str(tmp_path / "b")]) == 0
        a = read_json(tmp_path / "a" / "losses_000001_000000.json")
        b = read_json(tmp_path / "b" / "losses_000001_000000.json")
        assert a["weights"]["lambda2"] == 0.5
        assert b["weights"]["lambda1"] == 0.0
        assert b["report"]["photo"] == pytest.approx(a["report"]["photo"])

    def test_unknown_frame(self, scene, tmp_path):
        folder, config = scene
        code = cli.main(["--config", config, "losses", "--dataset", str(folder / "scene"),
                         "--pair", "000000", "000009", "--out", str(tmp_path)])
        assert code == 1

    def test_fully_masked_pair_exits_2(self, tmp_path):
        # cámara quieta: el warp no mejora a la fuente sin alinear en ningún píxel
        config = _write_config(tmp_path, trajectory={"frames": 2, "step": 0.0, "jitter": 0.0})
        assert cli.main(["--config", config, "render", "--out", str(tmp_path / "scene")]) == 0
        code = cli.main(["--config", config, "losses", "--dataset", str(tmp_path / "scene"),
                         "--pair", "000000", "000001", "--out", str(tmp_path / "out")])
        assert code == 2
        assert not (tmp_path / "out" / "losses_000000_000001.json").exists()

    def test_same_frame_twice(self, scene, tmp_path):
        folder, config = scene
        code = cli.main(["--config", config, "losses", "--dataset", str(folder / "scene"),
                         "--pair", "000002", "000002", "--out", str(tmp_path)])
        assert code == 1


class TestRefine:

    def test_flat_init_outputs(self, scene, tmp_path):
        folder, config = scene
        out = tmp_path / "flat"
        code = cli.main(["--config", config, "refine", "--dataset", str(folder / "scene"),
                         "--frames", "000000", "--out", str(out)])
        assert code == 0
        assert read_depth(out / "depth" / "000000.pfm").shape == (32, 32)
        frame_dir = out / "iterations" / "000000"
        for name in ("iter1_depth.pfm", "iter1_normals.pfm", "iter1_light_dir.pfm", "iter1_light_att.pfm",
                     "energy.csv"):
            assert (frame_dir / name).exists(), name
        report = read_json(out / "refine_report.json")
        assert report["init"] == "flat"
        assert set(report["frames"]) == {"000000"}
        assert read_json(out / "manifest.json")["source"] == "refine"

    def test_rerun_is_bit_identical(self, scene, tmp_path):
        folder, config = scene
        args = ["refine", "--dataset", str(folder / "scene"), "--frames", "000000", "000001"]
        assert cli.main(["--config", config] + args + ["--out", str(tmp_path / "a")]) == 0
        assert cli.main(["--config", config, "--jobs", "2"] + args + ["--out", str(tmp_path / "b")]) == 0
        files = sorted(p for p in (tmp_path / "a").rglob("*") if p.is_file())
        assert files
        for path in files:
            other = tmp_path / "b" / path.relative_to(tmp_path / "a")
            assert other.read_bytes() == path.read_bytes(), path.name

    def test_zero_iterations_rejected(self, scene, tmp_path):
        folder, config = scene
        code = cli.main(["--config", config, "refine", "--dataset", str(folder / "scene"),
                         "--iterations", "0", "--out", str(tmp_path / "zero")])
        assert code == 1
        assert not (tmp_path / "zero").exists()

    def test_missing_init_file(self, scene, tmp_path):
        folder, config = scene
        code = cli.main(["--config", config, "refine", "--dataset", str(folder / "scene"),
                         "--init", str(tmp_path / "nada.pfm"), "--out", str(tmp_path / "x")])
        assert code == 3

    def test_missing_dataset(self, config_file, tmp_path):
        code = cli.main(["--config", str(config_file), "refine", "--dataset", str(tmp_path / "nada")])
        assert code == 3


class TestFuse:

    def test_mesh_and_coverage(self, scene, tmp_path):
        folder, config = scene
        assert cli.main(["--config", config, "fuse", "--frames", str(folder / "scene"), "--out", str(tmp_path)]) == 0
        assert (tmp_path / "mesh.ply").exists()
        holes = read_json(tmp_path / "holes.json")
        assert 0.0 < holes["coverage"] < 1.0
        assert holes["holes"]
        assert (tmp_path / "coverage.png").exists()

    def test_non_positive_voxel(self, scene, tmp_path):
        folder, config = scene
        code = cli.main(["--config", config, "fuse", "--frames", str(folder / "scene"),
                         "--voxel-size", "0", "--out", str(tmp_path)])
        assert code == 1


class TestEvaluateAndReport:

    def test_prediction_equal_to_ground_truth(self, scene, tmp_path):
        folder, config = scene
        root = str(folder / "scene")
        report = tmp_path / "gt.json"
        code = cli.main(["--config", config, "evaluate", "--pred", root, "--gt", root,
                         "--report", str(report), "--name", "gt", "--no-chamfer"])
        assert code == 0
        data = read_json(report)
        assert data["row"] == "gt | 0.000 ± 0.000 | 0.000 ± 0.000 | 0.000 ± 0.000 | 0.000 ± 0.000 | -"
        assert len(data["folds"]) == 2

        table = tmp_path / "table.md"
        assert cli.main(["report", str(report), "--out", str(table)]) == 0
        lines = table.read_text(encoding="utf-8").splitlines()
        assert lines[0].startswith("Método")
        assert lines[1] == data["row"]

    def test_chamfer_on_identical_sequence(self, tmp_path):
        config = _write_config(tmp_path, trajectory={"view": "down-the-barrel", "frames": 4, "step": 0.1},
                               fusion={"voxel_size": 0.1})
        assert cli.main(["--config", config, "render", "--out", str(tmp_path / "scene")]) == 0
        root = str(tmp_path / "scene")
        report = tmp_path / "eval.json"
        code = cli.main(["--config", config, "evaluate", "--pred", root, "--gt", root,
                         "--report", str(report), "--folds", "1"])
        assert code == 0
        chamfer = read_json(report)["aggregate"]["chamfer"]
        assert np.isfinite(chamfer["mean"])
        assert chamfer["mean"] < 0.5
        assert chamfer["std"] == 0.0

    def test_different_frame_sets(self, scene, tmp_path):
        folder, config = scene
        out = tmp_path / "partial"
        assert cli.main(["--config", config, "refine", "--dataset", str(folder / "scene"),
                         "--frames", "000000", "--out", str(out)]) == 0
        code = cli.main(["--config", config, "evaluate", "--pred", str(out), "--gt", str(folder / "scene"),
                         "--report", str(tmp_path / "r.json"), "--no-chamfer"])
        assert code == 1

    def test_report_rejects_other_json(self, tmp_path):
        (tmp_path / "x.json").write_text("{}", encoding="utf-8")
        assert cli.main(["report", str(tmp_path / "x.json")]) == 1
        assert cli.main(["report", str(tmp_path / "missing.json")]) == 3


class TestConfig:

    def test_missing_explicit_config(self, tmp_path):
        assert cli.main(["--config", str(tmp_path / "none.json"), "render"]) == 3

    def test_flags_override_file(self, config_file):
        config = PipelineConfig.load(str(config_file), {"losses": {"lambda1": 0.3, "lambda2": None}})
        assert config["losses"]["lambda1"] == 0.3
        assert config["losses"]["lambda2"] == 0.05
        assert config["trajectory"]["view"] == "en-face"
        assert config["trajectory"]["jitter"] == 0.01

    def test_usage_errors_exit_1(self, capsys):
        assert cli.main(["losses"]) == 1
        assert cli.main(["sideways"]) == 1
        assert cli.main(["render", "--frames", "many"]) == 1
        assert "falló" in capsys.readouterr().err

    @pytest.mark.parametrize("error, code", [
        (RuntimeError("inesperado"), 1),
        (FloatingPointError("overflow"), 2),
        (np.linalg.LinAlgError("singular"), 2),
        (PermissionError("sin permiso"), 3),
    ])
    def test_unexpected_exceptions_map_to_exit_codes(self, monkeypatch, capsys, error, code):
        def boom(args):
            raise error
        monkeypatch.setattr(cli, "run", boom)
        assert cli.main(["report", "x.json"]) == code
        assert type(error).__name__ in capsys.readouterr().err

    def test_section_getters_fill_defaults(self, tmp_path):
        from colon_recon.utils import get_section, save_config
        path = tmp_path / "cfg.json"
        save_config({"losses": {"lambda3": 0.2}}, str(path))
        cfg = json.loads(path.read_text(encoding="utf-8"))
        losses = get_section("losses", cfg)
        assert losses["lambda3"] == 0.2
        assert losses["lambda1"] == 0.1
        assert get_section("fusion", cfg)["truncation_voxels"] == 3.0
