from __future__ import annotations

import json
import socket
from pathlib import Path

import numpy as np
import pytest

from funcground import lifting
from funcground.cli import main
from funcground.scene_io import read_ply


def run_cli(*argv) -> int:
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("scenes")
    code = run_cli(
        "synth", "--out", root, "--seed", "40", "--count", "2",
        "--frames", "40", "--parts", "2", "--image-size", "128", "96",
    )
    assert code == 0
    return root


FAST_FLAGS = ("--k", "2")


@pytest.fixture(scope="module")
def run_dir(synth_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("results")
    config = out / "run.toml"
    config.write_text('n = 16\ncoarse_resolution = [128, 96]\n')
    code = run_cli(
        "run", "--scenes", synth_dir, "--out", out, "--oracle",
        "--config", config, *FAST_FLAGS,
    )
    assert code == 0
    return out


class TestSynthAndRun:
    def test_scene_dirs_written(self, synth_dir):
        dirs = sorted(p.name for p in synth_dir.iterdir() if p.is_dir())
        assert dirs == ["synth-00040", "synth-00041"]
        assert (synth_dir / "synth-00040" / "manifest.json").is_file()
        assert (synth_dir / "synth-00040" / "synth_spec.json").is_file()

    def test_mask_and_trace_files_for_every_query(self, synth_dir, run_dir):
        for scene_dir in sorted(synth_dir.iterdir()):
            manifest = json.loads((scene_dir / "manifest.json").read_text())
            for query in manifest["queries"]:
                mask_path = run_dir / manifest["scene_id"] / f"{query['id']}.mask.ids"
                trace_path = run_dir / manifest["scene_id"] / f"{query['id']}.trace.json"
                assert mask_path.is_file() and trace_path.is_file()
                trace = json.loads(trace_path.read_text())
                assert "timings_s" in trace and "total_s" in trace["timings_s"]

    def test_run_summary_written(self, run_dir):
        summary = json.loads((run_dir / "run_summary.json").read_text())
        assert len(summary["queries"]) == 4
        assert all(q["failure"] is None for q in summary["queries"])

    def test_predictions_recover_ground_truth(self, synth_dir, run_dir):
        for scene_dir in sorted(synth_dir.iterdir()):
            manifest = json.loads((scene_dir / "manifest.json").read_text())
            for query in manifest["queries"]:
                ids = lifting.read_point_ids(
                    run_dir / manifest["scene_id"] / f"{query['id']}.mask.ids"
                )
                gt = lifting.read_point_ids(scene_dir / query["gt_mask"])
                inter = len(set(ids.tolist()) & set(gt.tolist()))
                union = len(set(ids.tolist()) | set(gt.tolist()))
                assert inter / union >= 0.9

    def test_rerun_is_byte_identical(self, synth_dir, run_dir, tmp_path):
        out2 = tmp_path / "again"
        config = tmp_path / "run.toml"
        config.write_text('n = 16\ncoarse_resolution = [128, 96]\n')
        assert run_cli("run", "--scenes", synth_dir, "--out", out2, "--oracle",
                       "--config", config, *FAST_FLAGS) == 0
        for mask_path in sorted(run_dir.rglob("*.mask.ids")):
            relative = mask_path.relative_to(run_dir)
            assert (out2 / relative).read_bytes() == mask_path.read_bytes()


class TestEval:
    def test_eval_table_and_json(self, synth_dir, run_dir, tmp_path, capsys):
        report_path = tmp_path / "report.json"
        code = run_cli("eval", "--scenes", synth_dir, "--pred", run_dir, "--out", report_path)
        assert code == 0
        table = capsys.readouterr().out
        assert "Configuration" in table and "mIoU" in table
        report = json.loads(report_path.read_text())
        assert report["miou"] >= 0.9
        assert len(report["per_query"]) == 4

    def test_eval_csv(self, synth_dir, run_dir, capsys):
        assert run_cli("eval", "--scenes", synth_dir, "--pred", run_dir, "--csv") == 0
        out = capsys.readouterr().out
        assert out.startswith("configuration,ap50,ap25,ar50,ar25,miou")


class TestExport:
    def test_colored_ply(self, synth_dir, run_dir, tmp_path):
        scene_dir = sorted(synth_dir.iterdir())[0]
        manifest = json.loads((scene_dir / "manifest.json").read_text())
        query = manifest["queries"][0]
        mask_path = run_dir / manifest["scene_id"] / f"{query['id']}.mask.ids"
        out = tmp_path / "mask.ply"
        assert run_cli("export", "--mask", mask_path, "--scene", scene_dir, "--out", out) == 0
        points, colors = read_ply(out)
        ids = lifting.read_point_ids(mask_path)
        assert colors[ids[0]].tolist() == [255, 0, 0]
        others = np.setdiff1d(np.arange(points.shape[0]), ids)
        assert colors[others[0]].tolist() == [128, 128, 128]

    def test_empty_mask_all_gray(self, synth_dir, tmp_path):
        scene_dir = sorted(synth_dir.iterdir())[0]
        empty = tmp_path / "empty.ids"
        empty.write_text("")
        out = tmp_path / "empty.ply"
        assert run_cli("export", "--mask", empty, "--scene", scene_dir, "--out", out) == 0
        _, colors = read_ply(out)
        assert (colors == 128).all()

    def test_bad_id_names_offender(self, synth_dir, tmp_path, capsys):
        scene_dir = sorted(synth_dir.iterdir())[0]
        bad = tmp_path / "bad.ids"
        bad.write_text("99999999\n")
        code = run_cli("export", "--mask", bad, "--scene", scene_dir, "--out", tmp_path / "x.ply")
        assert code == 1
        assert "99999999" in capsys.readouterr().err


class TestExitCodes:
    def test_missing_endpoints_without_oracle(self, synth_dir, tmp_path, capsys):
        code = run_cli("run", "--scenes", synth_dir, "--out", tmp_path / "o")
        assert code == 1
        assert "--oracle" in capsys.readouterr().err

    def test_unreachable_backend_is_exit_2(self, synth_dir, tmp_path, capsys):
        with socket.socket() as probe:
            probe.bind(("127.0.0.1", 0))
            dead = f"http://127.0.0.1:{probe.getsockname()[1]}"
        code = run_cli(
            "run", "--scenes", synth_dir, "--out", tmp_path / "o",
            "--mllm-url", dead, "--seg-url", dead,
        )
        assert code == 2
        assert "unreachable" in capsys.readouterr().err

    def test_bad_scene_path_is_exit_1(self, tmp_path):
        assert run_cli("run", "--scenes", tmp_path / "nope", "--out", tmp_path / "o",
                       "--oracle") == 1


class TestConfigLayering:
    def test_flag_overrides_file(self, synth_dir, tmp_path):
        config = tmp_path / "run.toml"
        config.write_text('tau = 0.5\nn = 16\ncoarse_resolution = [128, 96]\nk = 2\n')
        out = tmp_path / "out"
        assert run_cli("run", "--scenes", synth_dir, "--out", out, "--oracle",
                       "--config", config, "--tau", "0.9") == 0
        summary = json.loads((out / "run_summary.json").read_text())
        assert summary["config"]["tau"] == 0.9

    def test_env_overrides_file_but_not_flag(self, synth_dir, tmp_path, monkeypatch):
        config = tmp_path / "run.toml"
        config.write_text('tau = 0.5\nn = 16\ncoarse_resolution = [128, 96]\nk = 2\n')
        monkeypatch.setenv("FUNCGROUND_TAU", "0.8")
        out = tmp_path / "out_env"
        assert run_cli("run", "--scenes", synth_dir, "--out", out, "--oracle",
                       "--config", config) == 0
        summary = json.loads((out / "run_summary.json").read_text())
        assert summary["config"]["tau"] == 0.8
        out2 = tmp_path / "out_flag"
        assert run_cli("run", "--scenes", synth_dir, "--out", out2, "--oracle",
                       "--config", config, "--tau", "0.75") == 0
        summary = json.loads((out2 / "run_summary.json").read_text())
        assert summary["config"]["tau"] == 0.75

    def test_file_config_read(self, synth_dir, tmp_path):
        config = tmp_path / "run.toml"
        config.write_text('tau = 0.55\nn = 16\ncoarse_resolution = [128, 96]\nk = 2\n')
        out = tmp_path / "out_file"
        assert run_cli("run", "--scenes", synth_dir, "--out", out, "--oracle",
                       "--config", config) == 0
        summary = json.loads((out / "run_summary.json").read_text())
        assert summary["config"]["tau"] == 0.55


class TestAblate:
    def test_default_grid_has_twelve_rows(self, synth_dir, tmp_path, capsys):
        config = tmp_path / "run.toml"
        config.write_text('n = 8\ncoarse_resolution = [128, 96]\n')
        out = tmp_path / "ablation.json"
        code = run_cli(
            "ablate", "--scenes", sorted(synth_dir.iterdir())[0], "--oracle",
            "--config", config, "--out", out,
        )
        assert code == 0
        table = capsys.readouterr().out
        payload = json.loads(out.read_text())
        assert len(payload) == 12
        assert "K=2, no verify" in payload and "K=4, verify" in payload
        assert "K=1, no window, no verify" in table

    def test_single_cell_grid(self, synth_dir, tmp_path, capsys):
        config = tmp_path / "run.toml"
        config.write_text('n = 8\ncoarse_resolution = [128, 96]\n')
        code = run_cli(
            "ablate", "--scenes", sorted(synth_dir.iterdir())[0], "--oracle",
            "--config", config, "--grid-k", "2", "--csv",
        )
        assert code == 0
        rows = capsys.readouterr().out.strip().splitlines()
        assert len(rows) == 1 + 4  # header + {window}x{verify}
