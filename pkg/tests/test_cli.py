import json
import subprocess
import sys

import numpy as np
import pytest

from harvestkit import __version__
from harvestkit.supervision import read_grid
from harvestkit.workbench.cli import main
from harvestkit.workbench.records import dump_record, read_jsonl, write_jsonl

from conftest import make_det, make_mark, make_proposal


def jsonl(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    return str(path)


def det_row(z, box, score, vid="v1"):
    x1, y1, x2, y2 = box
    return {"schema": "detection/1.0", "volume_id": vid, "z": z, "x1": x1, "y1": y1, "x2": x2, "y2": y2, "score": score}


class TestExitCodes:
    @pytest.mark.parametrize("argv", [["--help"], ["--version"], ["stack", "--help"]])
    def test_informational(self, argv, capsys):
        assert main(argv) == 0

    @pytest.mark.parametrize("argv", [[], ["frobnicate"], ["stack", "--tg", "2"], ["evaluate"]])
    def test_usage(self, argv, capsys):
        assert main(argv) == 1

    def test_missing_file(self, tmp_path, capsys):
        assert main(["stack", str(tmp_path / "nope.jsonl")]) == 1
        assert "error" in capsys.readouterr().err

    def test_schema_error_reports_line(self, tmp_path, capsys):
        bad = det_row(3, (0, 0, 4, 4), 0.5)
        del bad["score"]
        src = jsonl(tmp_path / "d.jsonl", [det_row(3, (0, 0, 4, 4), 0.5), bad])
        assert main(["stack", src]) == 1
        err = capsys.readouterr().err
        assert "line 2" in err and "score" in err

    def test_internal_error(self, monkeypatch, tmp_path, capsys):
        import harvestkit.workbench.cli as cli

        def boom(*a, **k):
            raise RuntimeError("kaboom")

        monkeypatch.setattr(cli, "stack_detections", boom)
        src = jsonl(tmp_path / "d.jsonl", [det_row(3, (0, 0, 4, 4), 0.5)])
        assert main(["stack", src]) == 2
        assert "kaboom" in capsys.readouterr().err

    def test_module_entry(self):
        out = subprocess.run([sys.executable, "-m", "harvestkit", "--version"], capture_output=True, text=True)
        assert out.returncode == 0 and __version__ in out.stdout


class TestStack:
    def test_single_track_to_stdout(self, tmp_path, capsys):
        # s_g is the best member score
        rows = [det_row(z, (10, 10, 30, 30), s) for z, s in ((4, 0.6), (5, 0.9), (6, 0.3))]
        rows.append(det_row(8, (100, 100, 120, 120), 0.05))  # below t_G
        assert main(["stack", jsonl(tmp_path / "d.jsonl", rows)]) == 0
        (line,) = capsys.readouterr().out.splitlines()
        p = json.loads(line)
        assert (p["z1"], p["z2"], p["id"]) == (4, 6, "v1/r0/p0")
        assert p["s_g"] == pytest.approx(0.9)
        assert [m["score"] for m in p["members"]] == pytest.approx([0.6, 0.9, 0.3])

    def test_tg_flag_and_file_output(self, tmp_path):
        rows = [det_row(5, (10, 10, 30, 30), 0.3)]
        out = tmp_path / "p.jsonl"
        assert main(["stack", jsonl(tmp_path / "d.jsonl", rows), "--tg", "0.5", "--out", str(out)]) == 0
        assert list(read_jsonl(out, "proposal")) == []

    def test_detections_from_config(self, tmp_path):
        src = jsonl(tmp_path / "d2.jsonl", [det_row(5, (10, 10, 30, 30), 0.7)])
        template = src.replace("d2", "d{round}")
        (tmp_path / "c.yaml").write_text(f"paths:\n  detections: {template}\n")
        out = tmp_path / "p.jsonl"
        assert main(["stack", "--config", str(tmp_path / "c.yaml"), "--round", "2", "--out", str(out)]) == 0
        (p,) = read_jsonl(out, "proposal")
        assert p.round == 2 and p.id == "v1/r2/p0"


class TestEvaluate:
    def setup_files(self, tmp_path):
        props = [
            make_proposal("a", "v1", (0, 0, 10, 10), 2, 6, s=0.9),
            make_proposal("b", "v1", (50, 50, 60, 60), 2, 6, s=0.8),
            make_proposal("c", "v2", (0, 0, 10, 10), 2, 6, s=0.7),
        ]
        marks = [make_mark("v1", "m1", 4, (0, 0, 10, 10)), make_mark("v2", "m2", 4, (0, 0, 10, 10))]
        write_jsonl(tmp_path / "p.jsonl", props)
        write_jsonl(tmp_path / "m.jsonl", marks)
        return str(tmp_path / "p.jsonl"), str(tmp_path / "m.jsonl")

    def test_report_to_stdout(self, tmp_path, capsys):
        p, m = self.setup_files(tmp_path)
        assert main(["evaluate", "--proposals", p, "--marks", m]) == 0
        rep = json.loads(capsys.readouterr().out)
        assert rep["schema"] == "report/1.0"
        assert rep["ap"] == pytest.approx(5 / 6)
        assert rep["extra"]["mode"] == "p3d"

    def test_iou3d_needs_gt(self, tmp_path, capsys):
        p, m = self.setup_files(tmp_path)
        assert main(["evaluate", "--proposals", p, "--marks", m, "--mode", "iou3d"]) == 1

    def test_iou3d(self, tmp_path, capsys):
        p, _ = self.setup_files(tmp_path)
        gt = jsonl(tmp_path / "g.jsonl", [{"schema": "lesion3d/1.0", "volume_id": "v1", "lesion_id": "l",
                                            "x1": 0, "y1": 0, "z1": 2, "x2": 10, "y2": 10, "z2": 6}])
        assert main(["evaluate", "--proposals", p, "--gt3d", gt, "--mode", "iou3d", "--out", str(tmp_path / "r.json")]) == 0
        rep = json.loads((tmp_path / "r.json").read_text())
        assert rep["ap"] == pytest.approx(1.0)


class TestCalibrate:
    def test_threshold(self, tmp_path, capsys):
        props = [make_proposal(f"p{i}", "v1", (0, 0, 10, 10) if i < 3 else (40 + 20 * i, 0, 50 + 20 * i, 10), 2, 6,
                               s_g=1.0, s_c=s) for i, s in enumerate([0.9, 0.8, 0.7, 0.95, 0.2])]
        write_jsonl(tmp_path / "p.jsonl", props)
        write_jsonl(tmp_path / "m.jsonl", [make_mark("v1", "m", 4, (0, 0, 10, 10))])
        code = main(["calibrate", "--proposals", str(tmp_path / "p.jsonl"), "--marks", str(tmp_path / "m.jsonl"),
                     "--precision-target", "0.75"])
        assert code == 0
        res = json.loads(capsys.readouterr().out)
        # descending: 0.95 F, 0.9 T, 0.8 T, 0.7 T, 0.2 F -> precision 3/4 first reached at 0.7
        assert res == {"tau": 0.7, "target_precision": 0.75, "n_proposals": 5, "n_true": 3}

    def test_unscored(self, tmp_path, capsys):
        write_jsonl(tmp_path / "p.jsonl", [make_proposal("p", "v1", (0, 0, 10, 10), 2, 6)])
        write_jsonl(tmp_path / "m.jsonl", [make_mark("v1", "m", 4, (0, 0, 10, 10))])
        assert main(["calibrate", "--proposals", str(tmp_path / "p.jsonl"), "--marks", str(tmp_path / "m.jsonl")]) == 1


class TestSimulateAndHarvest:
    def test_simulate_is_reproducible(self, tmp_path, capsys):
        for name in "ab":
            assert main(["simulate", "--seed", "3", "--rounds", "1", "--out", str(tmp_path / name)]) == 0
        a = (tmp_path / "a" / "round_01" / "report.json").read_bytes()
        assert a == (tmp_path / "b" / "round_01" / "report.json").read_bytes()
        assert "round 1:" in capsys.readouterr().out

    def test_harvest_from_simulated_files(self, tmp_path, capsys):
        # Build real-data inputs from a simulated world and the simulator oracles
        from harvestkit.simulator import WorldConfig, OracleSkill, generate_world, oracle_lpc, oracle_lpg
        from harvestkit.tracker3d import stack_detections

        world = generate_world(WorldConfig(n_volumes=30, seed=2))
        write_jsonl(tmp_path / "volumes.jsonl", world.volumes)
        write_jsonl(tmp_path / "marks.jsonl", world.marks)
        for k in (1, 2):
            dets = oracle_lpg(world, OracleSkill(), round=k)
            write_jsonl(tmp_path / f"det{k}.jsonl", dets)
            props = stack_detections(dets, round=k)
            (tmp_path / f"sc{k}.jsonl").write_text(
                "".join(json.dumps({"schema": "score/1.0", "id": p.id, "s_c": oracle_lpc(p, world, OracleSkill(), k)}) + "\n"
                        for p in props)
            )
        cfg = tmp_path / "c.yaml"
        cfg.write_text(
            "paths:\n"
            f"  volumes: {tmp_path / 'volumes.jsonl'}\n  marks: {tmp_path / 'marks.jsonl'}\n"
            f"  detections: {tmp_path / 'det{round}.jsonl'}\n  scores: {tmp_path / 'sc{round}.jsonl'}\n"
        )
        assert main(["harvest", "--config", str(cfg), "--rounds", "4", "--out", str(tmp_path / "out")]) == 0
        # round 3 inputs are absent, so the run stops after round 2
        assert (tmp_path / "out" / "round_02" / "report.json").is_file()
        assert not (tmp_path / "out" / "round_03").exists()
        assert next(read_jsonl(tmp_path / "out" / "round_02" / "labels.jsonl", "label"), None) is not None

    def test_harvest_without_inputs(self, tmp_path, capsys):
        assert main(["harvest", "--out", str(tmp_path)]) == 1


class TestHeatmaps:
    def test_grids(self, tmp_path, capsys):
        from harvestkit.harvester import TrainingLabel
        from harvestkit.geometry import Box2D

        labels = [
            TrainingLabel("v1", 3, Box2D(16, 16, 64, 64), True, "recist", 1.0),
            TrainingLabel("v1", 3, Box2D(100, 100, 148, 148), False, "harvested", 0.7),
            TrainingLabel("v2", 0, Box2D(0, 0, 40, 40), True, "harvested", 0.9),
        ]
        write_jsonl(tmp_path / "l.jsonl", labels)
        out = tmp_path / "grids"
        assert main(["heatmaps", str(tmp_path / "l.jsonl"), "--width", "256", "--height", "192", "--out", str(out)]) == 0
        values, desc = read_grid(out / "v1_z0003.f32")
        assert values.shape == (48, 64)
        assert desc["n_positive"] == 1 and desc["n_negative"] == 1
        assert values.max() == pytest.approx(1.0) and values.min() == pytest.approx(-1.0)
        assert (out / "v2_z0000.f32").is_file()
