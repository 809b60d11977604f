import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from conftest import ANNOTATIONS, DETECTIONS
from occdet import cli, io
from occdet.evaluation import Detection
from occdet.geometry import Box
from occdet.poroi import FeatureMap, default_part_layout, poroi_forward

FAST_CONFIG = """\
[benchmark]
train_scenes = 3
test_scenes = 3
iterations = 10
seeds = 0-1
min_passing_seeds = 0
"""


def run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def image_doc(objects, width=100, height=200):
    return json.dumps({"images": [{"id": "x", "width": width, "height": height, "objects": objects}]})


class TestConfig:
    def test_defaults(self):
        cfg = io.load_config(None)
        assert cfg.nms_thresholds == (0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
        assert cfg.seeds == tuple(range(10)) and cfg.min_passing_seeds == 8

    def test_default_text_round_trips(self, tmp_path):
        p = tmp_path / "run.ini"
        p.write_text(io.default_config_text())
        loaded = io.load_config(p)
        assert loaded == io.RunConfig(source=str(p))

    def test_lambda_and_ranges(self, tmp_path):
        p = tmp_path / "run.ini"
        p.write_text("[defaults]\nlambda = 0.5\n[benchmark]\nseeds = 3-5\nmin_passing_seeds = 2\n")
        cfg = io.load_config(p)
        assert cfg.lam == 0.5 and cfg.seeds == (3, 4, 5)

    @pytest.mark.parametrize("text,where", [
        ("[defaults]\nbogus = 1\n", "[defaults] bogus"),
        ("[extra]\nx = 1\n", "[extra]"),
        ("[defaults]\nalpha = many\n", "[defaults] alpha"),
        ("[defaults]\npos_iou = 0.2\nneg_iou = 0.4\n", "config"),
    ])
    def test_rejections(self, tmp_path, text, where):
        p = tmp_path / "run.ini"
        p.write_text(text)
        with pytest.raises(io.FormatError) as err:
            io.load_config(p)
        assert err.value.where == where


class TestAnnotations:
    def test_fixture_loads(self):
        images = io.read_annotations(ANNOTATIONS)
        assert [im.id for im in images] == ["a", "b", "c"]
        assert images[0].objects[0].occlusion == pytest.approx(0.3)

    def test_round_trip(self):
        images = io.read_annotations(ANNOTATIONS)
        text = io.dump_annotations(images)
        assert io.dump_annotations(io.parse_annotations(text)) == text

    def test_visible_must_lie_inside(self):
        doc = image_doc([{"bbox": [10, 10, 20, 50], "vis_bbox": [5, 10, 20, 50]}])
        with pytest.raises(io.FormatError) as err:
            io.parse_annotations(doc, "a.json")
        assert err.value.where == "images[0].objects[0].vis_bbox"

    def test_boxes_clamped_to_image(self):
        doc = image_doc([{"bbox": [90, 10, 20, 50], "vis_bbox": [90, 10, 10, 50]}])
        ob = io.parse_annotations(doc)[0].objects[0]
        assert ob.full.x_max == 100

    @pytest.mark.parametrize("objects,where", [
        ([{"bbox": [1, 2, 3], "vis_bbox": [1, 2, 3, 4]}], "images[0].objects[0].bbox"),
        ([{"bbox": [1, 2, 3, 4], "vis_bbox": [1, 2, 3, 4], "ignore": 2}], "images[0].objects[0].ignore"),
        ([{"bbox": [1, 2, 3, 4]}], "images[0].objects[0]"),
    ])
    def test_field_diagnostics(self, objects, where):
        with pytest.raises(io.FormatError) as err:
            io.parse_annotations(image_doc(objects))
        assert err.value.where == where

    def test_syntax_error_reports_line(self):
        with pytest.raises(io.FormatError) as err:
            io.parse_annotations('{\n "images": [\n}')
        assert err.value.where.startswith("line 3")

    def test_duplicate_ids(self):
        doc = json.dumps({"images": [{"id": "x", "width": 10, "height": 10, "objects": []}] * 2})
        with pytest.raises(io.FormatError):
            io.parse_annotations(doc)


class TestDetections:
    def test_fixture(self):
        dets = io.read_detections(DETECTIONS, {"a", "b", "c"})
        assert len(dets) == 10

    def test_header_optional(self):
        dets = io.parse_detections(["a,1,2,3,4,0.5"], known_ids={"a"})
        assert dets[0].box.to_xywh() == [1, 2, 3, 4]

    @pytest.mark.parametrize("line", ["a,1,2,3,0.5", "a,1,2,x,4,0.5", "a,1,2,3,4,nan", "zz,1,2,3,4,0.5"])
    def test_bad_lines_report_line_number(self, line):
        with pytest.raises(io.FormatError) as err:
            io.parse_detections(["image_id,x,y,w,h,score", "a,1,2,3,4,0.9", line], known_ids={"a"})
        assert err.value.where == "line 3"

    def test_write_read(self, tmp_path):
        dets = [Detection("a", Box.from_xywh(0.1, 0.2, 3.3, 4.4), 0.123456789)]
        io.write_detections(tmp_path / "d.csv", dets)
        assert io.read_detections(tmp_path / "d.csv") == dets


class TestFeatureMaps:
    def test_round_trip(self, tmp_path):
        f = FeatureMap(np.random.default_rng(0).normal(size=(3, 4, 5)))
        io.write_feature_map(tmp_path / "f.bin", f)
        np.testing.assert_array_equal(io.read_feature_map(tmp_path / "f.bin").data, f.data)

    def test_bad_magic(self):
        blob = bytearray(io.dump_feature_map(FeatureMap(np.zeros((1, 2, 2)))))
        blob[:4] = b"NOPE"
        with pytest.raises(io.FormatError):
            io.parse_feature_map(bytes(blob))

    def test_truncated(self):
        blob = io.dump_feature_map(FeatureMap(np.zeros((1, 2, 2))))
        with pytest.raises(io.FormatError):
            io.parse_feature_map(blob[:-8])


class TestCLI:
    def test_eval_json(self, capsys):
        code, out, _ = run(["eval", ANNOTATIONS, DETECTIONS], capsys)
        assert code == cli.EXIT_OK
        rep = json.loads(out)
        assert rep["mr2_percent"] == pytest.approx(100 * 2 ** (-11 / 9), abs=1e-9)
        assert len(rep["samples"]["fppi"]) == 9

    def test_eval_table(self, capsys):
        code, out, _ = run(["eval", ANNOTATIONS, DETECTIONS, "--format", "table"], capsys)
        assert code == 0 and "mr2_percent" in out and "miss_rate" in out

    def test_json_like_alias(self, capsys):
        _, a, _ = run(["eval", ANNOTATIONS, DETECTIONS, "--format", "json-like"], capsys)
        _, b, _ = run(["eval", ANNOTATIONS, DETECTIONS], capsys)
        assert a == b

    def test_nms_sweep(self, capsys):
        code, out, _ = run(["nms-sweep", ANNOTATIONS, DETECTIONS], capsys)
        rep = json.loads(out)
        assert code == 0
        assert [r["miss_rate_percent"] for r in rep["rows"]] == pytest.approx([50, 25, 25, 25, 25, 25, 50])

    def test_unknown_subset_is_invalid(self, capsys):
        code, _, err = run(["eval", ANNOTATIONS, DETECTIONS, "--subset", "Tiny"], capsys)
        assert code == cli.EXIT_INVALID and err.startswith("error:")

    def test_missing_detection_image(self, tmp_path, capsys):
        p = tmp_path / "d.csv"
        p.write_text("image_id,x,y,w,h,score\nq,1,2,3,4,0.5\n")
        code, _, err = run(["eval", ANNOTATIONS, p], capsys)
        assert code == cli.EXIT_INVALID and "line 2" in err

    def test_gradcheck_pass_and_corrupt(self, capsys):
        code, out, _ = run(["gradcheck", "--batches", "3"], capsys)
        assert code == cli.EXIT_OK and json.loads(out)["result"] == "pass"
        code, out, _ = run(["gradcheck", "--batches", "3", "--corrupt-gradient", "com_loss"], capsys)
        rep = json.loads(out)
        assert code == cli.EXIT_FAIL
        assert [r["loss"] for r in rep["rows"] if r["status"] == "FAIL"] == ["com_loss"]

    def test_synth_is_byte_identical(self, tmp_path, capsys):
        for d in ("one", "two"):
            assert run(["synth", "--seed", 7, "--count", 5, "--out", tmp_path / d], capsys)[0] == 0
        assert (tmp_path / "one/annotations.json").read_bytes() == (tmp_path / "two/annotations.json").read_bytes()

    def test_synth_needs_out(self, capsys):
        assert run(["synth"], capsys)[0] == cli.EXIT_INVALID

    def test_synth_detections_feed_eval(self, tmp_path, capsys):
        cfg = tmp_path / "run.ini"
        cfg.write_text(FAST_CONFIG)
        out = tmp_path / "s"
        code, _, _ = run(["synth", "--count", 4, "--detections", "aggloss", "--config", cfg, "--out", out], capsys)
        assert code == 0
        first = (out / "detections.csv").read_bytes()
        run(["synth", "--count", 4, "--detections", "aggloss", "--config", cfg, "--out", out], capsys)
        assert (out / "detections.csv").read_bytes() == first
        code, rep, _ = run(["eval", out / "annotations.json", out / "detections.csv"], capsys)
        assert code == 0 and 0 <= json.loads(rep)["mr2_percent"] <= 100

    def test_fig2b_small(self, tmp_path, capsys):
        cfg = tmp_path / "run.ini"
        cfg.write_text(FAST_CONFIG)
        code, out, _ = run(["fig2b", "--config", cfg], capsys)
        rep = json.loads(out)
        assert code == 0 and len(rep["runs"]) == 2

    def test_poroi_demo_fixed_scores(self, tmp_path, capsys):
        f = FeatureMap(np.random.default_rng(1).normal(size=(2, 30, 20)))
        io.write_feature_map(tmp_path / "f.bin", f)
        code, out, _ = run(["poroi-demo", tmp_path / "f.bin", "--proposal", "2,3,12,24", "--fix-scores-one"], capsys)
        rep = json.loads(out)
        ref = poroi_forward(f, Box.from_xywh(2, 3, 12, 24), default_part_layout(), None, fixed_scores=[1.0] * 5)
        total = ref.whole
        for part in ref.parts:
            total = total + part
        assert rep["combined_sha256"] == hashlib.sha256(total.astype("<f8").tobytes()).hexdigest()
        assert code == 0 and rep["scores"] == [1.0] * 5

    def test_poroi_demo_constant_map(self, tmp_path, capsys):
        io.write_feature_map(tmp_path / "f.bin", FeatureMap(np.full((2, 28, 28), 0.5)))
        code, out, _ = run(["poroi-demo", tmp_path / "f.bin", "--proposal", "0,0,28,28"], capsys)
        rep = json.loads(out)
        assert code == 0 and rep["combined_shape"] == [2, 7, 7]
        s = sum(rep["scores"])
        assert rep["combined_sum"] == pytest.approx(98 * 0.5 * (1 + s))

    def test_poroi_demo_bad_file(self, tmp_path, capsys):
        (tmp_path / "f.bin").write_bytes(b"garbage")
        code, _, err = run(["poroi-demo", tmp_path / "f.bin", "--proposal", "0,0,2,2"], capsys)
        assert code == cli.EXIT_INVALID and err.startswith("error:")

    def test_module_entry_point(self):
        proc = subprocess.run([sys.executable, "-m", "occdet", "eval", ANNOTATIONS, DETECTIONS,
                               "--format", "table"], capture_output=True, text=True)
        assert proc.returncode == 0 and "Reasonable" in proc.stdout
