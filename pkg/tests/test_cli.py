"""End-to-end exercise of the command-line surface.

Most runs go through ``main(argv)`` in process for speed; one subprocess
run covers the ``python3 -m cropstress`` entry. The full pipeline (synth,
train, influence, unlearn, retrain, evaluate) runs once at a toy size and
its artifacts back several tests.
"""

import contextlib
import io
import json
import os
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from cropstress.cli import main
from cropstress.data import parse_manifest
from cropstress.model import ArchitectureConfig, expected_parameter_count

TINY_ARCH = {
    "input_size": [16, 16],
    "stem_filters": 2,
    "bottlenecks": [[2, 1, 1], [2, 6, 1], [2, 6, 1], [2, 6, 1]],
    "dense_layers": 2,
    "growth_rate": 2,
    "transition_reduction": 0.5,
    "post_bottlenecks": [[2, 6, 1]],
    "head_units": 2,
}


def run(argv) -> int:
    # swallow subcommand prints; tests that care about output use capsys
    with contextlib.redirect_stdout(io.StringIO()):
        return main(argv)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One synth -> train -> influence -> unlearn -> retrain -> evaluate chain."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    cfg = root / "config.json"
    cfg.write_text(json.dumps({
        "architecture": TINY_ARCH,
        "train": {"batch_size": 4, "epochs": 1},
    }), encoding="utf-8")

    assert run(["synth", "--out-dir", str(data), "--n-train", "8", "--n-test", "4",
                "--size", "16", "--seed", "3"]) == 0
    manifest = str(data / "manifest.csv")
    common = ["--config", str(cfg), "--manifest", manifest,
              "--val-fraction", "0", "--seed", "3", "--no-augment"]

    run1 = root / "run1"
    assert run(["train", *common, "--out-dir", str(run1)]) == 0
    scores = str(run1 / "scores.csv")
    assert run(["influence", "--model", str(run1 / "model.bin"),
                "--manifest", manifest, "--out", scores]) == 0
    plan = str(run1 / "plan.json")
    assert run(["unlearn", "--scores", scores, "--manifest", manifest,
                "--fraction", "0.25", "--out", plan]) == 0
    run2 = root / "run2"
    assert run(["retrain", *common, "--plan", plan, "--out-dir", str(run2)]) == 0
    eval_dir = run2 / "eval"
    assert run(["evaluate", "--model", str(run2 / "model.bin"), "--manifest", manifest,
                "--out-dir", str(eval_dir), "--scenario", "after-unlearn"]) == 0

    return {"root": root, "data": data, "cfg": cfg, "manifest": manifest,
            "run1": run1, "run2": run2, "eval": eval_dir, "common": common}


class TestPipelineArtifacts:
    def test_synth_layout(self, pipeline):
        m = parse_manifest(pipeline["manifest"])
        assert len(m.rows) == 12
        assert len(m.split_rows("train")) == 8
        assert len(m.split_rows("test")) == 4
        echoed = json.loads((pipeline["data"] / "resolved-config.json").read_text())
        assert echoed["command"] == "synth"
        assert echoed["seed"] == 3

    def test_train_outputs(self, pipeline):
        run1 = pipeline["run1"]
        for name in ("model.bin", "trainlog.csv", "resolved-config.json"):
            assert (run1 / name).exists()
        echoed = json.loads((run1 / "resolved-config.json").read_text())
        assert echoed["architecture"]["stem_filters"] == 2
        assert echoed["train"]["epochs"] == 1
        assert echoed["train"]["seed"] == 3

    def test_unlearn_plan_counts(self, pipeline):
        plan = json.loads((pipeline["run1"] / "plan.json").read_text())
        # floor(0.25 * 8) = 2 removed from the train split
        assert len(plan["removed_ids"]) == 2
        assert len(plan["retained_ids"]) == 6
        assert not set(plan["removed_ids"]) & set(plan["retained_ids"])

    def test_retrain_audit_clean(self, pipeline):
        audit = json.loads((pipeline["run2"] / "audit.json").read_text())
        assert audit["retained_count"] == 6
        assert audit["total_removed_seen"] == 0

    def test_evaluate_report(self, pipeline):
        report = json.loads((pipeline["eval"] / "report.json").read_text())
        assert report["scenario"] == "after-unlearn"
        counts = report["counts"]
        assert counts["tp"] + counts["fn"] + counts["fp"] + counts["tn"] == 4
        assert (pipeline["eval"] / "confusion.csv").exists()


class TestDeterminism:
    def test_synth_byte_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for d in (a, b):
            assert run(["synth", "--out-dir", str(d), "--n-train", "4", "--n-test", "2",
                        "--size", "16", "--seed", "11"]) == 0
        assert (a / "manifest.csv").read_bytes() == (b / "manifest.csv").read_bytes()
        pngs = sorted(p.name for p in a.glob("**/*.png"))
        assert pngs
        for name in pngs:
            assert next(a.glob(f"**/{name}")).read_bytes() == next(b.glob(f"**/{name}")).read_bytes()

    def test_train_byte_identical_minus_timestamps(self, pipeline, tmp_path):
        rerun = tmp_path / "rerun"
        assert run(["train", *pipeline["common"], "--out-dir", str(rerun)]) == 0
        run1 = pipeline["run1"]
        assert (rerun / "model.bin").read_bytes() == (run1 / "model.bin").read_bytes()
        assert (rerun / "resolved-config.json").read_bytes() == (run1 / "resolved-config.json").read_bytes()

        def minus_wall(path):
            lines = path.read_text(encoding="utf-8").splitlines()
            idx = lines[0].split(",").index("wall_ms")
            return [",".join(v for i, v in enumerate(line.split(",")) if i != idx) for line in lines]

        assert minus_wall(rerun / "trainlog.csv") == minus_wall(run1 / "trainlog.csv")

    def test_influence_byte_identical(self, pipeline, tmp_path):
        out = tmp_path / "scores.csv"
        assert run(["influence", "--model", str(pipeline["run1"] / "model.bin"),
                    "--manifest", pipeline["manifest"], "--out", str(out)]) == 0
        assert out.read_bytes() == (pipeline["run1"] / "scores.csv").read_bytes()


class TestExitCodes:
    def test_missing_manifest_is_3(self, tmp_path):
        rc = run(["train", "--manifest", str(tmp_path / "nope.csv"),
                  "--out-dir", str(tmp_path / "out")])
        assert rc == 3

    def test_missing_model_is_3(self, pipeline, tmp_path):
        rc = run(["evaluate", "--model", str(tmp_path / "ghost.bin"),
                  "--manifest", pipeline["manifest"], "--out-dir", str(tmp_path / "e")])
        assert rc == 3

    def test_malformed_config_is_2(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json", encoding="utf-8")
        assert run(["params", "--config", str(bad)]) == 2

    def test_unknown_config_section_is_2(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"bogus": 1}), encoding="utf-8")
        assert run(["params", "--config", str(bad)]) == 2

    def test_invalid_architecture_value_is_2(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"architecture": {"scale_factor": -1.0}}), encoding="utf-8")
        assert run(["params", "--config", str(bad)]) == 2

    def test_bad_fraction_is_2(self, pipeline, tmp_path):
        rc = run(["unlearn", "--scores", str(pipeline["run1"] / "scores.csv"),
                  "--manifest", pipeline["manifest"], "--fraction", "1.5",
                  "--out", str(tmp_path / "p.json")])
        assert rc == 2

    def test_scores_outside_train_split_is_2(self, pipeline, tmp_path):
        doctored = tmp_path / "scores.csv"
        text = (pipeline["run1"] / "scores.csv").read_text(encoding="utf-8")
        first_id = text.splitlines()[1].split(",")[0]
        doctored.write_text(text.replace(first_id, "zzz_9999", 1), encoding="utf-8")
        rc = run(["unlearn", "--scores", str(doctored), "--manifest", pipeline["manifest"],
                  "--fraction", "0.25", "--out", str(tmp_path / "p.json")])
        assert rc == 2

    def test_bad_usage_is_2(self):
        with contextlib.redirect_stderr(io.StringIO()):
            assert run(["no-such-command"]) == 2

    def test_success_is_0(self, tmp_path):
        assert run(["params"]) == 0


class TestConfigPrecedence:
    def test_flag_beats_file_beats_default(self, pipeline, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({
            "seed": 7,
            "architecture": TINY_ARCH,
            "train": {"batch_size": 4, "epochs": 3},
        }), encoding="utf-8")
        base = ["train", "--config", str(cfg), "--manifest", pipeline["manifest"],
                "--val-fraction", "0", "--no-augment"]

        out_a = tmp_path / "a"
        assert run([*base, "--out-dir", str(out_a), "--epochs", "1", "--seed", "9"]) == 0
        echoed = json.loads((out_a / "resolved-config.json").read_text())
        assert echoed["train"]["epochs"] == 1  # flag wins over file
        assert echoed["seed"] == 9

        out_b = tmp_path / "b"
        assert run([*base, "--out-dir", str(out_b), "--epochs", "1"]) == 0
        echoed = json.loads((out_b / "resolved-config.json").read_text())
        assert echoed["seed"] == 7  # file wins over default
        assert echoed["train"]["batch_size"] == 4

    def test_default_when_unset(self, pipeline, tmp_path):
        out = tmp_path / "c"
        assert run(["train", "--config", str(pipeline["cfg"]), "--manifest", pipeline["manifest"],
                    "--val-fraction", "0", "--no-augment", "--out-dir", str(out)]) == 0
        echoed = json.loads((out / "resolved-config.json").read_text())
        assert echoed["seed"] == 0
        assert echoed["train"]["init_lr"] == 0.001


class TestParams:
    def test_totals_match_closed_form(self, capsys):
        assert main(["params"]) == 0
        out = capsys.readouterr().out
        oracle = expected_parameter_count(ArchitectureConfig())
        assert f"trainable total:      {oracle}" in out
        assert f"closed-form total:    {oracle}" in out

    def test_reference_claim_footnote(self, capsys):
        assert main(["params"]) == 0
        out = capsys.readouterr().out
        oracle = expected_parameter_count(ArchitectureConfig())
        assert "0.231M" in out
        assert f"measured: {oracle}" in out

    def test_scale_half_is_smaller(self, capsys):
        assert main(["params", "--scale", "0.5"]) == 0
        out = capsys.readouterr().out
        half = expected_parameter_count(ArchitectureConfig(scale_factor=0.5))
        assert f"trainable total:      {half}" in out
        assert half < expected_parameter_count(ArchitectureConfig())


class TestExtract:
    @pytest.fixture()
    def field_fixture(self, tmp_path):
        images = tmp_path / "images"
        ann = tmp_path / "annotations"
        images.mkdir()
        ann.mkdir()

        def paint(name, boxes):
            arr = np.full((48, 64, 3), 60, dtype=np.uint8)
            objs = []
            for (x0, y0, x1, y1), label, color in boxes:
                arr[y0:y1, x0:x1] = color
                objs.append(
                    f"<object><name>{label}</name><bndbox>"
                    f"<xmin>{x0}</xmin><ymin>{y0}</ymin><xmax>{x1}</xmax><ymax>{y1}</ymax>"
                    f"</bndbox></object>"
                )
            Image.fromarray(arr).save(images / f"{name}.png")
            (ann / f"{name}.xml").write_text(
                "<annotation>"
                f"<filename>{name}.png</filename>"
                "<size><width>64</width><height>48</height><depth>3</depth></size>"
                + "".join(objs) + "</annotation>",
                encoding="utf-8",
            )

        paint("plot_a", [((4, 8, 20, 24), "stressed", (200, 30, 30))])
        paint("plot_b", [((2, 2, 18, 18), "stressed", (180, 40, 10)),
                         ((30, 20, 62, 44), "healthy", (20, 160, 40))])
        return images, ann

    def test_golden_extract(self, field_fixture, tmp_path):
        images, ann = field_fixture
        out = tmp_path / "out"
        assert run(["extract", "--images", str(images), "--annotations", str(ann),
                    "--out-dir", str(out), "--target-size", "8"]) == 0
        m = parse_manifest(out / "manifest.csv")
        assert len(m.rows) == 3
        by_id = {r.sample_id: r for r in m.rows}
        assert by_id["plot_a#0"].label == 1
        assert by_id["plot_b#0"].label == 1
        assert by_id["plot_b#1"].label == 0
        assert all(r.split == "train" for r in m.rows)

        # crop-before-resize: a solid box stays solid through resampling
        patch = np.asarray(Image.open(out / "patches" / "plot_b_1.png"))
        assert patch.shape == (8, 8, 3)
        assert np.all(patch == np.array([20, 160, 40], dtype=np.uint8))

    def test_extract_deterministic(self, field_fixture, tmp_path):
        images, ann = field_fixture
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert run(["extract", "--images", str(images), "--annotations", str(ann),
                        "--out-dir", str(out), "--target-size", "8"]) == 0
        assert (a / "manifest.csv").read_bytes() == (b / "manifest.csv").read_bytes()
        for p in sorted((a / "patches").iterdir()):
            assert p.read_bytes() == (b / "patches" / p.name).read_bytes()

    def test_empty_annotation_dir_is_2(self, tmp_path):
        (tmp_path / "ann").mkdir()
        (tmp_path / "img").mkdir()
        rc = run(["extract", "--images", str(tmp_path / "img"),
                  "--annotations", str(tmp_path / "ann"), "--out-dir", str(tmp_path / "o")])
        assert rc == 2


def test_module_entry_point():
    proc = subprocess.run(
        [sys.executable, "-m", "cropstress", "params"],
        capture_output=True, text=True, timeout=120,
    )
    assert proc.returncode == 0
    assert "trainable total" in proc.stdout
