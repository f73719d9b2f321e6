import json
import shutil
import subprocess
import sys

import numpy as np
import pytest

from cardioprior import Volume3, __version__, load_atlas, load_model, load_stats, read_volume, write_volume
from cardioprior.cli import main

MANIFEST_KEYS = {"command", "version", "timestamp", "parameters", "inputs", "outputs"}


def copy_pair(src_mhd, dst_dir):
    dst_dir.mkdir(exist_ok=True)
    shutil.copy(src_mhd, dst_dir / src_mhd.name)
    raw = src_mhd.with_suffix(".raw")
    shutil.copy(raw, dst_dir / raw.name)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One small end-to-end CLI run shared by the smoke tests below."""
    root = tmp_path_factory.mktemp("cli")
    dirs = {
        "train": root / "train",
        "test": root / "test",
        "labels": root / "labels",
        "gt": root / "gt",
        "stats": root / "stats",
        "atlas": root / "atlas",
        "run": root / "run",
        "eval": root / "baseline",
        "report": root / "report",
    }
    assert main(["phantom", "--n", "2", "--size", "24", "--spacing", "4.0",
                 "--out", str(dirs["train"])]) == 0
    assert main(["phantom", "--n", "1", "--seed", "9", "--size", "24", "--spacing", "4.0",
                 "--out", str(dirs["test"])]) == 0
    for f in sorted(dirs["train"].glob("case_*_label.mhd")):
        copy_pair(f, dirs["labels"])
    copy_pair(dirs["test"] / "case_000_label.mhd", dirs["gt"])
    stats_path = dirs["stats"] / "shape_stats.json"
    assert main(["stats", "--labels", str(dirs["labels"]), "--out", str(stats_path)]) == 0
    assert main(["atlas", "--labels", str(dirs["labels"]), "--out", str(dirs["atlas"]),
                 "--size", "24", "--spacing", "4.0"]) == 0
    assert main(["train", "--data", str(dirs["train"]), "--stats", str(stats_path),
                 "--atlas", str(dirs["atlas"]), "--epochs", "3",
                 "--out", str(dirs["run"]), "--test-data", str(dirs["test"])]) == 0
    assert main(["eval", "--pred", str(dirs["run"]), "--gt", str(dirs["gt"]),
                 "--out", str(dirs["eval"])]) == 0
    assert main(["report", "--runs", str(dirs["eval"]), "--out", str(dirs["report"])]) == 0
    dirs["stats_path"] = stats_path
    return dirs


class TestPipelineSmoke:
    def test_phantom_outputs(self, pipeline):
        d = pipeline["train"]
        for name in ("case_000_image.mhd", "case_000_image.raw", "case_001_label.mhd",
                     "dataset.json", "manifest.json"):
            assert (d / name).exists()
        dataset = json.loads((d / "dataset.json").read_text())
        assert dataset["n_cases"] == 2
        assert dataset["cases"][1]["labels"] == "case_001_label.mhd"

    def test_manifest_layout(self, pipeline):
        doc = json.loads((pipeline["train"] / "manifest.json").read_text())
        assert set(doc) == MANIFEST_KEYS
        assert doc["command"] == "phantom"
        assert doc["version"] == __version__
        assert doc["outputs"] == sorted(doc["outputs"])
        assert doc["parameters"]["n"] == 2

    def test_stats_file_loads(self, pipeline):
        stats = load_stats(pipeline["stats_path"])
        assert stats.n_cases == 2
        assert int(stats.class_n[1]) == 2  # LV present in both cases

    def test_atlas_dir_loads(self, pipeline):
        atlas = load_atlas(pipeline["atlas"])
        assert atlas.case_count == 2
        sums = atlas.heatmaps.sum(axis=0)
        assert np.abs(sums - 1.0).max() < 1e-6

    def test_train_outputs(self, pipeline):
        run = pipeline["run"]
        model = load_model(run / "model.json")
        assert model.aux_weights is None
        assert (model.weights != 0.0).any()
        header = (run / "trace.csv").read_text().splitlines()[0]
        assert header.startswith("epoch,total")
        assert (run / "case_000_pred.mhd").exists()
        pred = read_volume(run / "case_000_pred.mhd")
        assert pred.dims == (24, 24, 24)

    def test_eval_report_json(self, pipeline):
        doc = json.loads((pipeline["eval"] / "report_case_000_label.json").read_text())
        assert doc["case_id"] == "case_000_label"
        assert set(doc["macro"]) >= {"dice", "jaccard", "hd_mm", "assd_mm"}
        assert 0.0 <= doc["classes"]["LV"]["dice"] <= 1.0

    def test_summary_layout(self, pipeline):
        lines = (pipeline["report"] / "summary.csv").read_text().splitlines()
        assert lines[0] == "method,dice_pct,jaccard_pct,hd_mm,assd_mm"
        assert lines[1].startswith("published_64cube_baseline,90.85,83.63,7.64,1.03")
        assert lines[2].startswith("baseline,")
        for cell in lines[2].split(",")[1:]:
            assert cell == "n/a" or len(cell.split(".")[1]) == 2
        md = (pipeline["report"] / "summary.md").read_text().splitlines()
        assert md[0] == "| Method | Dice (%) | Jaccard (%) | HD (mm) | ASSD (mm) |"


class TestExitCodes:
    def test_unknown_flag_is_usage_error(self, tmp_path, capsys):
        rc = main(["phantom", "--n", "1", "--out", str(tmp_path), "--bogus"])
        assert rc == 1
        assert capsys.readouterr().err.startswith("error: UsageError:")

    def test_missing_subcommand(self, capsys):
        assert main([]) == 1
        assert "UsageError" in capsys.readouterr().err

    def test_missing_input_path(self, tmp_path, capsys):
        rc = main(["stats", "--labels", str(tmp_path / "nope"), "--out",
                   str(tmp_path / "s.json")])
        assert rc == 1
        assert "UsageError" in capsys.readouterr().err

    def test_eval_shape_mismatch(self, tmp_path, capsys):
        small = Volume3(np.ones((4, 4, 4), dtype=np.uint8), (1.0, 1.0, 1.0))
        big = Volume3(np.ones((5, 5, 5), dtype=np.uint8), (1.0, 1.0, 1.0))
        write_volume(small, tmp_path / "pred.mhd")
        write_volume(big, tmp_path / "gt.mhd")
        rc = main(["eval", "--pred", str(tmp_path / "pred.mhd"),
                   "--gt", str(tmp_path / "gt.mhd"), "--out", str(tmp_path / "out")])
        assert rc == 1
        err = capsys.readouterr().err
        assert err.startswith("error: ShapeMismatch:")

    def test_invalid_report_json_is_internal_error(self, tmp_path, capsys):
        run = tmp_path / "run"
        run.mkdir()
        (run / "report_bad.json").write_text("{not json")
        rc = main(["report", "--runs", str(run), "--out", str(tmp_path / "out")])
        assert rc == 2
        assert capsys.readouterr().err.startswith("internal error:")

    def test_version_flag(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--version"])
        assert exc.value.code == 0
        assert __version__ in capsys.readouterr().out


class TestDeterminism:
    def test_rerun_differs_only_in_manifest_timestamp(self, tmp_path):
        out = tmp_path / "ph"
        argv = ["phantom", "--n", "1", "--size", "16", "--spacing", "6.0", "--out", str(out)]
        assert main(argv) == 0
        first = {p.name: p.read_bytes() for p in out.iterdir()}
        assert main(argv) == 0
        for p in sorted(out.iterdir()):
            if p.name == "manifest.json":
                a = json.loads(first[p.name])
                b = json.loads(p.read_bytes())
                a.pop("timestamp"), b.pop("timestamp")
                assert a == b
            else:
                assert p.read_bytes() == first[p.name], p.name

    def test_jobs_flag_never_changes_outputs(self, tmp_path):
        outs = []
        for jobs, name in ((1, "a"), (3, "b")):
            out = tmp_path / name
            assert main(["phantom", "--n", "4", "--size", "16", "--spacing", "6.0",
                         "--jobs", str(jobs), "--out", str(out)]) == 0
            outs.append(out)
        for f in sorted(outs[0].iterdir()):
            if f.name == "manifest.json":
                continue  # parameter echo includes --jobs by design
            assert f.read_bytes() == (outs[1] / f.name).read_bytes(), f.name


class TestPrep:
    def test_label_volume_recentered_into_fov(self, tmp_path):
        data = np.zeros((10, 10, 10), dtype=np.uint8)
        data[6:9, 6:9, 6:9] = 2
        write_volume(Volume3(data, (3.0, 3.0, 3.0)), tmp_path / "lab.mhd")
        out = tmp_path / "prep"
        rc = main(["prep", "--in", str(tmp_path / "lab.mhd"), "--out", str(out),
                   "--spacing", "3.0", "--size", "12", "--mode", "nearest"])
        assert rc == 0
        v = read_volume(out / "lab.mhd")
        assert v.dims == (12, 12, 12)
        assert set(np.unique(v.data)) == {0, 2}
        assert (v.data == 2).sum() == 27  # blob survives the shift intact
        doc = json.loads((out / "manifest.json").read_text())
        assert any(k.endswith("lab.raw") for k in doc["inputs"])


class TestGradcheckCommand:
    def test_module_entry_point(self, tmp_path):
        out = tmp_path / "gc.json"
        proc = subprocess.run(
            [sys.executable, "-m", "cardioprior.cli", "gradcheck", "--loss", "volume",
             "--size", "8", "--seed", "0", "--out", str(out)],
            capture_output=True, text=True, timeout=300,
        )
        assert proc.returncode == 0, proc.stderr
        report = json.loads(proc.stdout)
        assert report["loss"] == "volume"
        assert report["max_rel_err"] < 1e-6
        assert out.read_text() == proc.stdout
