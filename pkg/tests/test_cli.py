import csv
import io
import json
import shutil
import subprocess
import sys

import pytest

from edgeflow.cli import EXIT_BUDGET, EXIT_INVALID, EXIT_OK, EXIT_USAGE, main
from edgeflow.workloads import BUNDLE_ROOT, VIDEO_BUNDLE


@pytest.fixture
def small_scenario(tmp_path):
    def make(extra="", name="small"):
        path = tmp_path / f"{name}.scn"
        path.write_text(f"""\
scenario: {name}
workflow_dir: {VIDEO_BUNDLE}
mode: closed
concurrency: 4
duration: 1h
requests: 30
seed: 7
video.frame_bytes: 64
{extra}""")
        return path
    return make


@pytest.fixture
def bundle_copy(tmp_path):
    dst = tmp_path / "video"
    shutil.copytree(VIDEO_BUNDLE, dst)
    for p in dst.glob("scenario_*"):
        p.unlink()
    return dst


class TestValidate:
    def test_shipped_bundles(self, capsys):
        assert main(["validate", str(BUNDLE_ROOT)]) == EXIT_OK
        out = capsys.readouterr().out
        assert out.count(": ok (0 errors") == 5

    def test_missing_dir(self, tmp_path):
        assert main(["validate", str(tmp_path / "nope")]) == EXIT_USAGE

    def test_empty_dir(self, tmp_path):
        assert main(["validate", str(tmp_path)]) == EXIT_INVALID

    def test_syntax_error_has_location(self, bundle_copy, capsys):
        fn = bundle_copy / "face-detection.fn"
        lines = fn.read_text().splitlines()
        at = lines.index("tier: edge")
        lines[at] = "  " + lines[at]
        fn.write_text("\n".join(lines) + "\n")
        assert main(["validate", str(bundle_copy)]) == EXIT_INVALID
        out = capsys.readouterr().out
        assert f"{fn}:{at + 1}: error: TemplateSyntaxError" in out

    def test_unknown_successor(self, bundle_copy, capsys):
        fn = bundle_copy / "generator.fn"
        fn.write_text(fn.read_text().replace("next_function: motion-detection", "next_function: motion"))
        assert main(["validate", str(bundle_copy)]) == EXIT_INVALID
        assert "UnknownSuccessor" in capsys.readouterr().out

    def test_unresolved_handler(self, bundle_copy, capsys):
        fn = bundle_copy / "face-recognition.fn"
        fn.write_text(fn.read_text().replace("video.recognize", "video.nothing"))
        assert main(["validate", str(bundle_copy)]) == EXIT_INVALID
        assert "UnresolvedHandler" in capsys.readouterr().out

    def test_chain_mismatch_is_a_warning(self, bundle_copy, capsys):
        fn = bundle_copy / "face-recognition.fn"
        fn.write_text(fn.read_text().replace("input: minio://has_face", "input: s3://has_face"))
        assert main(["validate", str(bundle_copy)]) == EXIT_OK
        assert ": warning:" in capsys.readouterr().out


class TestRun:
    def test_writes_reports(self, small_scenario, tmp_path, capsys):
        out = tmp_path / "out"
        assert main(["run", str(small_scenario()), "--out", str(out)]) == EXIT_OK
        report = json.loads((out / "report.json").read_text())
        assert report["workflow"]["requests"] == 30
        rows = list(csv.DictReader(io.StringIO((out / "report.csv").read_text())))
        assert rows[-1]["kind"] == "end_to_end"
        assert "30 requests, 0 failed" in capsys.readouterr().out

    def test_same_seed_same_bytes(self, small_scenario, tmp_path):
        scn = small_scenario()
        for d in ("a", "b"):
            assert main(["run", str(scn), "--out", str(tmp_path / d)]) == EXIT_OK
        assert (tmp_path / "a/report.json").read_bytes() == (tmp_path / "b/report.json").read_bytes()
        assert (tmp_path / "a/report.csv").read_bytes() == (tmp_path / "b/report.csv").read_bytes()

    def test_repeats_use_consecutive_seeds(self, small_scenario, tmp_path):
        out = tmp_path / "rep"
        assert main(["run", str(small_scenario()), "--out", str(out), "--repeats", "3"]) == EXIT_OK
        seeds = [json.loads((out / f"report-{i}.json").read_text())["config"]["seed"] for i in (1, 2, 3)]
        assert seeds == ["7", "8", "9"]

    def test_malformed_scenario(self, tmp_path, capsys):
        bad = tmp_path / "bad.scn"
        bad.write_text(f"workflow_dir: {VIDEO_BUNDLE}\nduration: 1s\nconcurrency: lots\n")
        assert main(["run", str(bad), "--out", str(tmp_path / "o")]) == EXIT_USAGE
        assert "bad.scn" in capsys.readouterr().err

    def test_failure_budget(self, small_scenario, tmp_path):
        # a 1 ms sync timeout fails every request that crosses tiers
        scn = small_scenario("sync_timeout: 1\ndelay.iot.edge: 5ms\npreset: IoT and edge\n")
        out = tmp_path / "fail"
        assert main(["run", str(scn), "--out", str(out)]) == EXIT_BUDGET
        assert main(["run", str(scn), "--out", str(out), "--failure-budget", "1.0"]) == EXIT_OK

    def test_bad_usage(self):
        assert main(["run"]) == EXIT_USAGE
        assert main(["frobnicate"]) == EXIT_USAGE


class TestReport:
    def test_formats(self, small_scenario, tmp_path, capsys):
        out = tmp_path / "out"
        main(["run", str(small_scenario()), "--out", str(out)])
        capsys.readouterr()
        assert main(["report", str(out), "--format", "csv"]) == EXIT_OK
        assert capsys.readouterr().out == (out / "report.csv").read_text()
        assert main(["report", str(out), "--format", "json"]) == EXIT_OK
        assert capsys.readouterr().out == (out / "report.json").read_text()
        assert main(["report", str(out)]) == EXIT_OK
        table = capsys.readouterr().out
        assert "face-detection" in table and "end-to-end" in table

    def test_compare(self, small_scenario, tmp_path, capsys):
        main(["run", str(small_scenario("preset: IoT and edge\n", "ie")), "--out", str(tmp_path / "ie")])
        main(["run", str(small_scenario("preset: IoT and cloud\n", "ic")), "--out", str(tmp_path / "ic")])
        capsys.readouterr()
        assert main(["report", str(tmp_path / "ie"), "--compare", str(tmp_path / "ic")]) == EXIT_OK
        out = capsys.readouterr().out
        assert "edge->cloud" in out and "%" in out

    def test_missing_report(self, tmp_path):
        assert main(["report", str(tmp_path)]) == EXIT_USAGE


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "edgeflow", "validate", str(VIDEO_BUNDLE)],
                          capture_output=True, text=True, timeout=60)
    assert proc.returncode == 0 and "ok (0 errors, 0 warnings)" in proc.stdout
