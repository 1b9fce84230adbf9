"""End-to-end checks of the command line interface."""

import json
import subprocess
import sys

import pytest

from blockrelay.cli import _parse_grid, dispatch


def run_ok(argv):
    status = dispatch(argv)
    assert status == 0, f"{argv} exited {status}"


class TestParsing:
    def test_grid_inclusive_range(self):
        grid = _parse_grid("0.7:1.0:0.02")
        assert len(grid) == 16
        assert grid[0] == 0.7
        assert grid[-1] == 1.0

    def test_grid_single_value_and_list(self):
        assert _parse_grid("0.9") == [0.9]
        assert _parse_grid("0.8,0.95") == [0.8, 0.95]

    def test_grid_rejects_bad_step(self):
        with pytest.raises(ValueError):
            _parse_grid("0.9:0.8:0.05")

    def test_help_exits_zero(self, capsys):
        with pytest.raises(SystemExit) as exc:
            dispatch(["sweep", "--help"])
        assert exc.value.code == 0
        assert "overlap" in capsys.readouterr().out

    def test_unknown_subcommand_exits_two(self, capsys):
        with pytest.raises(SystemExit) as exc:
            dispatch(["nonsense"])
        assert exc.value.code == 2

    def test_validation_error_exits_two(self, tmp_path, capsys):
        status = dispatch(
            [
                "sweep",
                "--n",
                "10",
                "--mempool",
                "5",
                "--overlap",
                "1.0",
                "--csv",
                str(tmp_path / "x.csv"),
            ]
        )
        assert status == 2
        assert "error:" in capsys.readouterr().err


class TestOutputs:
    def test_frontier_rows_and_manifest(self, tmp_path):
        out = tmp_path / "f.csv"
        run_ok(
            [
                "frontier-sim",
                "--accounts",
                "2000",
                "--mean-changes",
                "10",
                "--intervals",
                "4",
                "--seed",
                "1",
                "--quiet",
                "--csv",
                str(out),
            ]
        )
        lines = out.read_bytes().split(b"\n")
        assert lines[0] == b"interval,changes,full_bytes,iblt_bytes,recovered"
        assert len([ln for ln in lines if ln]) == 5
        assert b"\r" not in out.read_bytes()
        manifest = json.loads((tmp_path / "f.csv.manifest.json").read_text())
        assert manifest["subcommand"] == "frontier-sim"
        assert manifest["seed"] == 1
        assert manifest["parameters"]["accounts"] == 2000
        assert manifest["toolkit_version"]
        assert manifest["started_utc"] <= manifest["finished_utc"]

    def test_json_mode_prints_rows(self, capsys):
        run_ok(
            [
                "ordering-sim",
                "--n",
                "40",
                "--ratio",
                "1.3",
                "--trials",
                "2",
                "--seed",
                "0",
                "--json",
            ]
        )
        rows = json.loads(capsys.readouterr().out)
        assert len(rows) == 2
        assert rows[0]["mode"] == "csp"
        assert set(rows[0]) >= {"trial", "recovered", "payload_bytes"}

    def test_quiet_silences_summary(self, tmp_path, capsys):
        run_ok(
            [
                "filter-bench",
                "--n",
                "200",
                "--probes",
                "2000",
                "--grid",
                "8:6",
                "--quiet",
                "--csv",
                str(tmp_path / "b.csv"),
            ]
        )
        assert capsys.readouterr().out == ""

    def test_float_formatting_is_six_significant_digits(self, tmp_path):
        out = tmp_path / "b.csv"
        run_ok(
            [
                "filter-bench",
                "--n",
                "300",
                "--probes",
                "5000",
                "--grid",
                "8:6",
                "--quiet",
                "--csv",
                str(out),
            ]
        )
        target_field = out.read_text().splitlines()[1].split(",")[4]
        assert len(target_field.replace(".", "").replace("0.", "").lstrip("0")) <= 6

    def test_sweep_metadata_carries_constants_and_crossover(self, tmp_path):
        out = tmp_path / "s.csv"
        run_ok(
            [
                "sweep",
                "--n",
                "100",
                "--mempool",
                "800",
                "--overlap",
                "0.9,1.0",
                "--trials",
                "2",
                "--seed",
                "5",
                "--quiet",
                "--csv",
                str(out),
            ]
        )
        header = out.read_text().splitlines()[0]
        assert header == (
            "overlap,graphene_bytes,compact_bytes,xthin_bytes,"
            "missing_tx_count,retries,success_rate"
        )
        manifest = json.loads((tmp_path / "s.csv.manifest.json").read_text())
        md = manifest["metadata"]
        assert md["compact_header_bytes"] == 84
        assert md["xthin_bloom_fpr"] == 1e-3
        assert "crossover_overlap" in md

    def test_graphene_sim_transcript_rows(self, tmp_path):
        out = tmp_path / "g.csv"
        run_ok(
            [
                "graphene-sim",
                "--blocks",
                "2",
                "--block-size",
                "80",
                "--mempool",
                "600",
                "--overlap",
                "1.0",
                "--seed",
                "3",
                "--quiet",
                "--csv",
                str(out),
            ]
        )
        lines = out.read_text().splitlines()
        assert lines[0] == "block,direction,msg_type,bytes"
        first = lines[1].split(",")
        assert first[:3] == ["0", "s2r", "1"]
        assert {ln.split(",")[0] for ln in lines[1:]} == {"0", "1"}


class TestPeerscoreEval:
    def test_golden_file_passes(self, tmp_path, capsys):
        out = tmp_path / "p.csv"
        status = dispatch(
            [
                "peerscore",
                "eval",
                "--json",
                "tests/data/peerscore_golden.json",
                "--csv",
                str(out),
            ]
        )
        assert status == 0
        assert "match" in capsys.readouterr().out
        header = out.read_text().splitlines()[0]
        assert header == "op,name,field,expected,computed,match"

    def test_mismatch_exits_one(self, tmp_path):
        bad = [
            {
                "op": "peer_score",
                "name": "wrong on purpose",
                "inputs": {"connection_age": 1.0, "weight": 0.0, "quality": 1.0},
                "expected": {"score": 999.0},
            }
        ]
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(bad))
        assert dispatch(["peerscore", "eval", "--json", str(path), "--quiet"]) == 1


class TestReplay:
    def replay_matches(self, tmp_path, argv, name):
        out = tmp_path / name
        run_ok(argv + ["--quiet", "--csv", str(out)])
        copy = tmp_path / ("replayed_" + name)
        run_ok(
            ["replay", str(out) + ".manifest.json", "--csv", str(copy)]
        )
        assert out.read_bytes() == copy.read_bytes()

    def test_frontier_replay(self, tmp_path):
        self.replay_matches(
            tmp_path,
            [
                "frontier-sim",
                "--accounts",
                "1500",
                "--mean-changes",
                "8",
                "--intervals",
                "3",
                "--seed",
                "9",
            ],
            "f.csv",
        )

    def test_sweep_replay(self, tmp_path):
        self.replay_matches(
            tmp_path,
            [
                "sweep",
                "--n",
                "80",
                "--mempool",
                "500",
                "--overlap",
                "0.95:1.0:0.05",
                "--trials",
                "2",
                "--seed",
                "4",
            ],
            "s.csv",
        )

    def test_replay_defaults_to_original_path(self, tmp_path):
        out = tmp_path / "o.csv"
        argv = [
            "ordering-sim",
            "--n",
            "30",
            "--ratio",
            "1.3",
            "--trials",
            "2",
            "--seed",
            "7",
            "--quiet",
            "--csv",
            str(out),
        ]
        run_ok(argv)
        original = out.read_bytes()
        out.unlink()
        run_ok(["replay", str(out) + ".manifest.json"])
        assert out.read_bytes() == original


def test_console_entry_point_runs():
    proc = subprocess.run(
        [sys.executable, "-m", "blockrelay.cli", "--version"],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0
    assert "blockrelay" in proc.stdout
