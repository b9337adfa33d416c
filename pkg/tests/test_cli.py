"""CLI contract tests: exit codes, stdout/stderr split, file outputs."""

import hashlib
import json
import subprocess
import sys

import pytest

from hpfusion.cli import main
from hpfusion.dsl import DESK_DIMS, Dims, preset_spec, serialize_spec

from helpers import desk_fg_spec

SMALL_DIMS = Dims(d_q=6, d_v=6, t_q=4, t_v=4, t_o=4, n_classes=4)


@pytest.fixture
def spec_file(tmp_path):
    path = tmp_path / "spec.hpf"
    path.write_text(serialize_spec(desk_fg_spec(dims=SMALL_DIMS, rank=2)))
    return str(path)


def _gen(tmp_path, name, n=90, spec_dims=SMALL_DIMS, rank=2):
    path = tmp_path / name
    spec = desk_fg_spec(dims=spec_dims, rank=rank)
    spec_path = tmp_path / f"{name}.spec"
    spec_path.write_text(serialize_spec(spec))
    code = main(
        [
            "gen-data",
            str(spec_path),
            "--n",
            str(n),
            "--teacher-seed",
            "3",
            "--data-seed",
            "4",
            "--out",
            str(path),
        ]
    )
    assert code == 0
    return str(path)


class TestValidate:
    def test_valid_file(self, spec_file, capsys):
        assert main(["validate", spec_file]) == 0
        out = capsys.readouterr()
        assert out.out == "" and out.err == ""

    def test_invalid_plan_names_branch(self, tmp_path, capsys):
        text = serialize_spec(desk_fg_spec(dims=SMALL_DIMS, rank=3))
        broken = text.replace("sum(b1, b2);", "sum(b1);")
        path = tmp_path / "broken.hpf"
        path.write_text(broken)
        assert main(["validate", str(path)]) == 1
        assert "plan does not cover branch b2" in capsys.readouterr().err

    def test_missing_file(self, tmp_path, capsys):
        assert main(["validate", str(tmp_path / "absent.hpf")]) == 3
        assert "cannot read" in capsys.readouterr().err


class TestOracleCheck:
    def test_preset_passes(self, capsys):
        code = main(
            ["oracle-check", "--preset", "mutan_r5", "--force-identity", "--seeds", "25"]
        )
        assert code == 0
        report = json.loads(capsys.readouterr().out)
        assert report["max_rel_err"] <= 1e-10
        assert report["seeds"] == 25

    def test_corruption_detected(self, capsys):
        code = main(
            [
                "oracle-check",
                "--preset",
                "mutan_r5",
                "--force-identity",
                "--seeds",
                "3",
                "--corrupt",
                "N_2",
            ]
        )
        assert code == 1
        assert json.loads(capsys.readouterr().out)["max_rel_err"] > 1e-10

    def test_zero_seeds_is_usage_error(self, capsys):
        assert main(["oracle-check", "--preset", "mutan_r5", "--seeds", "0"]) == 2

    def test_nonidentity_spec_needs_flag(self, spec_file, capsys):
        assert main(["oracle-check", spec_file, "--seeds", "2"]) == 2
        assert "--force-identity" in capsys.readouterr().err

    def test_identity_spec_file_needs_no_flag(self, tmp_path):
        path = tmp_path / "identity.hpf"
        path.write_text(serialize_spec(preset_spec("mutan_r5", dims=SMALL_DIMS, rank=2)))
        assert main(["oracle-check", str(path), "--seeds", "3"]) == 0


class TestGradCheck:
    def test_presets_pass(self, capsys):
        for preset in ("mlb", "ne_fg", "ne_fg_mlp6"):
            code = main(["grad-check", "--preset", preset, "--seeds", "2"])
            report = json.loads(capsys.readouterr().out)
            assert code == 0, (preset, report)
            assert report["max_rel_err"] <= 1e-4

    def test_sign_flip_detected(self, capsys):
        code = main(
            ["grad-check", "--preset", "mlb", "--seeds", "1", "--flip-sign", "Wo"]
        )
        assert code == 1
        captured = capsys.readouterr()
        assert "worst coordinate" in captured.err
        assert "Wo" in captured.err

    def test_spec_file(self, spec_file):
        assert main(["grad-check", spec_file, "--seeds", "1"]) == 0


class TestGenData:
    def test_deterministic_bytes(self, tmp_path, capsys):
        a = _gen(tmp_path, "a.fqvd")
        b = _gen(tmp_path, "b.fqvd")
        ha = hashlib.sha256(open(a, "rb").read()).hexdigest()
        hb = hashlib.sha256(open(b, "rb").read()).hexdigest()
        assert ha == hb

    def test_summary_line(self, tmp_path, capsys):
        _gen(tmp_path, "c.fqvd", n=33)
        summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert summary["n"] == 33
        assert summary["classes"] == 4


class TestTrain:
    def test_writes_metrics_and_summary(self, tmp_path, spec_file, capsys):
        train_path = _gen(tmp_path, "train.fqvd", n=80)
        val_path = _gen(tmp_path, "val.fqvd", n=30)
        capsys.readouterr()
        out = tmp_path / "metrics.jsonl"
        code = main(
            [
                "train",
                spec_file,
                "--train",
                train_path,
                "--val",
                val_path,
                "--lr",
                "1e-3",
                "--epochs",
                "3",
                "--out",
                str(out),
            ]
        )
        assert code == 0
        lines = out.read_text().strip().splitlines()
        assert len(lines) == 3
        first = json.loads(lines[0])
        assert set(first) == {"epoch", "train_loss", "train_acc", "val_acc"}
        summary = json.loads(capsys.readouterr().out.strip())
        assert 0.0 <= summary["val_acc"] <= 1.0
        assert 1 <= summary["best_epoch"] <= 3

    def test_dims_mismatch_is_check_failure(self, tmp_path, capsys):
        train_path = _gen(tmp_path, "train.fqvd", n=20)
        other_spec = tmp_path / "other.hpf"
        other_spec.write_text(
            serialize_spec(desk_fg_spec(dims=DESK_DIMS, rank=2))
        )
        code = main(
            [
                "train",
                str(other_spec),
                "--train",
                train_path,
                "--val",
                train_path,
                "--epochs",
                "1",
            ]
        )
        assert code == 1
        assert "does not match spec dims" in capsys.readouterr().err


class TestSearch:
    def test_grid_emits_25_result_lines(self, tmp_path, capsys):
        train_path = _gen(tmp_path, "train.fqvd", n=60)
        val_path = _gen(tmp_path, "val.fqvd", n=24)
        capsys.readouterr()
        out = tmp_path / "results.jsonl"
        spec_path = tmp_path / "base.hpf"
        spec_path.write_text(
            serialize_spec(preset_spec("mutan_r5", dims=SMALL_DIMS, rank=2))
        )
        code = main(
            [
                "search",
                str(spec_path),
                "--train",
                train_path,
                "--val",
                val_path,
                "--epochs",
                "1",
                "--out",
                str(out),
            ]
        )
        assert code == 0
        lines = out.read_text().strip().splitlines()
        assert len(lines) == 25
        ranks = [json.loads(line)["rank"] for line in lines]
        assert ranks == list(range(1, 26))

    def test_random_budget_and_determinism(self, tmp_path, capsys):
        train_path = _gen(tmp_path, "train.fqvd", n=40)
        val_path = _gen(tmp_path, "val.fqvd", n=16)
        capsys.readouterr()
        spec_path = tmp_path / "base.hpf"
        spec_path.write_text(
            serialize_spec(preset_spec("mutan_r5", dims=SMALL_DIMS, rank=1))
        )

        def run(name):
            out = tmp_path / name
            code = main(
                [
                    "search",
                    str(spec_path),
                    "--train",
                    train_path,
                    "--val",
                    val_path,
                    "--random",
                    "4",
                    "--epochs",
                    "1",
                    "--seed",
                    "7",
                    "--out",
                    str(out),
                ]
            )
            assert code == 0
            return out.read_bytes()

        first = run("r1.jsonl")
        second = run("r2.jsonl")
        assert first == second
        assert len(first.strip().splitlines()) == 4


class TestPresets:
    def test_lists_all(self, capsys):
        assert main(["presets"]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        names = [json.loads(line)["name"] for line in lines]
        assert names == ["mlb", "mutan_r5", "ne", "ne_fg", "ne_ps", "ne_fg_mlp6"]
        for line in lines:
            assert "fusion {" in json.loads(line)["spec"]


class TestUsage:
    def test_unknown_subcommand_exits_2(self):
        with pytest.raises(SystemExit) as err:
            main(["frobnicate"])
        assert err.value.code == 2

    def test_missing_spec_source(self, capsys):
        assert main(["grad-check", "--seeds", "1"]) == 2
        assert "required" in capsys.readouterr().err

    def test_console_script_runs(self):
        proc = subprocess.run(
            [sys.executable, "-m", "hpfusion.cli", "--version"],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 0
        assert "hpfusion" in proc.stdout
