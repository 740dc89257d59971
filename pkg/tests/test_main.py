"""
main モジュール（CLI）の結合テスト。机上規模（d=1, m=4, T=0.01, dt=1e-3）で実行する。
"""

import json
import logging
import math
import os

import numpy as np
import pytest

from src.config_loader import load_run_config, resolve_config
from src.data_io import read_json, read_trajectory_csv, write_json
from src.main import (
    EXIT_BLOWUP,
    EXIT_CONFIG,
    EXIT_OK,
    EXIT_VALIDATION,
    EXIT_VERIFICATION,
    build_parser,
    load_env,
    main,
    output_root,
    run_validation,
)
from src.models import Domain
from src.spectral_core import build_basis


def write_config(path, **sections):
    data = {
        "basis": {"modes": 4},
        "time": {"horizon": 0.01, "dt": 1e-3},
        "verification": {"paths": 4, "shard_size": 2, "initial_energy_samples": 4},
    }
    data.update(sections)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f)
    return str(path)


def run(command, config_file, output, *extra):
    return main([command, "--config", config_file, "--output", str(output), *extra])


class TestOutputRoot:
    def test_precedence(self):
        """--output > SNCH_OUTPUT_ROOT > output.directory"""
        config = resolve_config({"output": {"directory": "from_config"}})
        assert output_root(config, {}) == "from_config"
        assert output_root(config, {"SNCH_OUTPUT_ROOT": "from_env"}) == "from_env"
        assert output_root(config, {"SNCH_OUTPUT_ROOT": "from_env"}, "from_cli") == "from_cli"


class TestLoadEnv:
    def test_log_level_from_dotenv(self, tmp_path, monkeypatch):
        """.env の SNCH_LOG_LEVEL はインポート後でもルートロガーに反映される"""
        (tmp_path / ".env").write_text("SNCH_LOG_LEVEL=ERROR\n", encoding="utf-8")
        monkeypatch.chdir(tmp_path)
        monkeypatch.setenv("SNCH_LOG_LEVEL", "INFO")
        monkeypatch.delenv("SNCH_LOG_LEVEL")
        root = logging.getLogger()
        previous = root.level
        try:
            env = load_env()
            assert env["SNCH_LOG_LEVEL"] == "ERROR"
            assert root.level == logging.ERROR
        finally:
            root.setLevel(previous)


class TestParser:
    def test_defaults(self):
        args = build_parser().parse_args(["simulate", "--config", "c.json"])
        assert args.path_index == 0
        assert args.paths is None
        assert args.output is None

    def test_unknown_command(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["train", "--config", "c.json"])


class TestValidate:
    def test_desk_config_passes(self, tmp_path):
        """J ≡ 2.5 では c0 = 1.5 でゲートがすべて通る"""
        config_file = write_config(tmp_path / "config.json")
        out = tmp_path / "out"
        assert run("validate", config_file, out) == EXIT_OK

        data = read_json(str(out / "validation.json"))
        gates = {g["name"]: g for g in data["report"]["gates"]}
        assert gates["c0_positive"]["measured"]["c0"] == pytest.approx(1.5)
        n = build_basis(Domain(dim=1, lengths=(1.0,)), 4).grid_shape[0]
        assert gates["basis_memory"]["measured"]["sup_growth_constant"] == pytest.approx(
            math.sqrt(2.0) * math.cos(math.pi / (2 * n)), rel=1e-12
        )
        assert gates["initial_energy"]["measured"]["q_prime"] == pytest.approx(21.0)
        assert data["meta"]["config_hash"] == load_run_config(config_file).config_hash
        assert "master_seed" in data["meta"]["defaults_applied"]
        assert (out / "validation.txt").exists()

    def test_unit_kernel_fails(self, tmp_path):
        """J ≡ 1 では c0 = 0 のため終了コード 2"""
        config_file = write_config(tmp_path / "config.json", kernel={"level": 1.0})
        out = tmp_path / "out"
        assert run("validate", config_file, out) == EXIT_VALIDATION
        text = (out / "validation.txt").read_text(encoding="utf-8")
        assert "c0 nonpositive" in text

    def test_basis_memory_gate(self, tmp_path):
        config_file = write_config(tmp_path / "config.json", basis={"modes": 16, "max_grid_points": 8})
        report = run_validation(load_run_config(config_file))
        assert not report.passed
        assert [g.name for g in report.gates] == ["basis_memory"]

    def test_flat_noise_fails_trace_gate(self, tmp_path):
        config_file = write_config(tmp_path / "config.json", noise={"q": 0.0, "sigma2": 1.0, "probe_depth": 64})
        report = run_validation(load_run_config(config_file))
        gates = {g.name: g for g in report.gates}
        assert not gates["trace_kq"].passed
        assert "initial_energy" not in gates

    def test_unknown_key(self, tmp_path):
        config_file = write_config(tmp_path / "config.json", solver={"order": 2})
        assert run("validate", config_file, tmp_path / "out") == EXIT_CONFIG

    def test_missing_config(self, tmp_path):
        assert run("validate", str(tmp_path / "missing.json"), tmp_path / "out") == EXIT_CONFIG

    def test_other_commands_stop_at_gate(self, tmp_path):
        """ゲート不成立ならシミュレーションは行わない"""
        config_file = write_config(tmp_path / "config.json", kernel={"level": 1.0})
        out = tmp_path / "out"
        assert run("simulate", config_file, out) == EXIT_VALIDATION
        assert (out / "validation.json").exists()
        assert not (out / "trajectory_00000.csv").exists()


class TestSimulate:
    def test_equilibrium(self, tmp_path):
        """Q = 0 で定数の初期値は動かない"""
        config_file = write_config(
            tmp_path / "config.json",
            noise={"sigma2": 0.0},
            initial_condition={"kind": "deterministic", "mean": [0.3]},
            output={"directory": "unused", "gnuplot": True},
        )
        out = tmp_path / "out"
        assert run("simulate", config_file, out, "--path-index", "2") == EXIT_OK

        basis = build_basis(Domain(dim=1, lengths=(1.0,)), 4)
        traj, header = read_trajectory_csv(str(out / "trajectory_00002.csv"), basis)
        assert header["status"] == "completed"
        assert header["config_hash"] == load_run_config(config_file).config_hash
        assert len(traj.times) == 11
        np.testing.assert_allclose(traj.coeffs, np.tile([0.3, 0.0, 0.0, 0.0], (11, 1)), atol=1e-12)
        assert (out / "path_00002.csv").exists()
        assert (out / "trajectory_00002.dat").exists()

    def test_blowup_exit_code(self, tmp_path):
        config_file = write_config(
            tmp_path / "config.json",
            time={"horizon": 0.01, "dt": 1e-3, "blowup_threshold": 0.1},
            initial_condition={"kind": "deterministic", "mean": [0.5]},
        )
        out = tmp_path / "out"
        assert run("simulate", config_file, out) == EXIT_BLOWUP
        report = read_json(str(out / "simulate_00000.json"))["report"]
        assert report["status"] == "blowup"
        # 初期状態で閾値を超えるので記録は 1 つもない
        assert report["blowup_step"] == 0
        assert report["records"] == 0
        assert report["t_final"] == 0.0
        assert report["final_h_sq"] is None

    def test_blowup_at_start_in_ensemble(self, tmp_path):
        config_file = write_config(
            tmp_path / "config.json",
            time={"horizon": 0.01, "dt": 1e-3, "blowup_threshold": 0.1},
            initial_condition={"kind": "deterministic", "mean": [0.5]},
        )
        out = tmp_path / "out"
        assert run("ensemble", config_file, out) == EXIT_BLOWUP
        report = read_json(str(out / "ensemble.json"))["report"]
        assert report["blowups"] == [0, 1, 2, 3]
        assert report["completed"] == 0


class TestEnsemble:
    def test_resume_gives_identical_aggregate(self, tmp_path):
        """途中のシャードから再開しても集計は変わらない"""
        config_file = write_config(tmp_path / "config.json")
        out = tmp_path / "out"
        assert run("ensemble", config_file, out) == EXIT_OK
        first = read_json(str(out / "ensemble.json"))
        assert first["report"]["paths"] == 4
        assert first["report"]["completed"] == 4

        ledger = str(out / "ensemble" / "completed_shards.json")
        saved = read_json(ledger)
        assert saved["ranges"] == {"0": [0, 2], "1": [2, 4]}
        write_json({"config_hash": saved["config_hash"], "shards": [0], "ranges": {"0": [0, 2]}}, ledger)
        os.remove(out / "ensemble" / "shard_00001.json")
        assert run("ensemble", config_file, out) == EXIT_OK
        assert read_json(str(out / "ensemble.json")) == first

    def test_resume_with_more_paths_recomputes_grown_shard(self, tmp_path):
        """--paths を増やして再開すると、範囲が変わったシャードは計算し直す"""
        config_file = write_config(
            tmp_path / "config.json",
            verification={"paths": 4, "shard_size": 3, "initial_energy_samples": 4},
        )
        out = tmp_path / "out"
        assert run("ensemble", config_file, out, "--paths", "4") == EXIT_OK
        assert run("ensemble", config_file, out, "--paths", "6") == EXIT_OK
        resumed = read_json(str(out / "ensemble.json"))
        assert resumed["meta"]["paths"] == 6
        assert resumed["report"]["paths"] == 6
        assert resumed["report"]["completed"] == 6
        assert read_json(str(out / "ensemble" / "completed_shards.json"))["ranges"] == {"0": [0, 3], "1": [3, 6]}

        fresh = tmp_path / "fresh"
        assert run("ensemble", config_file, fresh, "--paths", "6") == EXIT_OK
        assert read_json(str(fresh / "ensemble.json"))["report"] == resumed["report"]

    def test_stale_ledger_is_reset(self, tmp_path):
        config_file = write_config(tmp_path / "config.json")
        out = tmp_path / "out"
        ledger = out / "ensemble" / "completed_shards.json"
        write_json({"config_hash": "stale", "shards": [0, 1]}, str(ledger))
        assert run("ensemble", config_file, out) == EXIT_OK
        assert (out / "ensemble" / "shard_00000.json").exists()
        assert read_json(str(ledger))["config_hash"] == load_run_config(config_file).config_hash

    def test_paths_override(self, tmp_path):
        config_file = write_config(tmp_path / "config.json")
        out = tmp_path / "out"
        assert run("ensemble", config_file, out, "--paths", "3") == EXIT_OK
        report = read_json(str(out / "ensemble.json"))
        assert report["report"]["paths"] == 3
        assert report["meta"]["paths"] == 3


class TestVerify:
    def test_verify_weak_writes_report(self, tmp_path):
        config_file = write_config(tmp_path / "config.json")
        out = tmp_path / "out"
        code = run("verify-weak", config_file, out)
        assert code in (EXIT_OK, EXIT_VERIFICATION)

        data = read_json(str(out / "verify_weak.json"))
        assert len(data["report"]["entries"]) == 9
        assert data["report"]["paths"] == 4
        assert (code == EXIT_OK) == data["report"]["passed"]
        assert (out / "verify_weak.txt").exists()

    def test_verify_energy_deterministic(self, tmp_path):
        """Q = 0 でもエネルギー収支のレポートが出る"""
        config_file = write_config(
            tmp_path / "config.json",
            noise={"sigma2": 0.0},
            verification={"halvings": 1, "energy_halving_factor": 1.2},
        )
        out = tmp_path / "out"
        code = run("verify-energy", config_file, out)
        assert code in (EXIT_OK, EXIT_VERIFICATION)
        report = read_json(str(out / "verify_energy.json"))["report"]
        assert report["h_norm"]["functional"] == "h_norm"
