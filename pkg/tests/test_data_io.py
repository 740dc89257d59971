"""
data_io モジュールのユニットテスト
"""

import json

import numpy as np
import pytest

from src.data_io import (
    load_completed_shards,
    load_kernel_table,
    load_shard_ranges,
    read_json,
    read_path_csv,
    read_path_npz,
    read_trajectory_csv,
    read_trajectory_npz,
    save_completed_shards,
    write_json,
    write_kernel_table,
    write_path_csv,
    write_path_npz,
    write_trajectory_csv,
    write_trajectory_npz,
)
from src.models import Domain, KernelSpec, NoiseSpec, SolverConfig, SpectralField, VelocitySpec
from src.noise import sample_path
from src.solver import simulate
from src.spectral_core import build_basis


def make_config(sigma2=0.01, blowup_threshold=1e3) -> SolverConfig:
    return SolverConfig(
        basis=build_basis(Domain(dim=1, lengths=(1.0,)), 4),
        kernel=KernelSpec(family="constant", level=2.5),
        velocity=VelocitySpec(),
        noise=NoiseSpec(sigma2=sigma2, q=2.0, master_seed=3),
        T=0.01,
        dt=1e-3,
        blowup_threshold=blowup_threshold,
    )


def make_field(config, coeffs) -> SpectralField:
    values = np.zeros(config.basis.m)
    values[: len(coeffs)] = coeffs
    return SpectralField(coeffs=values, basis=config.basis)


class TestWienerPathFiles:
    def test_csv_keeps_increments_exactly(self, tmp_path):
        """repr で書くので読み戻した増分は完全一致する"""
        config = make_config()
        path = sample_path(config.noise, config.basis, 10, 1e-3, 4)
        filepath = str(tmp_path / "paths" / "path.csv")
        write_path_csv(path, filepath, config_hash="abc")

        loaded = read_path_csv(filepath)
        np.testing.assert_array_equal(loaded.increments, path.increments)
        assert loaded.lineage == (3, 4)
        assert loaded.dt == 1e-3
        with open(filepath, encoding="utf-8") as f:
            assert "# config_hash: abc\n" in f.read()

    def test_npz(self, tmp_path):
        config = make_config()
        path = sample_path(config.noise, config.basis, 6, 1e-3, 1)
        filepath = str(tmp_path / "path.npz")
        write_path_npz(path, filepath)
        loaded = read_path_npz(filepath)
        np.testing.assert_array_equal(loaded.increments, path.increments)
        assert loaded.lineage == path.lineage

    def test_csv_missing_header(self, tmp_path):
        filepath = tmp_path / "path.csv"
        filepath.write_text("step,mode,increment\n0,0,0.1\n", encoding="utf-8")
        with pytest.raises(ValueError):
            read_path_csv(str(filepath))

    def test_file_not_found(self):
        with pytest.raises(FileNotFoundError):
            read_path_csv("/nonexistent/path.csv")


class TestTrajectoryFiles:
    def test_csv_header_and_values(self, tmp_path):
        config = make_config()
        traj = simulate(config, make_field(config, [0.0, 0.1]), path_index=2)
        filepath = str(tmp_path / "trajectory.csv")
        write_trajectory_csv(traj, filepath)

        loaded, header = read_trajectory_csv(filepath, config.basis)
        np.testing.assert_array_equal(loaded.times, traj.times)
        np.testing.assert_array_equal(loaded.coeffs, traj.coeffs)
        assert header["status"] == "completed"
        assert header["path_index"] == "2"
        assert loaded.config_hash == traj.config_hash

    def test_blowup_status_survives(self, tmp_path):
        """爆発した軌道は status と blowup_step を保持する"""
        config = make_config(sigma2=0.0, blowup_threshold=0.1)
        traj = simulate(config, make_field(config, [0.5]))
        filepath = str(tmp_path / "trajectory.csv")
        write_trajectory_csv(traj, filepath)

        loaded, _ = read_trajectory_csv(filepath, config.basis)
        assert loaded.status == "blowup"
        assert loaded.blowup_step == 0
        assert not loaded.completed

    def test_mode_mismatch(self, tmp_path):
        config = make_config()
        traj = simulate(config, make_field(config, [0.0, 0.1]))
        filepath = str(tmp_path / "trajectory.csv")
        write_trajectory_csv(traj, filepath)
        with pytest.raises(ValueError):
            read_trajectory_csv(filepath, build_basis(Domain(dim=1, lengths=(1.0,)), 8))

    def test_npz(self, tmp_path):
        config = make_config()
        traj = simulate(config, make_field(config, [0.0, 0.1]), path_index=1)
        filepath = str(tmp_path / "trajectory.npz")
        write_trajectory_npz(traj, filepath)
        loaded, header = read_trajectory_npz(filepath, config.basis)
        np.testing.assert_array_equal(loaded.coeffs, traj.coeffs)
        assert header["path_index"] == "1"
        assert loaded.status == "completed"


class TestKernelTable:
    def test_load(self, tmp_path):
        offsets = np.linspace(-1.0, 1.0, 7)
        values = np.exp(-offsets ** 2)
        filepath = str(tmp_path / "kernel.csv")
        write_kernel_table(filepath, (offsets,), values)
        np.testing.assert_allclose(load_kernel_table(filepath, dim=1), values)

    def test_2d(self, tmp_path):
        offsets = (np.linspace(-1.0, 1.0, 3), np.linspace(-0.5, 0.5, 5))
        values = np.arange(15.0).reshape(3, 5)
        filepath = str(tmp_path / "kernel.csv")
        write_kernel_table(filepath, offsets, values)
        np.testing.assert_allclose(load_kernel_table(filepath), values)

    def test_even_shape_rejected(self, tmp_path):
        """各軸の点数は 2N−1（奇数）"""
        filepath = str(tmp_path / "kernel.csv")
        write_kernel_table(filepath, (np.linspace(-1.0, 1.0, 4),), np.ones(4))
        with pytest.raises(ValueError):
            load_kernel_table(filepath)

    def test_offsets_must_be_centered(self, tmp_path):
        filepath = str(tmp_path / "kernel.csv")
        write_kernel_table(filepath, (np.array([0.0, 1.0, 2.0]),), np.ones(3))
        with pytest.raises(ValueError):
            load_kernel_table(filepath)

    def test_dim_mismatch(self, tmp_path):
        filepath = str(tmp_path / "kernel.csv")
        write_kernel_table(filepath, (np.linspace(-1.0, 1.0, 3),), np.ones(3))
        with pytest.raises(ValueError):
            load_kernel_table(filepath, dim=2)

    def test_missing_header(self, tmp_path):
        filepath = tmp_path / "kernel.csv"
        filepath.write_text("x1,value\n0.0,1.0\n", encoding="utf-8")
        with pytest.raises(ValueError):
            load_kernel_table(str(filepath))


class TestShardLedger:
    def test_save_merges(self, tmp_path):
        """保存のたびに既存の完了番号とマージされる"""
        filepath = str(tmp_path / "ensemble" / "completed_shards.json")
        save_completed_shards({0}, filepath, "hash-a")
        save_completed_shards({2}, filepath, "hash-a")
        assert load_completed_shards(filepath) == {0, 2}
        assert read_json(filepath)["config_hash"] == "hash-a"

    def test_load_nonexistent(self, tmp_path):
        assert load_completed_shards(str(tmp_path / "nonexistent.json")) == set()

    def test_load_corrupt(self, tmp_path):
        filepath = tmp_path / "completed_shards.json"
        filepath.write_text("{broken", encoding="utf-8")
        assert load_completed_shards(str(filepath)) == set()
        assert load_shard_ranges(str(filepath)) == {}

    def test_ranges_merge_and_overwrite(self, tmp_path):
        """範囲はシャード番号ごとにマージされ、同じ番号は新しい範囲で上書きされる"""
        filepath = str(tmp_path / "completed_shards.json")
        save_completed_shards({0, 1}, filepath, "hash-a", {0: (0, 3), 1: (3, 4)})
        save_completed_shards({1}, filepath, "hash-a", {1: (3, 6)})
        assert load_shard_ranges(filepath) == {0: (0, 3), 1: (3, 6)}
        assert read_json(filepath)["ranges"] == {"0": [0, 3], "1": [3, 6]}

    def test_ledger_without_ranges(self, tmp_path):
        """範囲のない古い台帳では空の辞書"""
        filepath = tmp_path / "completed_shards.json"
        filepath.write_text(json.dumps({"config_hash": "h", "shards": [0]}), encoding="utf-8")
        assert load_completed_shards(str(filepath)) == {0}
        assert load_shard_ranges(str(filepath)) == {}


class TestJson:
    def test_numpy_and_complex_values(self, tmp_path):
        filepath = str(tmp_path / "out" / "report.json")
        write_json({"a": np.float64(1.5), "b": np.arange(3), "c": complex(1.0, -2.0), "d": np.int64(7)}, filepath)
        with open(filepath, encoding="utf-8") as f:
            data = json.load(f)
        assert data == {"a": 1.5, "b": [0, 1, 2], "c": [1.0, -2.0], "d": 7}

    def test_unsupported_type(self, tmp_path):
        with pytest.raises(TypeError):
            write_json({"a": object()}, str(tmp_path / "report.json"))
