"""
確率的非局所 Cahn–Hilliard 検証ハーネス - メインエントリポイント

パイプライン:
  1. 環境変数ロード（.env, SNCH_OUTPUT_ROOT）
  2. 設定ファイル読み込み・スキーマ検証
  3. 仮定ゲート（基底メモリ, a ≥ 0, c0, 速度場, K(Q)）
  4. サブコマンド実行（simulate / ensemble / verify-* / estimate-moments）
  5. JSON・整列テキスト（・gnuplot 系列）の書き出し

終了コード: 0 正常, 1 設定エラー, 2 仮定ゲート不成立, 3 検証失敗, 4 爆発
"""

import argparse
import os
import sys
import traceback
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np
from dotenv import load_dotenv

from .config_loader import (
    RunConfig,
    load_run_config,
    to_battery,
    to_initial_condition,
    to_solver_config,
    to_xi_list,
)
from .data_io import (
    COMPLETED_SHARDS_FILE,
    load_completed_shards,
    load_shard_ranges,
    read_json,
    save_completed_shards,
    write_json,
    write_path_csv,
    write_trajectory_csv,
    write_trajectory_npz,
)
from .models import (
    AssumptionViolation,
    BasisTooLarge,
    BlowUpDetected,
    ConfigError,
    GateResult,
    HarnessError,
    LineageMismatch,
    SolverConfig,
    ValidationReport,
)
from .noise import sample_initial, validate_kq
from .physics import coefficient_a, kernel_summary, kernel_table, validate_c0, velocity_eval
from .report_writer import write_gnuplot_series, write_text_report
from .solver import build_context, simulate, simulate_ensemble, step_count
from .spectral_core import sobolev_norm_array, sup_norm_growth_constant
from .utils import apply_log_level, chunk_list, get_logger
from .verify import (
    compactness_exponents,
    energy_identity_residual,
    energy_ledger_study,
    estimate_moments,
    galerkin_ladder,
    h_norm_ledger,
    initial_energy_moment,
    strong_convergence_order,
    strong_residual_study,
    uniqueness_study,
    weak_solution_check,
)

logger = get_logger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_VALIDATION = 2
EXIT_VERIFICATION = 3
EXIT_BLOWUP = 4

COMMANDS = (
    "validate",
    "simulate",
    "ensemble",
    "verify-energy",
    "verify-weak",
    "verify-strong",
    "verify-uniqueness",
    "estimate-moments",
)


def load_env() -> dict[str, str]:
    """環境変数を読み込む（必須キーはない）"""
    env_file = Path(".env")
    if env_file.exists():
        load_dotenv(env_file)
        logger.info(".env ファイルを読み込みました")
    env: dict[str, str] = {}
    for key in ("SNCH_OUTPUT_ROOT", "SNCH_LOG_LEVEL"):
        val = os.environ.get(key, "").strip()
        if val:
            env[key] = val
    if "SNCH_LOG_LEVEL" in env:
        apply_log_level(env["SNCH_LOG_LEVEL"])
    return env


def output_root(run_config: RunConfig, env: dict[str, str], override: Optional[str] = None) -> str:
    """--output > SNCH_OUTPUT_ROOT > output.directory の順で出力先を決める"""
    if override:
        return override
    return env.get("SNCH_OUTPUT_ROOT") or run_config.section("output")["directory"]


# ---------------------------------------------------------------------------
# 仮定ゲート
# ---------------------------------------------------------------------------

def _gate_failure(error: AssumptionViolation) -> GateResult:
    return GateResult(name=error.gate, passed=False, measured=error.measured, reason=str(error))


def run_validation(run_config: RunConfig) -> ValidationReport:
    """
    仮定ゲートをすべて評価する。途中で失敗しても後続のゲートは可能な範囲で評価する。

    Raises:
        ConfigError: 設定値そのものが不正な場合（ゲート以前の問題）
    """
    gates: list[GateResult] = []
    basis_section = run_config.section("basis")

    try:
        config = to_solver_config(run_config)
    except BasisTooLarge as e:
        gates.append(GateResult(
            name="basis_memory",
            passed=False,
            measured={"modes": basis_section["modes"], "max_grid_points": basis_section["max_grid_points"]},
            reason=str(e),
        ))
        return ValidationReport(gates=gates)
    basis = config.basis
    gates.append(GateResult(
        name="basis_memory",
        passed=True,
        measured={
            "grid_points": int(np.prod(basis.grid_shape)),
            "max_grid_points": basis_section["max_grid_points"],
            "sup_growth_constant": sup_norm_growth_constant(basis),
        },
    ))

    tables = kernel_table(config.kernel, basis)
    try:
        a = coefficient_a(tables, basis, config.backend)
        gates.append(GateResult(name="a_nonnegative", passed=True, measured=kernel_summary(tables, a)))
        try:
            c0 = validate_c0(a)
            gates.append(GateResult(name="c0_positive", passed=True, measured={"c0": c0}))
        except AssumptionViolation as e:
            gates.append(_gate_failure(e))
    except AssumptionViolation as e:
        gates.append(_gate_failure(e))

    try:
        velocity = velocity_eval(config.velocity, basis)
        gates.append(GateResult(
            name="velocity",
            passed=True,
            measured={
                "sup_norm": velocity.sup_norm,
                "max_divergence": velocity.max_divergence,
                "boundary_trace": velocity.boundary_trace,
            },
        ))
    except AssumptionViolation as e:
        gates.append(_gate_failure(e))
    except ValueError as e:
        gates.append(GateResult(name="velocity", passed=False, reason=str(e)))

    kq = validate_kq(config.noise, basis, config.probe_depth)
    gates.append(GateResult(
        name="trace_kq",
        passed=kq.passed,
        measured={
            "partial_sum": kq.partial_sum,
            "probe_depth": kq.probe_depth,
            "tail_ratio": kq.tail_ratio,
            "converged": kq.converged,
            "gating": kq.gating,
        },
        reason="" if kq.passed else "K(Q) dyadic block sums do not decay",
    ))

    try:
        step_count(config.T, config.dt)
    except ValueError as e:
        raise ConfigError(str(e)) from e

    report = ValidationReport(gates=gates)
    if report.passed:
        # 参考値なので合否には含めない
        ctx = build_context(config)
        moment = initial_energy_moment(
            to_initial_condition(run_config),
            ctx,
            run_config.master_seed,
            run_config.section("verification")["initial_energy_samples"],
        )
        p_prime, q_prime = compactness_exponents(run_config.section("verification")["p_prime"])
        moment.update({"p_prime": p_prime, "q_prime": q_prime})
        report.gates.append(GateResult(name="initial_energy", passed=bool(np.isfinite(moment["mean"])), measured=moment))
    for gate in report.gates:
        if not gate.passed:
            logger.warning(f"ゲート不成立: {gate.name}: {gate.reason}")
    return report


# ---------------------------------------------------------------------------
# 出力
# ---------------------------------------------------------------------------

def report_meta(run_config: RunConfig, config: Optional[SolverConfig] = None, paths: Optional[int] = None) -> dict:
    meta = {
        "config_hash": run_config.config_hash,
        "config_source": run_config.source,
        "master_seed": run_config.master_seed,
    }
    if config is not None:
        meta.update({"dt": config.dt, "T": config.T, "modes": config.basis.m, "stepper": config.stepper})
    if paths is not None:
        meta["paths"] = paths
    meta["defaults_applied"] = list(run_config.defaults_applied)
    return meta


def write_report(name: str, report: dict, meta: dict, root: str) -> str:
    """<root>/<name>.json と <name>.txt を書き出し、JSON のパスを返す"""
    json_path = os.path.join(root, f"{name}.json")
    write_json({"meta": meta, "report": report}, json_path)
    write_text_report(name, report, meta, os.path.join(root, f"{name}.txt"))
    return json_path


# ---------------------------------------------------------------------------
# サブコマンド
# ---------------------------------------------------------------------------

def cmd_validate(run_config: RunConfig, root: str, args: argparse.Namespace) -> int:
    report = run_validation(run_config)
    write_report("validation", report.to_dict(), report_meta(run_config), root)
    return EXIT_OK if report.passed else EXIT_VALIDATION


def cmd_simulate(run_config: RunConfig, root: str, args: argparse.Namespace) -> int:
    config = to_solver_config(run_config)
    ctx = build_context(config)
    phi0 = sample_initial(to_initial_condition(run_config), config.basis, run_config.master_seed, args.path_index)
    traj = simulate(config, phi0, args.path_index, ctx=ctx)
    traj = replace(traj, config_hash=run_config.config_hash)

    stem = os.path.join(root, f"trajectory_{args.path_index:05d}")
    write_trajectory_csv(traj, stem + ".csv")
    write_trajectory_npz(traj, stem + ".npz")
    write_path_csv(traj.path, os.path.join(root, f"path_{args.path_index:05d}.csv"), run_config.config_hash)
    h_sq = np.sum(traj.coeffs ** 2, axis=1)
    status = {
        "path_index": args.path_index,
        "status": traj.status,
        "blowup_step": traj.blowup_step,
        "records": len(traj.times),
        "t_final": float(traj.times[-1]) if len(traj.times) else 0.0,
        **_h_norms(h_sq),
    }
    write_report(f"simulate_{args.path_index:05d}", status, report_meta(run_config, config, 1), root)
    if run_config.section("output")["gnuplot"] and len(traj.times):
        write_gnuplot_series(
            stem + ".dat",
            {"t": traj.times, "h_sq": h_sq, "mean": traj.coeffs[:, 0]},
            {"config_hash": run_config.config_hash, "path_index": args.path_index},
        )
    return EXIT_OK if traj.completed else EXIT_BLOWUP


def _h_norms(h_sq: np.ndarray) -> dict:
    # 初期状態で爆発した軌道には記録がない
    if h_sq.size == 0:
        return {"final_h_sq": None, "sup_h_sq": None}
    return {"final_h_sq": float(h_sq[-1]), "sup_h_sq": float(np.max(h_sq))}


def _shard_summary(config: SolverConfig, ctx, run_config: RunConfig, shard: list[int]) -> dict:
    ic = to_initial_condition(run_config)
    initial = [sample_initial(ic, config.basis, run_config.master_seed, i) for i in shard]
    rows = []
    for index, traj in zip(shard, simulate_ensemble(config, initial, shard, ctx=ctx)):
        h_sq = np.sum(traj.coeffs ** 2, axis=1)
        u_sq = sobolev_norm_array(config.basis, traj.coeffs[-1], 1.0) ** 2 if len(traj.times) else None
        rows.append({
            "path_index": index,
            "status": traj.status,
            "blowup_step": traj.blowup_step,
            **_h_norms(h_sq),
            "final_u_sq": None if u_sq is None else float(u_sq),
        })
    return {"paths": rows}


def aggregate_shards(shard_dir: str, shard_count: int) -> dict:
    """シャード番号順に読み直して集計する（実行順序に依存しない）"""
    rows = []
    for number in range(shard_count):
        rows.extend(read_json(os.path.join(shard_dir, f"shard_{number:05d}.json"))["paths"])
    rows.sort(key=lambda r: r["path_index"])
    completed = [r for r in rows if r["status"] == "completed"]
    summary: dict = {
        "paths": len(rows),
        "completed": len(completed),
        "blowups": [r["path_index"] for r in rows if r["status"] != "completed"],
    }
    for key in ("sup_h_sq", "final_h_sq", "final_u_sq"):
        values = np.array([r[key] for r in completed], dtype=float)
        summary[key] = {
            "mean": float(values.mean()) if values.size else float("nan"),
            "max": float(values.max()) if values.size else float("nan"),
        }
    return summary


def cmd_ensemble(run_config: RunConfig, root: str, args: argparse.Namespace) -> int:
    config = to_solver_config(run_config)
    # 集計に必要なのは sup と終端だけなので両端のみ記録する
    config = replace(config, record_stride=step_count(config.T, config.dt))
    ctx = build_context(config)
    paths = args.paths or run_config.section("verification")["paths"]
    shard_size = run_config.section("verification")["shard_size"]
    shards = chunk_list(list(range(paths)), shard_size)

    shard_dir = os.path.join(root, "ensemble")
    ledger = os.path.join(shard_dir, COMPLETED_SHARDS_FILE)
    done = load_completed_shards(ledger)
    if done and read_json(ledger).get("config_hash") != run_config.config_hash:
        logger.warning("シャード台帳の設定ハッシュが異なるため、最初から実行します")
        os.remove(ledger)
        done = set()
    ranges = load_shard_ranges(ledger)

    for number, shard in enumerate(shards):
        span = (shard[0], shard[-1] + 1)
        if number in done and ranges.get(number) == span:
            logger.info(f"シャード {number} は完了済みのためスキップします")
            continue
        if number in done:
            logger.warning(f"シャード {number} のパス範囲が {ranges.get(number)} から {span} に変わったため再計算します")
        write_json(_shard_summary(config, ctx, run_config, shard), os.path.join(shard_dir, f"shard_{number:05d}.json"))
        save_completed_shards({number}, ledger, run_config.config_hash, {number: span})
        logger.info(f"シャード {number + 1}/{len(shards)} を完了しました（パス {shard[0]}–{shard[-1]}）")

    summary = aggregate_shards(shard_dir, len(shards))
    write_report("ensemble", summary, report_meta(run_config, config, paths), root)
    return EXIT_BLOWUP if summary["blowups"] else EXIT_OK


def cmd_verify_energy(run_config: RunConfig, root: str, args: argparse.Namespace) -> int:
    verification = run_config.section("verification")
    config = replace(to_solver_config(run_config), record_stride=1)
    ic = to_initial_condition(run_config)
    phi0 = sample_initial(ic, config.basis, run_config.master_seed, args.path_index)
    study = energy_ledger_study(
        config, phi0, args.path_index, verification["halvings"], verification["energy_halving_factor"]
    )
    if study.get("blowup"):
        write_report("verify_energy", study, report_meta(run_config, config, 1), root)
        return EXIT_BLOWUP

    ctx = build_context(config)
    traj = simulate(config, phi0, args.path_index, ctx=ctx)
    if not traj.completed:
        write_report("verify_energy", {"passed": False, "blowup": True, "blowup_step": traj.blowup_step},
                     report_meta(run_config, config, 1), root)
        return EXIT_BLOWUP
    energy_ledger = energy_identity_residual(traj, ctx)
    h_ledger = h_norm_ledger(traj, ctx)
    report = {
        "passed": study["passed"],
        "halving": {k: v for k, v in study.items() if k != "ledgers"},
        "levels": study["ledgers"],
        "h_norm": h_ledger.to_dict(),
    }
    write_report("verify_energy", report, report_meta(run_config, config, 1), root)
    if run_config.section("output")["gnuplot"]:
        write_gnuplot_series(
            os.path.join(root, "verify_energy.dat"),
            {"t": energy_ledger.times, "Z": energy_ledger.values, "residual": energy_ledger.residual, "h_residual": h_ledger.residual},
            {"config_hash": run_config.config_hash},
        )
    return EXIT_OK if study["passed"] else EXIT_VERIFICATION


def cmd_verify_weak(run_config: RunConfig, root: str, args: argparse.Namespace) -> int:
    verification = run_config.section("verification")
    config = to_solver_config(run_config)
    paths = args.paths or verification["paths"]
    report = weak_solution_check(
        config,
        to_initial_condition(run_config),
        to_battery(run_config),
        to_xi_list(run_config, config),
        paths,
        verification["shard_size"],
        verification["weak_bias_constant"],
    )
    write_report("verify_weak", report.to_dict(), report_meta(run_config, config, paths), root)
    if report.blowups:
        return EXIT_BLOWUP
    return EXIT_OK if report.passed else EXIT_VERIFICATION


def cmd_verify_strong(run_config: RunConfig, root: str, args: argparse.Namespace) -> int:
    verification = run_config.section("verification")
    config = to_solver_config(run_config)
    phi0 = sample_initial(to_initial_condition(run_config), config.basis, run_config.master_seed, args.path_index)
    study = strong_residual_study(
        config,
        phi0,
        to_battery(run_config),
        args.path_index,
        verification["halvings"],
        verification["epsilon"],
        verification["strong_min_order"],
        verification["negative_control_factor"],
    )
    if not study.get("blowup"):
        study["self_convergence"] = strong_convergence_order(config, phi0, args.path_index, verification["halvings"] + 1)
    write_report("verify_strong", study, report_meta(run_config, config, 1), root)
    if study.get("blowup") or study.get("self_convergence", {}).get("blowup"):
        return EXIT_BLOWUP
    return EXIT_OK if study["passed"] else EXIT_VERIFICATION


def cmd_verify_uniqueness(run_config: RunConfig, root: str, args: argparse.Namespace) -> int:
    verification = run_config.section("verification")
    config = to_solver_config(run_config)
    phi0 = sample_initial(to_initial_condition(run_config), config.basis, run_config.master_seed, args.path_index)
    study = uniqueness_study(
        config, phi0, verification["seeds"], verification["perturbation"], verification["gronwall_slack"]
    )
    write_report("verify_uniqueness", study, report_meta(run_config, config, verification["seeds"]), root)
    if any(r.get("blowup") for r in study["seeds"]):
        return EXIT_BLOWUP
    return EXIT_OK if study["passed"] else EXIT_VERIFICATION


def cmd_estimate_moments(run_config: RunConfig, root: str, args: argparse.Namespace) -> int:
    verification = run_config.section("verification")
    config = to_solver_config(run_config)
    ic = to_initial_condition(run_config)
    paths = args.paths or verification["paths"]
    ladder = [int(m) for m in verification["mode_ladder"]]
    report = estimate_moments(
        config,
        ic,
        ladder,
        paths,
        verification["shard_size"],
        verification["holder_beta"],
        verification["clt_z"],
        verification["p_prime"],
    )
    result = report.to_dict()
    result["galerkin_ladder"] = galerkin_ladder(config, ic, ladder, paths, verification["shard_size"])
    write_report("estimate_moments", result, report_meta(run_config, config, paths), root)
    if not report.valid:
        return EXIT_BLOWUP
    return EXIT_OK if report.passed and result["galerkin_ladder"]["passed"] else EXIT_VERIFICATION


HANDLERS = {
    "validate": cmd_validate,
    "simulate": cmd_simulate,
    "ensemble": cmd_ensemble,
    "verify-energy": cmd_verify_energy,
    "verify-weak": cmd_verify_weak,
    "verify-strong": cmd_verify_strong,
    "verify-uniqueness": cmd_verify_uniqueness,
    "estimate-moments": cmd_estimate_moments,
}


def run_command(command: str, config_file: str, args: argparse.Namespace, output: Optional[str] = None) -> int:
    """
    サブコマンドを実行して終了コードを返す。validate 以外は先に仮定ゲートを再評価する。

    Args:
        command: COMMANDS のいずれか
        config_file: 設定ファイルのパス
        args: サブコマンド引数（path_index, paths）
        output: 出力先の上書き
    """
    env = load_env()
    logger.info(f"=== {command} 開始: {config_file} ===")
    try:
        run_config = load_run_config(config_file)
        root = output_root(run_config, env, output)
        if command != "validate":
            gate_report = run_validation(run_config)
            if not gate_report.passed:
                write_report("validation", gate_report.to_dict(), report_meta(run_config), root)
                logger.error("仮定ゲートが不成立のため実行しません")
                return EXIT_VALIDATION
        code = HANDLERS[command](run_config, root, args)
        logger.info(f"=== {command} 完了: 終了コード {code} ===")
        return code

    except (FileNotFoundError, ConfigError) as e:
        logger.error(str(e))
        return EXIT_CONFIG

    except AssumptionViolation as e:
        logger.error(f"仮定ゲート {e.gate} が不成立: {e}")
        return EXIT_VALIDATION

    except BlowUpDetected as e:
        logger.error(f"爆発を検出しました: {e}（sup={e.sup_norm:.3g}）")
        return EXIT_BLOWUP

    except LineageMismatch as e:
        logger.error(f"系譜が一致しません: {e}")
        return EXIT_VERIFICATION

    except HarnessError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_VERIFICATION


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Stochastic nonlocal Cahn–Hilliard verification harness")
    parser.add_argument("command", choices=COMMANDS, help="実行するサブコマンド")
    parser.add_argument("--config", required=True, help="設定ファイル（JSON, schema_version 1）")
    parser.add_argument("--output", default=None, help="出力先ディレクトリ（SNCH_OUTPUT_ROOT より優先）")
    parser.add_argument("--path-index", type=int, default=0, help="単一パス系コマンドのパス番号 (default: 0)")
    parser.add_argument("--paths", type=int, default=None, help="アンサンブルのパス数（verification.paths を上書き）")
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return run_command(args.command, args.config, args, args.output)
    except Exception:
        logger.error(f"予期しないエラーが発生しました:\n{traceback.format_exc()}")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
