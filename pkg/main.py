import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from pydantic import ValidationError
from typing_extensions import TypedDict

from sbt import artifact, costmodel, pipeline
from sbt.errors import ConfigError, ContainerError, DataError, DivergenceError, ShapeError
from sbt.model import count_params, freeze, load_checkpoint, save_checkpoint
from sbt.threshold import DetectSettings, ScoreSeries, detect

from utils.get_env import RUNS_DIR, SBT_LOG_LEVEL, SBT_PROGRESS, SBT_SEED
from utils.get_model import get_model
from utils.presets import Preset, is_interactive, load_all_presets, load_preset, pick_preset

logger = logging.getLogger("sbt")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4

TASK_FLAGS = {"classify": "classification", "anomaly": "anomaly", "forecast": "forecasting"}
ATTENTION_FLAGS = ["canonical", "step-t", "qkv-random", "qkv-magnitude", "identity"]


class RunSummary(TypedDict):
    """summary.json of one training run"""
    preset: str
    config: dict
    norm_stats: dict
    replicates: dict
    census: dict


def _jsonable(value):
    """numpy 값을 JSON 직렬화 가능한 값으로 변환"""
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"not JSON serializable: {type(value).__name__}")


def write_report(path: Optional[str], report: dict) -> None:
    """리포트 JSON 저장, 경로가 없으면 stdout 출력"""
    text = json.dumps(report, indent=2, sort_keys=True, default=_jsonable)
    if path is None:
        print(text)
        return
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(text + "\n", encoding="utf-8")
    print(f"✅ report written to {path}")


def resolve_preset(name: Optional[str]) -> Preset:
    """프리셋 로드 (이름이 없으면 터미널에서 선택)"""
    if name:
        return load_preset(name)
    if is_interactive():
        print("\n📋 Select a preset:")
        return pick_preset()
    raise ConfigError("--config is required when not running in a terminal")


def _load_data(path: str, benign_filter: bool = False, model_path: Optional[str] = None) -> pipeline.TaskData:
    manifest = pipeline.DatasetManifest.load(path)
    stats = None
    # 학습 때 저장한 정규화 통계가 모델 옆에 있으면 그대로 사용
    if model_path is not None and (saved := Path(model_path).parent / "norm_stats.json").is_file():
        stats = pipeline.NormStats.load(saved)
        logger.info("normalization statistics from %s", saved)
    return pipeline.load_task_data(manifest, stats=stats, benign_filter=benign_filter)


def detect_settings(model_name: str, r: Optional[float] = None, q: Optional[float] = None) -> DetectSettings:
    """
    Detection protocol for a model: the matching preset's r / q, overridden by CLI flags.

    :param model_name: config name stored in the packed model (``smd``, ``msl`` …)
    :type model_name: str
    :return: r and q to threshold with
    :rtype: DetectSettings
    """
    try:
        settings = load_preset(model_name).detect or DetectSettings()
    except ConfigError:
        settings = DetectSettings()
    overrides = {k: v for k, v in {"r": r, "q": q}.items() if v is not None}
    return settings.model_copy(update=overrides) if overrides else settings


# -----------------------------------------------------------------------------
# subcommands
# -----------------------------------------------------------------------------

def cmd_train(args: argparse.Namespace) -> int:
    """학습 명령 처리"""
    preset = resolve_preset(args.config)
    # 프리셋 설정 위에 CLI 옵션 덮어쓰기
    updates = {"dense_mode": args.dense, "attention": None, "positional": None}
    if args.prune_rate is not None:
        updates["prune_rate"] = args.prune_rate
    config = preset.model.with_updates(**updates)
    if args.attention:
        config = config.with_updates(attention=args.attention.replace("-", "_"))
    if args.task and TASK_FLAGS[args.task] != config.task:
        raise ConfigError(f"--task {args.task} does not match the {config.task} preset {preset.name}")

    seed = args.seed if args.seed is not None else SBT_SEED
    train_cfg = preset.train.for_mode(config.dense_mode).model_copy(update={
        "seed": seed,
        "replicates": args.replicates,
        "progress": SBT_PROGRESS,
        **({"epochs": args.epochs} if args.epochs is not None else {}),
    })
    data = _load_data(args.data)
    if data.task != config.task:
        raise ConfigError(f"manifest task {data.task} does not match config task {config.task}")

    out = Path(args.out or Path(RUNS_DIR) / f"{config.name}-{'dense' if config.dense_mode else 'sbt'}")
    out.mkdir(parents=True, exist_ok=True)
    print(f"✅ training {config.name} ({'dense' if config.dense_mode else f'SBT p={config.prune_rate}'}) "
          f"for {train_cfg.epochs} epochs × {train_cfg.replicates} seeds → {out}")

    report = pipeline.run_replicates(config, data, train_cfg, out, factory=get_model, settings=preset.detect)
    # seed별 체크포인트, 패킹 모델 저장
    for seed_i, result in zip(report.seeds, report.results):
        save_checkpoint(result.model, out / f"checkpoint_seed{seed_i}.npz")
        artifact.save_packed(freeze(result.model), out / f"model_seed{seed_i}.sbt")
    (out / "config.json").write_text(config.canonical_json() + "\n", encoding="utf-8")
    data.stats.save(out / "norm_stats.json")

    summary = RunSummary(
        preset=preset.name,
        config=config.model_dump(mode="json"),
        norm_stats=data.stats.to_dict(),
        replicates=report.to_dict(),
        census=count_params(config).to_dict(),
    )
    write_report(str(out / "summary.json"), dict(summary))
    print(f"✅ mean test metrics: {report.mean}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    """패킹 모델 평가"""
    frozen = artifact.load_packed(args.model)
    data = _load_data(args.data, args.benign_filter, args.model)
    runtime = artifact.PackedRuntime(frozen)
    report: dict = {"model": args.model, "task": data.task}
    match data.task:
        case "classification":
            report.update(pipeline.evaluate_classification(runtime, data.test).to_dict())
        case "forecasting":
            report.update(pipeline.evaluate_forecast(runtime, data.test))
        case "anomaly":
            scores = pipeline.reconstruction_scores(runtime, data.test)
            report.update({"mean_score": float(scores.mean()), "n": int(scores.size)})
            report.update(pipeline.evaluate_task(runtime, data, detect_settings(frozen.config.name)))
    write_report(args.report, report)
    return EXIT_OK


def cmd_detect(args: argparse.Namespace) -> int:
    """이상 탐지: 임계값 선택 후 point-adjusted P/R/F1"""
    frozen = artifact.load_packed(args.model)
    if frozen.config.task != "anomaly":
        raise ConfigError(f"detect needs an anomaly model, got {frozen.config.task}")
    data = _load_data(args.data, args.benign_filter, args.model)
    settings = detect_settings(frozen.config.name, args.r, args.q)
    runtime = artifact.PackedRuntime(frozen)
    # 임계값은 validation 점수로만 보정
    calibration = pipeline.reconstruction_scores(runtime, data.val)
    test = ScoreSeries(pipeline.reconstruction_scores(runtime, data.test), data.test.index, data.test.flags)
    result = detect(calibration, test, args.threshold, r=settings.r, q=settings.q)
    if result.mode == "pot" and result.fit is None:
        print("⚠️ no calibration score exceeded the initial level; fell back to the manual threshold")
    write_report(args.report, result.to_dict())
    print(f"✅ F1 (point-adjusted) {result.adjusted.f1:.4f} at τ={result.threshold:.6g}")
    return EXIT_OK


def cmd_forecast(args: argparse.Namespace) -> int:
    frozen = artifact.load_packed(args.model)
    if frozen.config.task != "forecasting":
        raise ConfigError(f"forecast needs a forecasting model, got {frozen.config.task}")
    data = _load_data(args.data, model_path=args.model)
    runtime = artifact.PackedRuntime(frozen)
    frame = pipeline.forecast_predictions(runtime, data.test, data.stats, data.feature_names)
    Path(args.emit_predictions).parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(args.emit_predictions, index=False)
    print(f"✅ {len(frame)} predictions written to {args.emit_predictions}")
    if args.report:
        write_report(args.report, pipeline.evaluate_forecast(runtime, data.test))
    return EXIT_OK


def cmd_cost(args: argparse.Namespace) -> int:
    # 전체 프리셋 비용 표
    if args.all:
        table = costmodel.preset_table([p.model for p in load_all_presets()], args.convention)
        print(table.to_string(index=False))
        if args.report:
            write_report(args.report, {"rows": table.to_dict(orient="records")})
        return EXIT_OK

    config = resolve_preset(args.config).model
    scenarios = tuple(s.strip() for s in args.compare.split(","))
    unknown = set(scenarios) - set(costmodel.SCENARIOS)
    if unknown:
        raise ConfigError(f"unknown scenario(s): {', '.join(sorted(unknown))}")
    comparison = costmodel.compare_scenarios(config, scenarios, args.convention)
    print(costmodel.render_table([comparison], ("dense", *[s for s in scenarios if s != "dense"])).to_string(index=False))
    report = {
        "comparison": comparison.to_dict(),
        "dense": costmodel.model_flops(config.dense_twin(), args.convention).to_dict(),
        "sbt": costmodel.model_flops(config.sbt_twin(), args.convention).to_dict(),
    }
    write_report(args.report, report)
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    """모델 크기 스윕"""
    preset = resolve_preset(args.config)
    try:
        widths = [int(x) for x in args.d.split(",")]
    except ValueError as e:
        raise ConfigError(f"--d must be a comma separated list of integers: {e}") from e
    config = preset.model.with_updates(dense_mode=args.dense, attention=None, positional=None)
    train_cfg = preset.train.for_mode(args.dense).model_copy(update={
        "seed": args.seed if args.seed is not None else SBT_SEED,
        "progress": SBT_PROGRESS,
        **({"epochs": args.epochs} if args.epochs is not None else {}),
    })
    data = _load_data(args.data)
    table = pipeline.sweep_model_size(config, data, widths, train_cfg, preset.detect)
    higher = pipeline.PRIMARY_METRIC[config.task][1]
    plateau = pipeline.find_plateau(table, args.tolerance, higher)
    print(table.to_string(index=False))
    print(f"✅ performance plateaus at d={plateau}")
    write_report(args.report, {"rows": table.to_dict(orient="records"), "plateau_d": plateau})
    return EXIT_OK


def cmd_pack(args: argparse.Namespace) -> int:
    model = load_checkpoint(args.checkpoint)
    frozen = freeze(model)
    path = artifact.save_packed(frozen, args.out)
    sizes = artifact.size_report(frozen)
    print(f"✅ packed {args.checkpoint} → {path} ({sizes['packed_bits'] // 8} bytes, "
          f"{sizes['information_bits']} information bits)")
    return EXIT_OK


def cmd_unpack(args: argparse.Namespace) -> int:
    """패킹 모델을 .npz로 내보내기"""
    frozen = artifact.load_packed(args.model)
    arrays = {"__config__": np.array(frozen.config.canonical_json())}
    for name, module in frozen.modules.items():
        if module.binarized:
            arrays[f"{name}.mask"] = module.effective.mask
            arrays[f"{name}.signs"] = module.effective.signs
            arrays[f"{name}.alpha"] = np.array(module.effective.alpha, dtype=np.float32)
        if module.residual.size:
            arrays[f"{name}.residual"] = module.residual
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    np.savez(args.out, **arrays)
    print(f"✅ unpacked {len(frozen.modules)} modules to {args.out}")
    if args.report:
        write_report(args.report, artifact.size_report(frozen))
    return EXIT_OK


# -----------------------------------------------------------------------------
# entry point
# -----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    """CLI 파서 생성"""
    parser = argparse.ArgumentParser(prog="sbt", description="Sparse binary transformers for multivariate time series")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train dense or SBT models over several seeds")
    p.add_argument("--config", help="preset name or JSON file")
    p.add_argument("--data", required=True, help="dataset manifest (JSON)")
    p.add_argument("--task", choices=sorted(TASK_FLAGS))
    p.add_argument("--prune-rate", type=float)
    p.add_argument("--dense", action="store_true")
    p.add_argument("--attention", choices=ATTENTION_FLAGS)
    p.add_argument("--seed", type=int)
    p.add_argument("--replicates", type=int, default=3)
    p.add_argument("--epochs", type=int, help="override the preset's epoch count")
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a packed model on a test split")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--benign-filter", action="store_true")
    p.add_argument("--report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("detect", help="threshold reconstruction scores and report P/R/F1")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--threshold", choices=["manual", "pot"], default="manual")
    p.add_argument("--r", type=float, help="anomaly proportion (default: the preset's r, else 0.01)")
    p.add_argument("--q", type=float, help="POT risk (default: the preset's q, else 1e-3)")
    p.add_argument("--benign-filter", action="store_true")
    p.add_argument("--report")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("forecast", help="write per-feature predicted vs actual values")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--emit-predictions", required=True)
    p.add_argument("--report")
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("cost", help="FLOPs and storage of dense, SBT and pruned models")
    p.add_argument("--config")
    p.add_argument("--compare", default="dense,sbt,pruned32,pruned8")
    p.add_argument("--convention", choices=["per_sample", "per_timestep"], default="per_sample")
    p.add_argument("--all", action="store_true", help="table over every shipped preset")
    p.add_argument("--report")
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("sweep", help="train one model per width d and find the plateau")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--d", required=True, help="comma separated widths, e.g. 16,32,64,128")
    p.add_argument("--dense", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--tolerance", type=float, default=0.01)
    p.add_argument("--report")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("pack", help="freeze a training checkpoint into a packed model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pack)

    p = sub.add_parser("unpack", help="export a packed model's masks, signs and α to .npz")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.set_defaults(func=cmd_unpack)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run one subcommand; errors map to exit codes 2 (config), 3 (data), 4 (divergence)."""
    logging.basicConfig(level=SBT_LOG_LEVEL, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    logger.debug("running %s", args.command)
    try:
        return args.func(args)
    except (ConfigError, ShapeError, ValidationError) as e:
        print(f"❌ config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ContainerError) as e:
        print(f"❌ data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as e:
        print(f"❌ training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
