from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

from src import __version__
from src.callbacks.log_handler import TrainingLogHandler
from src.cli.config_loader import RunConfig, resolve_config
from src.cli.inspect_sample import inspect_sample
from src.core.checkpoint import load_archive
from src.core.errors import CheckpointError, ConfigError, DataError, NumericalError
from src.data.dataset import (
    PREPARED_INFO,
    BatchLoader,
    PreparedDataset,
    load_prepared,
    prepare_dataset,
    save_prepared,
    split_identifier,
)
from src.data.manifest import MANIFEST_NAME, DatasetManifest, scan_ntu_directory
from src.data.splits import TEST, TRAIN, VALIDATION
from src.data.synthetic import generate_synthetic_dataset
from src.models.config import MODES, ModelConfig
from src.models.fusion import build_network
from src.skeleton.sequence import CoordinateExtrema
from src.training import reporting
from src.training.ablation import AblationGrid, fusion_trend, length_table, run_ablation
from src.training.trainer import Trainer, restore_network

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
RUN_MANIFEST = MANIFEST_NAME

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


class UsageError(Exception):
    """命令行用法错误（未知动词/参数、参数值无法解析）。"""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _int_list(text: str) -> List[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"需要逗号分隔的整数：{text!r}")
    if not values:
        raise argparse.ArgumentTypeError("列表不能为空")
    return values


def _str_list(text: str) -> List[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


# ---------------------------------------------------------------- 日志

def setup_logging(out_dir: str | Path | None = None, verbose: bool = False) -> None:
    """控制台 + 运行目录下的 run.log；重复调用会替换上一次安装的handler。"""
    root = logging.getLogger()
    for handler in list(root.handlers):
        if getattr(handler, "_fusion_cli", False):
            root.removeHandler(handler)
            handler.close()
    level = logging.DEBUG if verbose else logging.INFO
    root.setLevel(level)
    formatter = logging.Formatter(LOG_FORMAT)
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(Path(out_dir) / "run.log", encoding="utf-8"))
    for handler in handlers:
        handler.setLevel(level)
        handler.setFormatter(formatter)
        handler._fusion_cli = True
        root.addHandler(handler)


# ---------------------------------------------------------------- 参数

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML配置文件，或某次运行的 manifest.json")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="点号路径覆盖，如 train.epochs=3")
    common.add_argument("--seed", type=int, help="根随机种子")
    common.add_argument("--out", help="输出目录")
    common.add_argument("--verbose", action="store_true", help="DEBUG级日志")

    data_flags = _Parser(add_help=False)
    data_flags.add_argument("--data", help="数据集目录（覆盖 data.root）")

    model_flags = _Parser(add_help=False)
    model_flags.add_argument("--mode", choices=list(MODES), help="网络模式")
    model_flags.add_argument("--T", type=_int_list, help="IR序列长度；ablate 接受逗号分隔的列表")
    model_flags.add_argument("--deterministic", action="store_const", const=True, help="确定性模式")
    model_flags.add_argument("--epochs", type=int, help="训练轮数")

    parser = _Parser(prog="fusion", description="骨架 + 红外 的动作识别：合成数据、预处理、训练、评估、消融与样本检查")
    parser.add_argument("--version", action="version", version=__version__)
    verbs = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    synth = verbs.add_parser("synth", parents=[common], help="生成合成数据集")
    synth.add_argument("--classes", type=int, help="类别数")
    synth.add_argument("--per-class", dest="per_class", type=int, help="每类样本数")

    verbs.add_parser("prep", parents=[common, data_flags, model_flags], help="预处理并缓存样本")

    train = verbs.add_parser("train", parents=[common, data_flags, model_flags], help="训练")
    train.add_argument("--resume", action="store_true", help="从输出目录的 last.ckpt 继续")

    evaluate = verbs.add_parser("eval", parents=[common, data_flags, model_flags], help="评估checkpoint")
    evaluate.add_argument("--run", help="训练输出目录（读取其中的 manifest.json 与 best.ckpt）")
    evaluate.add_argument("--checkpoint", help="checkpoint 路径，缺省为 <run>/best.ckpt")
    evaluate.add_argument("--split", choices=[TRAIN, VALIDATION, TEST], default=TEST, help="评估哪个划分")

    ablate = verbs.add_parser("ablate", parents=[common, data_flags, model_flags], help="模式 × T 消融")
    ablate.add_argument("--modes", type=_str_list, help="逗号分隔的模式列表")
    ablate.add_argument("--seeds", type=_int_list, help="逗号分隔的种子列表")
    ablate.add_argument("--ablate-crop", action="store_true", help="同时比较裁剪开/关")
    ablate.add_argument("--ablate-augment", action="store_true", help="同时比较增强开/关")

    inspect = verbs.add_parser("inspect", parents=[common, data_flags, model_flags], help="导出单个样本的调试图")
    inspect.add_argument("--sample", required=True, help="样本名，如 S001C001P001R001A001")
    inspect.add_argument("--run", help="训练输出目录（复用其配置）")
    return parser


def _flag_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    flags: Dict[str, Any] = {}
    seed = getattr(args, "seed", None)
    if seed is not None:
        flags["train.seed"] = seed
        flags["synth.seed"] = seed
    if getattr(args, "data", None) is not None:
        flags["data.root"] = args.data
    if getattr(args, "mode", None) is not None:
        flags["train.mode"] = args.mode
    if getattr(args, "deterministic", None):
        flags["train.deterministic"] = True
    if getattr(args, "epochs", None) is not None:
        flags["train.epochs"] = args.epochs
    clip_lengths = getattr(args, "T", None)
    if clip_lengths and args.verb != "ablate":
        if len(clip_lengths) != 1:
            raise UsageError(f"{args.verb} 只接受一个 --T 值")
        flags["model.clip_length"] = clip_lengths[0]
    if getattr(args, "classes", None) is not None:
        flags["synth.classes"] = args.classes
    if getattr(args, "per_class", None) is not None:
        flags["synth.per_class"] = args.per_class
    return flags


def _config_for(args: argparse.Namespace, run_dir: Optional[Path] = None) -> RunConfig:
    config_path = args.config
    if config_path is None and run_dir is not None and (run_dir / RUN_MANIFEST).exists():
        config_path = run_dir / RUN_MANIFEST
    return resolve_config(config_path, args.set, _flag_overrides(args))


# ---------------------------------------------------------------- 运行目录

def write_run_manifest(out_dir: Path, verb: str, argv: Sequence[str], config: RunConfig, **extra: Any) -> Path:
    payload = {
        "verb": verb,
        "argv": list(argv),
        "seed": config.train.seed,
        "code_version": __version__,
        "config": config.model_dump(mode="json"),
        **extra,
    }
    return reporting.write_json(out_dir / RUN_MANIFEST, payload)


def _status(status: str, message: str, data: Any = None) -> Dict[str, Any]:
    return {"status": status, "message": message, "data": data}


def _load_manifest(config: RunConfig) -> DatasetManifest:
    root = Path(config.data.root)
    if not (root / MANIFEST_NAME).exists() and (root / "skeletons").is_dir():
        logger.info("%s 没有清单，按NTU目录结构扫描", root)
        return scan_ntu_directory(root)
    return DatasetManifest.load(root)


def _cache_usable(cache: Path, config: RunConfig, manifest: DatasetManifest) -> bool:
    if not (cache / PREPARED_INFO).exists():
        return False
    info = json.loads((cache / PREPARED_INFO).read_text(encoding="utf-8"))
    expected = {"crop": config.train.crop, "clip_size": config.model.clip_size, "crop_offset": config.data.crop_offset}
    changed = sorted(k for k, v in expected.items() if info.get(k) != v)
    if changed:
        logger.warning("缓存 %s 的 %s 与当前配置不一致，重新预处理", cache, "/".join(changed))
        return False
    if CoordinateExtrema.load(cache / "extrema.json").train_split_id != split_identifier(config.data, config.train.seed, manifest):
        logger.warning("缓存 %s 的划分（协议/种子/训练组/验证比例/样本集合）与当前配置不一致，重新预处理", cache)
        return False
    return True


def load_dataset(config: RunConfig, manifest: DatasetManifest) -> PreparedDataset:
    """有可用的 prep 缓存时直接读取，否则现场预处理。"""
    if config.data.cache_dir and _cache_usable(Path(config.data.cache_dir), config, manifest):
        logger.info("读取预处理缓存 %s", config.data.cache_dir)
        return load_prepared(config.data.cache_dir)
    return prepare_dataset(
        manifest,
        config.data,
        crop=config.train.crop,
        clip_size=config.model.clip_size,
        need_ir=config.train.mode != "pose_only",
        seed=config.train.seed,
        workers=config.train.effective_workers,
    )


def _model_for(config: RunConfig, dataset: PreparedDataset) -> ModelConfig:
    if config.model.class_count != dataset.class_count:
        logger.info("类别数取自数据集：%d", dataset.class_count)
    return config.model.model_copy(update={"class_count": dataset.class_count})


def _write_evaluation(out_dir: Path, result, class_names: Sequence[str], extra: Dict[str, Any]) -> Dict[str, Any]:
    names = list(class_names) or None
    reporting.write_confusion(out_dir / "confusion.csv", result.confusion, names)
    metrics = {**extra, **result.to_dict()}
    reporting.write_json(out_dir / "metrics.json", metrics)
    return metrics


# ---------------------------------------------------------------- 动词

def cmd_synth(args: argparse.Namespace, argv: Sequence[str]) -> Dict[str, Any]:
    config = _config_for(args)
    out_dir = Path(args.out or config.data.root)
    setup_logging(None, args.verbose)
    manifest = generate_synthetic_dataset(config.synth, out_dir)
    return _status("success", f"合成数据集已写入 {out_dir}", {
        "out": str(out_dir),
        "samples": len(manifest.samples),
        "classes": manifest.class_names,
    })


def cmd_prep(args: argparse.Namespace, argv: Sequence[str]) -> Dict[str, Any]:
    config = _config_for(args)
    out_dir = Path(args.out or config.data.cache_dir or "runs/prepared")
    setup_logging(out_dir, args.verbose)
    manifest = _load_manifest(config)
    dataset = prepare_dataset(
        manifest, config.data, crop=config.train.crop, clip_size=config.model.clip_size,
        need_ir=True, seed=config.train.seed, workers=config.train.effective_workers,
    )
    save_prepared(dataset, out_dir)
    write_run_manifest(out_dir, "prep", argv, config, dataset=str(config.data.root))
    status = "warning" if dataset.skipped else "success"
    return _status(status, f"预处理完成：{len(dataset.samples)} 个样本", {
        "out": str(out_dir),
        "samples": len(dataset.samples),
        "skipped": dataset.skipped,
    })


def cmd_train(args: argparse.Namespace, argv: Sequence[str]) -> Dict[str, Any]:
    out_dir = Path(args.out or "runs/train")
    config = _config_for(args)
    setup_logging(out_dir, args.verbose)
    write_run_manifest(out_dir, "train", argv, config, dataset=str(config.data.root))
    manifest = _load_manifest(config)
    dataset = load_dataset(config, manifest)
    model_config = _model_for(config, dataset)
    net = build_network(model_config, config.train.mode, config.train.seed)
    handler = TrainingLogHandler()
    trainer = Trainer(net, dataset, config.train, handler=handler, out_dir=out_dir, prefetch=config.data.prefetch)
    if args.resume:
        last = out_dir / "last.ckpt"
        if not last.exists():
            raise CheckpointError(f"无法续训：{last} 不存在")
        trainer.restore(last)
    try:
        reports = trainer.fit()
    finally:
        handler.save(out_dir / "events.json")

    extra: Dict[str, Any] = {
        "mode": config.train.mode,
        "clip_length": model_config.clip_length,
        "epochs": config.train.epochs,
        "parameters": net.parameter_count(),
        "feature_dims": net.feature_dims(),
        "best_val": trainer.best_val,
    }
    if reports:
        extra["final_epoch"] = reports[-1].to_row(config.train.deterministic)
    test_ids = dataset.ids(TEST)
    if test_ids:
        result = trainer.evaluate(test_ids, split=TEST)
        metrics = _write_evaluation(out_dir, result, manifest.class_names, {"split": TEST, **extra})
    else:
        logger.warning("测试集为空，只写训练统计")
        metrics = extra
        reporting.write_json(out_dir / "metrics.json", metrics)
    return _status("success", f"训练完成，输出在 {out_dir}", metrics)


def cmd_eval(args: argparse.Namespace, argv: Sequence[str]) -> Dict[str, Any]:
    run_dir = Path(args.run) if args.run else None
    checkpoint = Path(args.checkpoint) if args.checkpoint else (run_dir / "best.ckpt" if run_dir else None)
    if checkpoint is None:
        raise UsageError("eval 需要 --run 或 --checkpoint")
    if not checkpoint.exists():
        raise CheckpointError(f"checkpoint 不存在：{checkpoint}")
    out_dir = Path(args.out) if args.out else (run_dir or checkpoint.parent) / f"eval_{args.split}"
    config = _config_for(args, run_dir)
    setup_logging(out_dir, args.verbose)
    write_run_manifest(out_dir, "eval", argv, config, checkpoint=str(checkpoint), split=args.split)

    _, metadata = load_archive(checkpoint)
    if "model_config" not in metadata:
        raise CheckpointError(f"checkpoint 缺少模型配置：{checkpoint}")
    mode = metadata.get("mode", config.train.mode)
    model_config = ModelConfig.model_validate(metadata["model_config"])
    config = config.model_copy(update={"train": config.train.model_copy(update={"mode": mode})})
    manifest = _load_manifest(config)
    dataset = load_dataset(config, manifest)
    if model_config.class_count != dataset.class_count:
        raise DataError(f"数据集类别数 {dataset.class_count} 与 checkpoint 的 {model_config.class_count} 不一致")
    net = build_network(model_config, mode, config.train.seed)
    restore_network(checkpoint, net)
    trainer = Trainer(net, dataset, config.train, out_dir=None, prefetch=config.data.prefetch)
    result = trainer.evaluate(dataset.ids(args.split), split=args.split)
    metrics = _write_evaluation(out_dir, result, manifest.class_names, {
        "split": args.split,
        "mode": mode,
        "clip_length": model_config.clip_length,
        "checkpoint": str(checkpoint),
    })
    per_class = reporting.per_class_table(result.per_class_accuracy, result.class_counts, manifest.class_names or None)
    per_class.to_csv(out_dir / "per_class.csv", index=False)
    return _status("success", f"{args.split} 准确率 {result.accuracy:.4f}", metrics)


def cmd_ablate(args: argparse.Namespace, argv: Sequence[str]) -> Dict[str, Any]:
    out_dir = Path(args.out or "runs/ablate")
    config = _config_for(args)
    setup_logging(out_dir, args.verbose)
    modes = args.modes or ([args.mode] if args.mode else list(MODES))
    unknown = [m for m in modes if m not in MODES]
    if unknown:
        raise UsageError(f"未知模式：{unknown}")
    grid = AblationGrid(
        modes=modes,
        clip_lengths=args.T or [config.model.clip_length],
        crops=[True, False] if args.ablate_crop else [config.train.crop],
        augments=[True, False] if args.ablate_augment else [config.train.augment],
        seeds=args.seeds or [config.train.seed],
    )
    write_run_manifest(out_dir, "ablate", argv, config, grid=grid.model_dump(), dataset=str(config.data.root))
    manifest = _load_manifest(config)
    table = run_ablation(
        grid, manifest, config.model, config.train, config.data, out_dir=out_dir,
        on_cell=lambda row: logger.info("完成格子 %s", row),
    )
    table.to_csv(out_dir / "ablation.csv", index=False, float_format="%.6f")
    length_table(table).to_csv(out_dir / "length_table.csv", float_format="%.6f")
    trend = fusion_trend(table)
    trend.to_csv(out_dir / "fusion_trend.csv", index=False, float_format="%.6f")
    metrics = {"rows": table.to_dict(orient="records"), "fusion_trend": trend.to_dict(orient="records")}
    reporting.write_json(out_dir / "metrics.json", metrics)
    return _status("success", f"消融完成：{len(table)} 个格子", metrics)


def cmd_inspect(args: argparse.Namespace, argv: Sequence[str]) -> Dict[str, Any]:
    run_dir = Path(args.run) if args.run else None
    out_dir = Path(args.out) if args.out else (run_dir or Path(".")) / "inspect"
    config = _config_for(args, run_dir)
    setup_logging(None, args.verbose)
    manifest = _load_manifest(config)
    entry = manifest.entry(args.sample)
    if config.train.mode == "pose_only" and entry.ir_path is not None:
        config = config.model_copy(update={"train": config.train.model_copy(update={"mode": "fusion"})})
    dataset = load_dataset(config, manifest)
    if args.sample not in dataset.samples:
        raise DataError(f"样本 {args.sample} 无法读取（已被跳过）")
    loader = BatchLoader(
        dataset,
        mode="fusion" if entry.ir_path is not None else "pose_only",
        clip_length=config.model.clip_length,
        map_size=config.model.map_size,
        seed=config.train.seed,
        augment=config.train.augment,
        eval_sampling=config.train.eval_sampling,
    )
    artifacts = inspect_sample(manifest, dataset, args.sample, loader, out_dir, crop_offset=config.data.crop_offset)
    return _status("success", f"已导出 {args.sample} 的调试文件", artifacts)


VERBS: Dict[str, Callable[[argparse.Namespace, Sequence[str]], Dict[str, Any]]] = {
    "synth": cmd_synth,
    "prep": cmd_prep,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "inspect": cmd_inspect,
}


def _fail(code: int, exc: Exception) -> int:
    print(f"错误：{exc}", file=sys.stderr)
    print(json.dumps(_status("error", str(exc), {"exit_code": code}), ensure_ascii=False))
    return code


def run(argv: Sequence[str] | None = None) -> int:
    """执行一个动词并返回退出码：0 成功，1 用法/配置错误，2 数据错误，3 数值异常。"""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return int(exc.code or 0)

    try:
        result = VERBS[args.verb](args, argv)
    except (UsageError, ConfigError) as exc:
        return _fail(EXIT_USAGE, exc)
    except (DataError, CheckpointError) as exc:
        return _fail(EXIT_DATA, exc)
    except NumericalError as exc:
        logger.error("数值异常：%s %s", exc, exc.diagnostics)
        return _fail(EXIT_NUMERICAL, exc)
    except Exception as exc:
        logger.exception("未预期的错误")
        return _fail(EXIT_USAGE, exc)
    print(json.dumps(result, ensure_ascii=False, indent=2, default=str))
    return EXIT_OK
