import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from dotenv import load_dotenv

from config import DataConfig, ModelConfig, RuntimeConfig, TrainConfigDefaults
from utils.complexity import compare_specs, count_macs, measure_times
from utils.data_io import (
    LabeledDataset, load_cifar10_bin, load_mnist, load_weights, save_weights, synth_dataset, synth_split,
    write_idx,
)
from utils.diagram_generator import ArchitectureDiagram
from utils.exceptions import DecomposeMeError, InputError
from utils.exporter import RunExporter
from utils.model_zoo import (
    ModelSpec, convert_model, decompose_model, fuse_groups, instantiate, load_model_spec,
    receptive_field, serialize_model_spec, with_head,
)
from utils.training import (
    AugmentConfig, PlateauConfig, TrainConfig, evaluate_per_class, evaluate_top1, predict, train,
)

logger = logging.getLogger("decomposeme")


class UsageError(Exception):
    """命令行用法错误"""
    pass


class ArgumentParser(argparse.ArgumentParser):
    """用法错误以退出码1返回，而不是直接退出进程"""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


@dataclass
class RunManifest:
    """一次训练运行的复现清单，训练开始前写出"""
    command: List[str]
    config: Dict
    seeds: Dict[str, int]
    spec_hash: str
    outputs: Dict[str, str]
    created: str = field(default_factory=lambda: datetime.now().isoformat(timespec="seconds"))


def spec_hash(spec: ModelSpec) -> str:
    """规范化模型描述的 git blob SHA-1"""
    data = serialize_model_spec(spec).encode(DataConfig.FILE_ENCODING)
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def parse_shape(text: str) -> Tuple[int, int, int]:
    try:
        shape = tuple(int(v) for v in text.lower().split("x"))
    except ValueError:
        raise InputError(f"输入形状格式应为 CxHxW: {text}")
    if len(shape) != 3 or min(shape) < 1:
        raise InputError(f"输入形状格式应为 CxHxW: {text}")
    return shape


def parse_indices(text: Optional[str]) -> Optional[List[int]]:
    if text is None:
        return None
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise InputError(f"层下标应为逗号分隔的整数: {text}")


def parse_group(text: str) -> Tuple[int, int]:
    try:
        start, end = (int(v) for v in text.split("-"))
    except ValueError:
        raise InputError(f"层组格式应为 a-b: {text}")
    return start, end


def resolve_spec(args) -> ModelSpec:
    spec = load_model_spec(args.model)
    if getattr(args, "head", None):
        spec = with_head(spec, args.head)
    return spec


def load_datasets(name: str, data_root: Optional[str], seed: int) -> Tuple[LabeledDataset, LabeledDataset]:
    """返回 (训练集, 验证集)"""
    if name.startswith("synth:"):
        parts = name.split(":")
        if len(parts) != 3:
            raise InputError(f"合成数据集格式应为 synth:<kind>:<n>: {name}")
        try:
            n = int(parts[2])
        except ValueError:
            raise InputError(f"合成数据集样本数必须是整数: {parts[2]}")
        return synth_split(parts[1], n, max(2, n // 5), seed)

    root = data_root or os.getenv(DataConfig.DATA_ENV_VAR)
    if not root:
        raise InputError(f"数据集 {name} 需要 --data 或环境变量 {DataConfig.DATA_ENV_VAR}")
    if name == "mnist":
        return load_mnist(root)
    if name == "cifar10":
        return load_cifar10_bin(root)
    raise InputError(f"未知数据集 {name}，可选 mnist | cifar10 | synth:<kind>:<n>")


def _default_flip(dataset: str) -> float:
    # 数字与合成图像不做翻转
    return TrainConfigDefaults.FLIP_PROB if dataset == "cifar10" else 0.0


def cmd_train(args, argv: Sequence[str]) -> int:
    spec = resolve_spec(args)
    cfg = TrainConfig(
        lr0=args.lr,
        momentum=args.momentum,
        weight_decay=args.wd,
        batch_size=args.batch,
        epochs=args.epochs,
        plateau=PlateauConfig(metric=args.plateau_metric),
        augment=AugmentConfig(
            crop_pad=args.crop_pad,
            flip_prob=_default_flip(args.dataset) if args.flip is None else args.flip,
        ),
        seed=args.seed,
    )
    exporter = RunExporter(args.out)
    outputs = {
        "metrics": str(exporter.out_dir / "metrics.csv"),
        "weights": str(exporter.out_dir / "weights.dmw1"),
        "manifest": str(exporter.out_dir / "manifest.json"),
        "spec": str(exporter.out_dir / "model.json"),
    }
    manifest = RunManifest(
        command=list(argv),
        config={
            "train": cfg.to_dict(),
            "model": args.model,
            "head": spec.head,
            "dataset": args.dataset,
            "data": args.data,
            "init": args.init,
            "threads": args.threads,
        },
        seeds={"model_seed": args.seed, "train_seed": cfg.seed},
        spec_hash=spec_hash(spec),
        outputs=outputs,
    )
    exporter.write_text("model.json", serialize_model_spec(spec))
    exporter.write_json("manifest.json", asdict(manifest))

    train_set, val_set = load_datasets(args.dataset, args.data, args.seed)
    model = instantiate(spec, args.init, args.seed)
    logger.info(f"训练 {spec.name}: {model.param_count():,} 个参数，{len(train_set)} 个训练样本")
    log = train(model, train_set, val_set, cfg, threads=args.threads, progress=not args.no_progress)

    exporter.write_text("metrics.csv", log.to_csv())
    exporter.write_bytes("weights.dmw1", save_weights(model))
    if args.bundle:
        exporter.export_bundle(summary={"模型": spec.name, "数据集": args.dataset, "epoch数": len(log)})
    sys.stdout.write(log.to_csv())
    return 0


def cmd_eval(args, argv) -> int:
    spec = resolve_spec(args)
    model = load_weights(Path(args.weights).read_bytes(), spec)
    _, val_set = load_datasets(args.dataset, args.data, args.seed)
    top1 = evaluate_top1(model, val_set, threads=args.threads)
    _, mean_per_class = evaluate_per_class(model, val_set, threads=args.threads)
    sys.stdout.write(f"model,top1,mean_per_class\n{spec.name},{top1:.6f},{mean_per_class:.6f}\n")
    if args.out:
        logits = predict(model, val_set.images, threads=args.threads)
        frame = pd.DataFrame(logits, columns=[f"class_{k}" for k in range(logits.shape[1])])
        frame.insert(0, "label", val_set.labels)
        RunExporter(args.out).write_text(
            "logits.csv", frame.to_csv(index=False, float_format="%.8g", lineterminator="\n"))
    return 0


def cmd_analyze(args, argv) -> int:
    spec = resolve_spec(args)
    input_shape = parse_shape(args.input) if args.input else None
    exporter = RunExporter(args.out) if args.out else None

    if args.compare:
        other = load_model_spec(args.compare)
        if args.head:
            other = with_head(other, args.head)
        table = compare_specs(spec, other, input_shape)
        logger.info(f"a={spec.name} b={other.name}")
        text = table.to_csv(index=False, lineterminator="\n")
        sys.stdout.write(text)
        if exporter:
            exporter.write_text("compare.csv", text)
    else:
        report = count_macs(spec, input_shape)
        text = report.to_csv()
        sys.stdout.write(text)
        for name, speedup in report.predicted_speedup.items():
            logger.info(f"{name}: 预测加速比 {speedup:.4f}")
        if exporter:
            exporter.write_text("cost.csv", text)

    if args.diagram:
        source = ArchitectureDiagram().generate(spec)
        if exporter:
            exporter.write_text("architecture.dot", source)
            try:
                exporter.write_bytes("architecture.png", ArchitectureDiagram().export_image(source))
            except OSError as e:
                logger.warning(str(e))
        else:
            sys.stdout.write(source)

    if args.time:
        model = instantiate(spec, ModelConfig.DEFAULT_INIT, 0)
        times = measure_times(model)
        logger.info("以下耗时仅供参考，不作为结论依据")
        text = times.to_csv(index=False, float_format="%.6f", lineterminator="\n")
        sys.stdout.write(text)
        if exporter:
            exporter.write_text("times.csv", text)
    return 0


def cmd_decompose(args, argv) -> int:
    spec = resolve_spec(args)
    indices = parse_indices(args.layers)
    if indices is None:
        indices = [i for i, layer in enumerate(spec.layers) if layer.kind == "conv2d"]
    exporter = RunExporter(args.out)

    if args.weights:
        model = load_weights(Path(args.weights).read_bytes(), spec)
        rank = args.rank if args.rank == "full" else int(args.rank)
        converted = convert_model(model, indices, rank)
        exporter.write_bytes("weights.dmw1", save_weights(converted))
        new_spec = converted.spec
    else:
        policy = "match_output" if args.L == "match" else {i: int(args.L) for i in indices}
        new_spec = decompose_model(spec, indices, policy)

    exporter.write_text("model.json", serialize_model_spec(new_spec))
    table = compare_specs(spec, new_spec)
    sys.stdout.write(table.to_csv(index=False, lineterminator="\n"))
    return 0


def cmd_fuse(args, argv) -> int:
    spec = resolve_spec(args)
    groups = [parse_group(g) for g in args.group]
    fused = fuse_groups(spec, groups)
    # 合并前后最后一层的感受野应一致
    before = receptive_field(spec, len(spec.layers) - 1)
    after = receptive_field(fused, len(fused.layers) - 1)
    logger.info(f"感受野: 合并前 {before}，合并后 {after}")
    text = serialize_model_spec(fused)
    sys.stdout.write(text)
    if args.out:
        RunExporter(args.out).write_text("model.json", text)
    return 0


def cmd_synth(args, argv) -> int:
    n_test = max(2, args.n // 5)
    data = synth_dataset(args.kind, args.n + n_test, args.seed, size=args.size, normalize=False)
    pixels = np.clip(np.rint(data.images[:, 0] * 255), 0, 255).astype(np.uint8)
    exporter = RunExporter(args.out)
    for split, part in (("train", slice(0, args.n)), ("test", slice(args.n, args.n + n_test))):
        images_name, labels_name = DataConfig.MNIST_FILES[split]
        write_idx(pixels[part], data.labels[part], exporter.path(images_name), exporter.path(labels_name))
    logger.info(f"合成数据 {args.kind}: 训练 {args.n} / 测试 {n_test}，写入 {exporter.out_dir}")
    return 0


def cmd_replay(args, argv) -> int:
    manifest = json.loads(Path(args.manifest).read_text(encoding=DataConfig.FILE_ENCODING))
    command = list(manifest["command"])
    if args.out:
        if "--out" in command:
            command[command.index("--out") + 1] = args.out
        else:
            command += ["--out", args.out]
    logger.info(f"重放: {' '.join(command)}")
    return dispatch(command, configure_logging=False)


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="decomposeme", description="分解卷积网络工具包")
    common = ArgumentParser(add_help=False)
    common.add_argument("--verbose", action="store_true", help="输出调试日志")
    common.add_argument("--threads", type=int, default=RuntimeConfig.THREADS, help="数据并行线程数")

    model = ArgumentParser(add_help=False)
    model.add_argument("--model", "--spec", dest="model", required=True, help="内置模型名或JSON文件")
    model.add_argument("--head", choices=["full", "compact", "compact_avg"])

    data = ArgumentParser(add_help=False)
    data.add_argument("--dataset", default="mnist", help="mnist | cifar10 | synth:<kind>:<n>")
    data.add_argument("--data", help=f"数据目录（默认读取 {DataConfig.DATA_ENV_VAR}）")
    data.add_argument("--seed", type=int, default=TrainConfigDefaults.SEED)

    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("train", parents=[common, model, data], help="训练模型")
    p.add_argument("--epochs", type=int, default=TrainConfigDefaults.EPOCHS)
    p.add_argument("--batch", type=int, default=TrainConfigDefaults.BATCH_SIZE)
    p.add_argument("--lr", type=float, default=TrainConfigDefaults.LR0)
    p.add_argument("--momentum", type=float, default=TrainConfigDefaults.MOMENTUM)
    p.add_argument("--wd", type=float, default=TrainConfigDefaults.WEIGHT_DECAY)
    p.add_argument("--init", choices=list(ModelConfig.INIT_SCHEMES), default=ModelConfig.DEFAULT_INIT)
    p.add_argument("--crop-pad", type=int, default=TrainConfigDefaults.CROP_PAD)
    p.add_argument("--flip", type=float, default=None, help="水平翻转概率（CIFAR-10 默认0.5，其余0）")
    p.add_argument("--plateau-metric", choices=["train_top1", "train_loss"],
                   default=TrainConfigDefaults.PLATEAU_METRIC)
    p.add_argument("--bundle", action="store_true", help="额外打包为 run.zip")
    p.add_argument("--no-progress", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", parents=[common, model, data], help="评估权重")
    p.add_argument("--weights", required=True)
    p.add_argument("--out", help="写出 logits.csv 的目录")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("analyze", parents=[common, model], help="参数量与MAC统计")
    p.add_argument("--input", help="输入形状 CxHxW")
    p.add_argument("--compare", help="对比的另一个模型")
    p.add_argument("--diagram", action="store_true", help="输出结构图 DOT")
    p.add_argument("--time", action="store_true", help="测量逐层耗时（仅供参考）")
    p.add_argument("--out")
    p.set_defaults(handler=cmd_analyze)

    p = sub.add_parser("decompose", parents=[common, model], help="分解卷积层")
    p.add_argument("--layers", help="逗号分隔的层下标（默认全部 conv2d）")
    p.add_argument("--L", default="match", help="int 或 match")
    p.add_argument("--weights", help="已训练权重；给出时按 --rank 转换")
    p.add_argument("--rank", default="full", help="int 或 full")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_decompose)

    p = sub.add_parser("fuse", parents=[common, model], help="合并连续卷积层")
    p.add_argument("--group", action="append", required=True, help="层组 a-b，可重复")
    p.add_argument("--out")
    p.set_defaults(handler=cmd_fuse)

    p = sub.add_parser("synth", parents=[common], help="生成合成数据集（IDX）")
    p.add_argument("--kind", choices=list(DataConfig.SYNTH_KINDS), required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=TrainConfigDefaults.SEED)
    p.add_argument("--size", type=int, default=DataConfig.SYNTH_IMAGE_SIZE)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("replay", parents=[common], help="按清单重放训练")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out")
    p.set_defaults(handler=cmd_replay)
    return parser


def dispatch(argv: Sequence[str], configure_logging: bool = True) -> int:
    """执行一条命令并返回退出码：0 成功，1 校验错误，2 运行失败"""
    argv = list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        sys.stderr.write(f"错误: {e}\n")
        return 1
    except SystemExit as e:
        return int(e.code or 0)

    if configure_logging:
        logging.basicConfig(
            level=logging.DEBUG if args.verbose else logging.INFO,
            format="%(asctime)s %(levelname)s %(name)s: %(message)s",
            stream=sys.stderr,
        )
    # 加载环境变量
    load_dotenv()

    try:
        return args.handler(args, argv) or 0
    except DecomposeMeError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except OSError as e:
        logger.error(f"I/O错误: {e}")
        return 2


if __name__ == "__main__":
    sys.exit(dispatch(sys.argv[1:]))
