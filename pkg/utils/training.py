"""SGD动量训练、平台学习率衰减、数据增强与评估"""
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Tuple
import logging

import numpy as np
import pandas as pd
from tqdm import tqdm

from config import RuntimeConfig, TrainConfigDefaults
from .batch_processor import BatchProcessor
from .data_io import LabeledDataset
from .exceptions import ConfigurationError, DimensionError, DivergenceError, InputError
from .model_zoo import Model
from .tensor_core import softmax_cross_entropy

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ["epoch", "lr", "train_loss", "train_top1", "val_top1", "gap"]


@dataclass
class PlateauConfig:
    window: int = TrainConfigDefaults.PLATEAU_WINDOW
    min_delta: float = TrainConfigDefaults.PLATEAU_MIN_DELTA
    factor: float = TrainConfigDefaults.PLATEAU_FACTOR
    metric: str = TrainConfigDefaults.PLATEAU_METRIC


@dataclass
class AugmentConfig:
    crop_pad: int = TrainConfigDefaults.CROP_PAD
    flip_prob: float = TrainConfigDefaults.FLIP_PROB


@dataclass
class TrainConfig:
    lr0: float = TrainConfigDefaults.LR0
    momentum: float = TrainConfigDefaults.MOMENTUM
    weight_decay: float = TrainConfigDefaults.WEIGHT_DECAY
    batch_size: int = TrainConfigDefaults.BATCH_SIZE
    epochs: int = TrainConfigDefaults.EPOCHS
    plateau: PlateauConfig = field(default_factory=PlateauConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = TrainConfigDefaults.SEED

    def __post_init__(self):
        if isinstance(self.plateau, dict):
            self.plateau = PlateauConfig(**self.plateau)
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)
        if self.lr0 <= 0:
            raise ConfigurationError(f"lr0 必须为正: {self.lr0}")
        if not 0 <= self.augment.flip_prob <= 1:
            raise ConfigurationError(f"flip_prob 必须在 [0, 1]: {self.augment.flip_prob}")
        if self.augment.crop_pad < 0:
            raise ConfigurationError(f"crop_pad 不能为负: {self.augment.crop_pad}")
        if not 0 < self.plateau.factor < 1:
            raise ConfigurationError(f"衰减因子必须在 (0, 1): {self.plateau.factor}")
        if self.plateau.window < 1:
            raise ConfigurationError(f"平台窗口必须 ≥ 1: {self.plateau.window}")
        if self.plateau.metric not in ("train_top1", "train_loss"):
            raise ConfigurationError(f"未知平台指标: {self.plateau.metric}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigurationError("batch_size 必须为正且 epochs 不能为负")

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    lr: float
    train_loss: float
    train_top1: float
    val_top1: float

    @property
    def gap(self) -> float:
        return self.train_top1 - self.val_top1


@dataclass
class MetricsLog:
    rows: List[EpochMetrics] = field(default_factory=list)

    def append(self, row: EpochMetrics) -> None:
        if self.rows and row.epoch <= self.rows[-1].epoch:
            raise InputError(f"epoch 必须递增: {self.rows[-1].epoch} → {row.epoch}")
        self.rows.append(row)

    def __len__(self) -> int:
        return len(self.rows)

    def __iter__(self) -> Iterator[EpochMetrics]:
        return iter(self.rows)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [[r.epoch, r.lr, r.train_loss, r.train_top1, r.val_top1, r.gap] for r in self.rows],
            columns=METRIC_COLUMNS,
        )

    def to_csv(self) -> str:
        return self.to_frame().to_csv(index=False, float_format=RuntimeConfig.CSV_FLOAT_FORMAT,
                                      lineterminator="\n")


def _decays(name: str) -> bool:
    return name.rsplit(".", 1)[-1] in TrainConfigDefaults.DECAY_PARAMS


def sgd_momentum_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
                      velocity: Dict[str, np.ndarray], cfg: TrainConfig,
                      lr: Optional[float] = None):
    """v ← μ·v + g + wd·w（仅权重），w ← w − lr·v；原地更新"""
    lr = cfg.lr0 if lr is None else lr
    for name, weight in params.items():
        if name not in grads:
            raise InputError(f"缺少参数 {name} 的梯度")
        grad = np.asarray(grads[name], dtype=np.float32)
        if grad.shape != weight.shape:
            raise InputError(f"参数 {name} 形状 {weight.shape} 与梯度 {grad.shape} 不一致")
        if cfg.weight_decay and _decays(name):
            grad = grad + np.float32(cfg.weight_decay) * weight
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(weight)
        v *= np.float32(cfg.momentum)
        v += grad
        weight -= np.float32(lr) * v
    return params, velocity


def plateau_schedule(log: MetricsLog, cfg: TrainConfig) -> float:
    """训练指标在最近 window 个epoch内的提升不超过 min_delta 时衰减学习率"""
    p = cfg.plateau
    if not log.rows:
        return cfg.lr0
    lr = log.rows[-1].lr
    if len(log.rows) < p.window:
        return lr
    window = log.rows[-p.window:]
    # 窗口内改变过学习率则不再衰减
    if any(row.lr != lr for row in window):
        return lr
    before = log.rows[:-p.window]
    if not before:
        before, window = window[:1], window[1:]
    if p.metric == "train_top1":
        improvement = max(r.train_top1 for r in window) - max(r.train_top1 for r in before)
    else:
        improvement = min(r.train_loss for r in before) - min(r.train_loss for r in window)
    # 精度是比值，四舍五入去掉浮点尾差
    if round(improvement, 9) <= p.min_delta:
        return lr * p.factor
    return lr


def augment(image: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """零填充随机裁剪后按概率水平翻转"""
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 3:
        raise DimensionError(f"augment 需要 (C,H,W) 图像，实际 {img.shape}")
    if cfg.crop_pad < 0:
        raise ConfigurationError(f"crop_pad 不能为负: {cfg.crop_pad}")
    _, h, w = img.shape
    pad = cfg.crop_pad
    if pad > 0:
        padded = np.pad(img, ((0, 0), (pad, pad), (pad, pad)), mode="constant")
        top = int(rng.integers(0, 2 * pad + 1))
        left = int(rng.integers(0, 2 * pad + 1))
        img = padded[:, top:top + h, left:left + w]
    if cfg.flip_prob > 0 and rng.random() < cfg.flip_prob:
        img = img[:, :, ::-1]
    return np.ascontiguousarray(img)


def augment_batch(images: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    if cfg.crop_pad == 0 and cfg.flip_prob == 0:
        return np.asarray(images, dtype=np.float32)
    return np.stack([augment(img, cfg, rng) for img in images])


def center_crop(images: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    h, w = images.shape[2], images.shape[3]
    th, tw = size
    if h < th or w < tw:
        raise DimensionError(f"图像 {h}x{w} 小于模型输入 {th}x{tw}")
    top, left = (h - th) // 2, (w - tw) // 2
    return images[:, :, top:top + th, left:left + tw]


def predict(model: Model, images: np.ndarray, batch_size: int = RuntimeConfig.EVAL_BATCH,
            threads: int = 1) -> np.ndarray:
    """推理模式logits (N, K)；图像大于模型输入时取中心裁剪"""
    images = center_crop(np.asarray(images, dtype=np.float32), model.spec.input_shape[1:])
    if images.shape[1] != model.spec.input_shape[0]:
        raise DimensionError(f"图像通道 {images.shape[1]} 与模型输入 {model.spec.input_shape[0]} 不一致")
    chunks = [images[i:i + batch_size] for i in range(0, len(images), batch_size)]
    threads = max(1, int(threads))
    if threads > 1 and len(chunks) > 1:
        # 每个线程一份副本，按连续块分组
        groups = [g for g in np.array_split(np.arange(len(chunks)), threads) if len(g)]
        jobs = [(model.replicate(), [chunks[i] for i in group]) for group in groups]

        def run(job):
            replica, parts = job
            return [replica.forward(x, train=False) for x in parts]

        with BatchProcessor(max_workers=threads) as processor:
            outputs = [out for part in processor.process_batch(jobs, run, "评估") for out in part]
    else:
        outputs = [model.forward(x, train=False) for x in chunks]
    if not outputs:
        return np.zeros((0, model.spec.num_classes), dtype=np.float32)
    return np.concatenate([o.reshape(o.shape[0], -1) for o in outputs])


def evaluate_top1(model: Model, dataset: LabeledDataset, threads: int = 1) -> float:
    """top-1 准确率；平局取最小类别下标"""
    if len(dataset) == 0:
        raise InputError("评估数据集为空")
    logits = predict(model, dataset.images, threads=threads)
    return float(np.mean(np.argmax(logits, axis=1) == dataset.labels))


def evaluate_per_class(model: Model, dataset: LabeledDataset, threads: int = 1) -> Tuple[np.ndarray, float]:
    """各类准确率（未出现的类为 nan）及其均值"""
    if len(dataset) == 0:
        raise InputError("评估数据集为空")
    pred = np.argmax(predict(model, dataset.images, threads=threads), axis=1)
    per_class = np.full(model.spec.num_classes, np.nan)
    for k in range(model.spec.num_classes):
        mask = dataset.labels == k
        if mask.any():
            per_class[k] = float(np.mean(pred[mask] == k))
    return per_class, float(np.nanmean(per_class))


def _step_single(model: Model, x: np.ndarray, y: np.ndarray):
    logits = model.forward(x, train=True)
    loss, grad = softmax_cross_entropy(logits, y)
    model.backward(grad)
    return loss, logits.reshape(len(y), -1), model.named_gradients()


def _step_parallel(model: Model, replicas: List[Model], processor: BatchProcessor,
                   x: np.ndarray, y: np.ndarray):
    """按样本切块并行前向/反向，按块顺序加权归约梯度"""
    bounds = np.array_split(np.arange(len(y)), len(replicas))
    jobs = [(replica, part) for replica, part in zip(replicas, bounds) if len(part)]

    def run(job):
        replica, part = job
        return _step_single(replica, x[part], y[part])

    results = processor.process_batch(jobs, run, "训练批")
    total = len(y)
    loss = 0.0
    grads: Dict[str, np.ndarray] = {}
    for (_, part), (part_loss, _, part_grads) in zip(jobs, results):
        weight = len(part) / total
        loss += part_loss * weight
        for name, g in part_grads.items():
            scaled = g.astype(np.float64) * weight
            grads[name] = grads[name] + scaled if name in grads else scaled
    grads = {name: g.astype(np.float32) for name, g in grads.items()}
    logits = np.concatenate([r[1] for r in results])

    # 各副本的BN批统计按块顺序平均后更新一次
    for position in range(len(model.layers)):
        pending = [replica.layers[position].pending_stats() for replica, _ in jobs]
        for slot in range(len(pending[0])):
            state = pending[0][slot][0]
            mean = np.mean([p[slot][1] for p in pending], axis=0)
            var = np.mean([p[slot][2] for p in pending], axis=0)
            state.update(mean, var)
    return loss, logits, grads


def train(model: Model, train_set: LabeledDataset, val_set: LabeledDataset, cfg: TrainConfig,
          threads: int = 1, progress: bool = True,
          epoch_callback: Optional[Callable[[EpochMetrics], None]] = None) -> MetricsLog:
    """按epoch打乱的小批量SGD；单线程模式结果逐位可复现"""
    if len(train_set) == 0 or len(val_set) == 0:
        raise InputError("训练集与验证集都不能为空")
    if tuple(train_set.images.shape[1:]) != tuple(model.spec.input_shape):
        raise DimensionError(
            f"训练图像形状 {train_set.images.shape[1:]} 与模型输入 {model.spec.input_shape} 不一致"
        )

    log = MetricsLog()
    params = model.named_parameters()
    velocity: Dict[str, np.ndarray] = {}
    lr = cfg.lr0
    threads = max(1, int(threads))
    replicas = [model.replicate() for _ in range(threads)] if threads > 1 else []
    n = len(train_set)
    n_batches = (n + cfg.batch_size - 1) // cfg.batch_size

    with BatchProcessor(max_workers=threads) as processor:
        for epoch in range(1, cfg.epochs + 1):
            rng = np.random.default_rng([cfg.seed, epoch])
            order = rng.permutation(n)
            loss_sum, correct = 0.0, 0
            bar = tqdm(range(n_batches), desc=f"epoch {epoch}", disable=not progress, leave=False)
            for batch in bar:
                idx = order[batch * cfg.batch_size:(batch + 1) * cfg.batch_size]
                x = augment_batch(train_set.images[idx], cfg.augment, rng)
                y = train_set.labels[idx]
                if replicas:
                    loss, logits, grads = _step_parallel(model, replicas, processor, x, y)
                else:
                    loss, logits, grads = _step_single(model, x, y)
                if not np.isfinite(loss):
                    raise DivergenceError(epoch, batch, loss)
                sgd_momentum_step(params, grads, velocity, cfg, lr)
                loss_sum += loss * len(idx)
                correct += int(np.sum(np.argmax(logits, axis=1) == y))
                bar.set_postfix(loss=f"{loss:.4f}")

            row = EpochMetrics(
                epoch=epoch,
                lr=lr,
                train_loss=loss_sum / n,
                train_top1=correct / n,
                val_top1=evaluate_top1(model, val_set, threads=threads),
            )
            log.append(row)
            logger.info(
                f"epoch {epoch}: lr={lr:g} loss={row.train_loss:.4f} "
                f"train_top1={row.train_top1:.4f} val_top1={row.val_top1:.4f} gap={row.gap:.4f}"
            )
            if epoch_callback:
                epoch_callback(row)

            new_lr = plateau_schedule(log, cfg)
            if new_lr != lr:
                logger.warning(f"训练指标进入平台期，学习率 {lr:g} → {new_lr:g}")
                lr = new_lr
    return log
