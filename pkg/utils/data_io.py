"""数据集读取（MNIST IDX、CIFAR-10二进制、合成数据）与 DMW1 权重文件"""
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union
import logging
import struct

import numpy as np

from config import DataConfig
from .exceptions import DimensionError, FormatError, InputError, ValidationError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


@dataclass
class LabeledDataset:
    """标准化后的图像 (N,C,H,W) 与标签；mean/std 为所用的通道统计量"""
    images: np.ndarray
    labels: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    num_classes: int = 10

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.images.ndim != 4:
            raise DimensionError(f"图像需要4维 (N,C,H,W)，实际 {self.images.shape}")
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValidationError(f"图像数 {self.images.shape[0]} 与标签数 {self.labels.shape[0]} 不一致")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValidationError(f"标签超出范围 [0, {self.num_classes})")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices) -> "LabeledDataset":
        return LabeledDataset(self.images[indices], self.labels[indices], self.mean, self.std, self.num_classes)


def channel_stats(images: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """逐通道均值与标准差（标准差为0时取1）"""
    x = np.asarray(images, dtype=np.float64)
    mean = x.mean(axis=(0, 2, 3))
    std = x.std(axis=(0, 2, 3))
    std[std == 0] = 1.0
    return mean, std


def standardize(images: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    shape = (1, -1, 1, 1)
    return ((np.asarray(images, dtype=np.float64) - np.reshape(mean, shape)) / np.reshape(std, shape)).astype(np.float32)


def _build(raw_images: np.ndarray, labels: np.ndarray, stats, num_classes: int) -> LabeledDataset:
    """raw_images 已缩放到 [0,1]；stats 为空时用本集统计量"""
    mean, std = stats if stats is not None else channel_stats(raw_images)
    return LabeledDataset(standardize(raw_images, mean, std), labels, mean, std, num_classes)


# ---------------------------------------------------------------- IDX

def read_idx_images(raw: bytes, source: str = "<bytes>") -> np.ndarray:
    """解析IDX图像文件，返回 uint8 (N, rows, cols)"""
    if len(raw) < 16:
        raise FormatError(f"{source}: 文件截断于字节偏移 {len(raw)}，文件头需要 16 字节")
    magic, count, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != DataConfig.IDX_IMAGES_MAGIC:
        raise FormatError(f"{source}: magic 错误，期望 0x{DataConfig.IDX_IMAGES_MAGIC:08x}，实际 0x{magic:08x}")
    need = 16 + count * rows * cols
    if len(raw) < need:
        raise FormatError(f"{source}: 文件截断于字节偏移 {len(raw)}，需要 {need} 字节")
    return np.frombuffer(raw, dtype=np.uint8, count=count * rows * cols, offset=16).reshape(count, rows, cols)


def read_idx_labels(raw: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(raw) < 8:
        raise FormatError(f"{source}: 文件截断于字节偏移 {len(raw)}，文件头需要 8 字节")
    magic, count = struct.unpack(">II", raw[:8])
    if magic != DataConfig.IDX_LABELS_MAGIC:
        raise FormatError(f"{source}: magic 错误，期望 0x{DataConfig.IDX_LABELS_MAGIC:08x}，实际 0x{magic:08x}")
    if len(raw) < 8 + count:
        raise FormatError(f"{source}: 文件截断于字节偏移 {len(raw)}，需要 {8 + count} 字节")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=8)


def load_idx(images_path: PathLike, labels_path: PathLike, stats=None, num_classes: int = 10) -> LabeledDataset:
    """读取一对IDX文件；像素缩放到 [0,1] 后按通道标准化"""
    images = read_idx_images(Path(images_path).read_bytes(), str(images_path))
    labels = read_idx_labels(Path(labels_path).read_bytes(), str(labels_path))
    if images.shape[0] != labels.shape[0]:
        raise ValidationError(f"图像数 {images.shape[0]} 与标签数 {labels.shape[0]} 不一致")
    raw = images.astype(np.float32)[:, None, :, :] / 255.0
    logger.info(f"读取 {images_path}: {images.shape[0]} 张 {images.shape[1]}x{images.shape[2]} 图像")
    return _build(raw, labels, stats, num_classes)


def load_mnist(root: PathLike) -> Tuple[LabeledDataset, LabeledDataset]:
    """训练集统计量同时用于测试集"""
    root = Path(root)
    train_images, train_labels = DataConfig.MNIST_FILES["train"]
    test_images, test_labels = DataConfig.MNIST_FILES["test"]
    train = load_idx(root / train_images, root / train_labels)
    test = load_idx(root / test_images, root / test_labels, stats=(train.mean, train.std))
    return train, test


def write_idx(images: np.ndarray, labels: np.ndarray, images_path: PathLike, labels_path: PathLike) -> None:
    """把 uint8 图像 (N, rows, cols) 与标签写成IDX文件"""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1)
    if images.ndim != 3 or images.shape[0] != labels.shape[0]:
        raise DimensionError(f"图像 {images.shape} 与标签 {labels.shape} 不匹配")
    count, rows, cols = images.shape
    Path(images_path).write_bytes(
        struct.pack(">IIII", DataConfig.IDX_IMAGES_MAGIC, count, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", DataConfig.IDX_LABELS_MAGIC, count) + labels.tobytes())


# ---------------------------------------------------------------- CIFAR-10

def parse_cifar10_records(raw: bytes, source: str = "<bytes>",
                          records: Optional[int] = DataConfig.CIFAR_RECORDS_PER_FILE):
    """每条记录：1字节标签 + R/G/B 三个 32x32 平面"""
    size = DataConfig.CIFAR_RECORD_BYTES
    if records is not None and len(raw) != records * size:
        raise FormatError(f"{source}: 文件大小 {len(raw)} 字节，应为 {records}·{size} = {records * size} 字节")
    if len(raw) % size:
        raise FormatError(f"{source}: 文件大小 {len(raw)} 不是记录长度 {size} 的整数倍")
    table = np.frombuffer(raw, dtype=np.uint8).reshape(-1, size)
    return table[:, 1:].reshape(-1, 3, 32, 32), table[:, 0].copy()


def load_cifar10_bin(root: PathLike, records_per_file: Optional[int] = DataConfig.CIFAR_RECORDS_PER_FILE
                     ) -> Tuple[LabeledDataset, LabeledDataset]:
    root = Path(root)

    def read(name: str):
        path = root / name
        if not path.is_file():
            raise FileNotFoundError(f"缺少 CIFAR-10 批文件: {path}")
        return parse_cifar10_records(path.read_bytes(), str(path), records_per_file)

    parts = [read(name) for name in DataConfig.CIFAR_TRAIN_FILES]
    train_images = np.concatenate([p[0] for p in parts]).astype(np.float32) / 255.0
    train_labels = np.concatenate([p[1] for p in parts])
    test_images, test_labels = read(DataConfig.CIFAR_TEST_FILE)

    train = _build(train_images, train_labels, None, 10)
    test = _build(test_images.astype(np.float32) / 255.0, test_labels, (train.mean, train.std), 10)
    logger.info(f"读取 CIFAR-10: 训练 {len(train)} / 测试 {len(test)}")
    return train, test


# ---------------------------------------------------------------- 合成数据

def blob_means(size: int = DataConfig.SYNTH_IMAGE_SIZE) -> np.ndarray:
    """两类的生成均值图像 (2, 1, size, size)：左右半区亮度相反"""
    means = np.empty((2, 1, size, size), dtype=np.float32)
    half = size // 2
    means[0, :, :, :half], means[0, :, :, half:] = 0.25, 0.75
    means[1, :, :, :half], means[1, :, :, half:] = 0.75, 0.25
    return means


def synth_dataset(kind: str, n: int, seed: int, size: int = DataConfig.SYNTH_IMAGE_SIZE,
                  normalize: bool = True) -> LabeledDataset:
    """blobs: 两类高斯团；separable_bars: 水平条(0)与竖直条(1)"""
    if kind not in DataConfig.SYNTH_KINDS:
        raise InputError(f"未知合成数据类型 {kind}，可选 {DataConfig.SYNTH_KINDS}")
    if n < 2:
        raise InputError(f"样本数必须 ≥ 2: {n}")
    if size < 3:
        raise InputError(f"图像边长必须 ≥ 3: {size}")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % 2)

    if kind == "blobs":
        noise = np.clip(rng.normal(0.0, 0.1, size=(n, 1, size, size)), -0.2, 0.2)
        images = blob_means(size)[labels] + noise
    else:
        images = rng.uniform(0.0, 0.1, size=(n, 1, size, size))
        positions = rng.integers(1, size - 1, size=n)
        strokes = rng.uniform(0.9, 1.0, size=(n, size))
        for i in range(n):
            if labels[i] == 0:
                images[i, 0, positions[i], :] = strokes[i]
            else:
                images[i, 0, :, positions[i]] = strokes[i]

    images = images.astype(np.float32)
    stats = None if normalize else (np.zeros(1), np.ones(1))
    return _build(images, labels, stats, num_classes=2)


def synth_split(kind: str, n_train: int, n_val: int, seed: int,
                size: int = DataConfig.SYNTH_IMAGE_SIZE) -> Tuple[LabeledDataset, LabeledDataset]:
    """一次生成训练+验证样本；标准化统计量只取自训练部分"""
    if n_val < 1:
        raise InputError(f"验证样本数必须 ≥ 1: {n_val}")
    raw = synth_dataset(kind, n_train + n_val, seed, size=size, normalize=False)
    stats = channel_stats(raw.images[:n_train])
    train = _build(raw.images[:n_train], raw.labels[:n_train], stats, num_classes=2)
    val = _build(raw.images[n_train:], raw.labels[n_train:], stats, num_classes=2)
    return train, val


# ---------------------------------------------------------------- DMW1 权重文件

def save_weights(model) -> bytes:
    """magic + u32 层数；每层 u16 名长 + 名字 + u8 张量数；每个张量 u8 秩 + u32 各维 + f32 小端数据"""
    layers = model.persistent_layers()
    out = bytearray(DataConfig.WEIGHTS_MAGIC)
    out += struct.pack("<I", len(layers))
    for layer in layers:
        name = layer.name.encode(DataConfig.FILE_ENCODING)
        out += struct.pack("<H", len(name)) + name
        tensors = layer.state_tensors()
        out += struct.pack("<B", len(tensors))
        for _, tensor in tensors:
            out += struct.pack("<B", tensor.ndim)
            out += struct.pack(f"<{tensor.ndim}I", *tensor.shape)
            out += np.ascontiguousarray(tensor, dtype="<f4").tobytes()
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, size: int, where: str) -> bytes:
        end = self.offset + size
        if end > len(self.data):
            raise FormatError(f"数据截断：读取 {where} 时在字节偏移 {len(self.data)} 处结束（需要 {end}）")
        chunk = self.data[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str, where: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), where))


def load_weights(data: bytes, spec) -> "Model":
    """按 spec 构造模型并逐位载入权重"""
    from .model_zoo import instantiate

    magic = DataConfig.WEIGHTS_MAGIC
    if data[:3] == magic[:3] and data[:4] != magic:
        raise FormatError(f"权重文件版本不匹配: 期望 {magic!r}，实际 {data[:4]!r}")
    if data[:4] != magic:
        raise FormatError(f"权重文件 magic 错误: 期望 {magic!r}，实际 {data[:4]!r}")

    model = instantiate(spec, seed=0)
    layers = model.persistent_layers()
    reader = _Reader(data)
    reader.offset = 4
    (count,) = reader.unpack("<I", "文件头")
    if count != len(layers):
        raise FormatError(f"层数不匹配: 文件 {count}，模型 {len(layers)}")

    for layer in layers:
        (name_len,) = reader.unpack("<H", f"层 {layer.name}")
        name = reader.take(name_len, f"层 {layer.name}").decode(DataConfig.FILE_ENCODING, errors="replace")
        if name != layer.name:
            raise FormatError(f"层名不匹配: 文件 {name}，模型 {layer.name}")
        tensors = layer.state_tensors()
        (n_tensors,) = reader.unpack("<B", f"层 {name}")
        if n_tensors != len(tensors):
            raise FormatError(f"层 {name} 张量数不匹配: 文件 {n_tensors}，模型 {len(tensors)}")
        for key, target in tensors:
            (rank,) = reader.unpack("<B", f"层 {name}")
            shape = reader.unpack(f"<{rank}I", f"层 {name}") if rank else ()
            if tuple(shape) != target.shape:
                raise FormatError(f"层 {name} 的 {key} 形状不匹配: 文件 {tuple(shape)}，模型 {target.shape}")
            payload = reader.take(4 * target.size, f"层 {name}")
            np.copyto(target, np.frombuffer(payload, dtype="<f4").reshape(target.shape))

    if reader.offset != len(data):
        raise FormatError(f"权重文件末尾多出 {len(data) - reader.offset} 字节")
    return model
