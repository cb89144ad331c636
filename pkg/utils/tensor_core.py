"""张量核心：基础层的前向/反向计算与有限差分梯度检查

所有张量均为 (N, C, H, W) 的 float32 数组，内部归约使用 float64 累加。
卷积采用互相关约定（不翻转卷积核）。
"""
from dataclasses import dataclass
from typing import Callable, NamedTuple, Tuple, Union
import logging

import numpy as np

from config import ModelConfig
from .exceptions import ConfigurationError, DimensionError, InputError

logger = logging.getLogger(__name__)

Tensor = np.ndarray
Pair = Tuple[int, int]


def _pair(value: Union[int, Pair], name: str) -> Pair:
    if isinstance(value, (tuple, list)):
        if len(value) != 2:
            raise ConfigurationError(f"{name} 需要一个整数或 (h, w) 二元组: {value}")
        return int(value[0]), int(value[1])
    return int(value), int(value)


def as_tensor(x, name: str = "input") -> Tensor:
    """转换为连续的4维float32张量"""
    arr = np.asarray(x, dtype=np.float32)
    if arr.ndim != 4:
        raise DimensionError(f"{name} 需要4维 (N,C,H,W)，实际为 {arr.ndim} 维 {arr.shape}")
    return np.ascontiguousarray(arr)


def conv_output_size(size: int, kernel: int, stride: int, pad: int, axis: str = "H") -> int:
    """计算卷积/池化输出尺寸，要求整除"""
    span = size + 2 * pad - kernel
    if span < 0:
        raise ConfigurationError(
            f"轴 {axis}: 卷积核 {kernel} 大于填充后的输入 {size + 2 * pad}"
        )
    if span % stride:
        raise ConfigurationError(
            f"轴 {axis}: 输出尺寸 ({size} + 2·{pad} − {kernel})/{stride} + 1 不是整数"
        )
    return span // stride + 1


@dataclass
class KernelBank2D:
    """一个二维卷积层的权重 (F, C, d_v, d_h) 与偏置 (F,)"""
    weights: np.ndarray
    bias: np.ndarray
    stride: Union[int, Pair] = 1
    padding: Union[int, Pair] = 0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float32)
        if self.weights.ndim != 4:
            raise DimensionError(f"卷积核需要4维 (F,C,d_v,d_h)，实际为 {self.weights.shape}")
        if min(self.weights.shape) < 1:
            raise ConfigurationError(f"卷积核各维必须 ≥ 1: {self.weights.shape}")
        self.bias = np.asarray(self.bias, dtype=np.float32).reshape(-1)
        if self.bias.shape[0] != self.weights.shape[0]:
            raise DimensionError(
                f"偏置长度 {self.bias.shape[0]} 与滤波器数 F={self.weights.shape[0]} 不一致"
            )
        self.stride = _pair(self.stride, "stride")
        self.padding = _pair(self.padding, "padding")
        if min(self.stride) < 1:
            raise ConfigurationError(f"stride 必须为正: {self.stride}")
        if min(self.padding) < 0:
            raise ConfigurationError(f"padding 不能为负: {self.padding}")

    @property
    def filters(self) -> int:
        return self.weights.shape[0]

    @property
    def channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel_size(self) -> Pair:
        return self.weights.shape[2], self.weights.shape[3]

    def output_shape(self, input_shape: Tuple[int, ...]) -> Tuple[int, int, int, int]:
        n, _, h, w = input_shape
        d_v, d_h = self.kernel_size
        out_h = conv_output_size(h, d_v, self.stride[0], self.padding[0], "H")
        out_w = conv_output_size(w, d_h, self.stride[1], self.padding[1], "W")
        return n, self.filters, out_h, out_w


def im2col(x: Tensor, kernel_h: int, kernel_w: int, stride: Pair, pad: Pair):
    """将输入窗口展开为矩阵 (N·out_h·out_w, C·kh·kw)，float64"""
    n, c, h, w = x.shape
    out_h = conv_output_size(h, kernel_h, stride[0], pad[0], "H")
    out_w = conv_output_size(w, kernel_w, stride[1], pad[1], "W")

    img = np.pad(
        x.astype(np.float64),
        [(0, 0), (0, 0), (pad[0], pad[0]), (pad[1], pad[1])],
        mode="constant",
    )
    col = np.empty((n, c, kernel_h, kernel_w, out_h, out_w), dtype=np.float64)
    for y in range(kernel_h):
        y_max = y + stride[0] * out_h
        for xx in range(kernel_w):
            x_max = xx + stride[1] * out_w
            col[:, :, y, xx, :, :] = img[:, :, y:y_max:stride[0], xx:x_max:stride[1]]

    # (N, C, kh, kw, oh, ow) -> (N, oh, ow, C, kh, kw)
    col = col.transpose(0, 4, 5, 1, 2, 3).reshape(n * out_h * out_w, -1)
    return col, out_h, out_w


def col2im(col: np.ndarray, x_shape, kernel_h: int, kernel_w: int, stride: Pair, pad: Pair) -> np.ndarray:
    """im2col 的转置：把窗口梯度累加回输入位置"""
    n, c, h, w = x_shape
    out_h = conv_output_size(h, kernel_h, stride[0], pad[0], "H")
    out_w = conv_output_size(w, kernel_w, stride[1], pad[1], "W")

    col = col.reshape(n, out_h, out_w, c, kernel_h, kernel_w).transpose(0, 3, 4, 5, 1, 2)
    img = np.zeros(
        (n, c, h + 2 * pad[0] + stride[0] - 1, w + 2 * pad[1] + stride[1] - 1),
        dtype=np.float64,
    )
    for y in range(kernel_h):
        y_max = y + stride[0] * out_h
        for xx in range(kernel_w):
            x_max = xx + stride[1] * out_w
            img[:, :, y:y_max:stride[0], xx:x_max:stride[1]] += col[:, :, y, xx, :, :]
    return img[:, :, pad[0]:pad[0] + h, pad[1]:pad[1] + w]


def conv2d(input: Tensor, bank: KernelBank2D) -> Tensor:
    """二维互相关卷积"""
    x = as_tensor(input)
    if x.shape[1] != bank.channels:
        raise DimensionError(
            f"轴 C 不匹配: 输入通道 {x.shape[1]}，卷积核通道 {bank.channels}"
        )
    n = x.shape[0]
    d_v, d_h = bank.kernel_size
    col, out_h, out_w = im2col(x, d_v, d_h, bank.stride, bank.padding)
    w = bank.weights.reshape(bank.filters, -1).astype(np.float64)
    out = col @ w.T + bank.bias.astype(np.float64)
    out = out.reshape(n, out_h, out_w, bank.filters).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out, dtype=np.float32)


def conv2d_backward(input: Tensor, bank: KernelBank2D, grad_out: Tensor):
    """返回 (grad_input, grad_weights, grad_bias)"""
    x = as_tensor(input)
    if x.shape[1] != bank.channels:
        raise DimensionError(
            f"轴 C 不匹配: 输入通道 {x.shape[1]}，卷积核通道 {bank.channels}"
        )
    expected = bank.output_shape(x.shape)
    g = np.asarray(grad_out)
    if g.shape != expected:
        bad = [ax for ax, a, b in zip("NCHW", g.shape, expected) if a != b] if g.ndim == 4 else ["ndim"]
        raise DimensionError(f"grad_out 形状 {g.shape} 与输出 {expected} 不一致 (轴 {','.join(bad)})")

    d_v, d_h = bank.kernel_size
    col, _, _ = im2col(x, d_v, d_h, bank.stride, bank.padding)
    g = g.astype(np.float64).transpose(0, 2, 3, 1).reshape(-1, bank.filters)
    w = bank.weights.reshape(bank.filters, -1).astype(np.float64)

    grad_w = (g.T @ col).reshape(bank.weights.shape)
    grad_b = g.sum(axis=0)
    grad_x = col2im(g @ w, x.shape, d_v, d_h, bank.stride, bank.padding)
    return (
        np.ascontiguousarray(grad_x, dtype=np.float32),
        grad_w.astype(np.float32),
        grad_b.astype(np.float32),
    )


def relu(input: Tensor) -> Tensor:
    return np.maximum(np.asarray(input, dtype=np.float32), 0)


def relu_backward(input: Tensor, grad_out: Tensor) -> Tensor:
    # 输入恰为0处梯度为0
    x = np.asarray(input, dtype=np.float32)
    return np.where(x > 0, grad_out, 0).astype(np.float32)


def tanh(input: Tensor) -> Tensor:
    return np.tanh(np.asarray(input, dtype=np.float32))


def tanh_backward(input: Tensor, grad_out: Tensor) -> Tensor:
    t = np.tanh(np.asarray(input, dtype=np.float64))
    return (np.asarray(grad_out, dtype=np.float64) * (1.0 - t * t)).astype(np.float32)


def maxpool(input: Tensor, window: int, stride: int):
    """最大池化，返回 (输出, argmax)；平局取扫描顺序第一个"""
    x = as_tensor(input)
    n, c, h, w = x.shape
    col, out_h, out_w = im2col(x.reshape(n * c, 1, h, w), window, window, (stride, stride), (0, 0))
    argmax = col.argmax(axis=1)
    out = col[np.arange(col.shape[0]), argmax].reshape(n, c, out_h, out_w)
    return out.astype(np.float32), argmax


def maxpool_backward(input: Tensor, argmax: np.ndarray, grad_out: Tensor, window: int, stride: int) -> Tensor:
    x_shape = np.shape(input)
    n, c, h, w = x_shape
    g = np.asarray(grad_out, dtype=np.float64).reshape(-1)
    if g.size != argmax.size:
        raise DimensionError(f"grad_out 元素数 {g.size} 与池化输出 {argmax.size} 不一致")
    dcol = np.zeros((argmax.size, window * window), dtype=np.float64)
    dcol[np.arange(argmax.size), argmax] = g
    dx = col2im(dcol, (n * c, 1, h, w), window, window, (stride, stride), (0, 0))
    return dx.reshape(x_shape).astype(np.float32)


def global_avgpool(input: Tensor) -> Tensor:
    x = as_tensor(input)
    return x.astype(np.float64).mean(axis=(2, 3), keepdims=True).astype(np.float32)


def global_avgpool_backward(input: Tensor, grad_out: Tensor) -> Tensor:
    n, c, h, w = np.shape(input)
    g = np.asarray(grad_out, dtype=np.float32).reshape(n, c, 1, 1)
    return np.broadcast_to(g / (h * w), (n, c, h, w)).astype(np.float32)


def linear(input: Tensor, weights: np.ndarray, bias: np.ndarray) -> Tensor:
    """逐样本仿射变换，输出形状 (N, out, 1, 1)"""
    x = np.asarray(input, dtype=np.float32)
    flat = x.reshape(x.shape[0], -1)
    w = np.asarray(weights)
    if w.ndim != 2 or flat.shape[1] != w.shape[1]:
        raise DimensionError(f"线性层输入长度 {flat.shape[1]} 与权重 {w.shape} 不一致")
    b = np.asarray(bias).reshape(-1)
    if b.shape[0] != w.shape[0]:
        raise DimensionError(f"偏置长度 {b.shape[0]} 与输出维度 {w.shape[0]} 不一致")
    out = flat.astype(np.float64) @ w.astype(np.float64).T + b.astype(np.float64)
    return out.reshape(x.shape[0], w.shape[0], 1, 1).astype(np.float32)


def linear_backward(input: Tensor, weights: np.ndarray, grad_out: Tensor):
    """返回 (grad_input, grad_weights, grad_bias)"""
    x = np.asarray(input, dtype=np.float32)
    flat = x.reshape(x.shape[0], -1).astype(np.float64)
    w = np.asarray(weights, dtype=np.float64)
    g = np.asarray(grad_out, dtype=np.float64).reshape(x.shape[0], -1)
    if g.shape[1] != w.shape[0]:
        raise DimensionError(f"grad_out 长度 {g.shape[1]} 与输出维度 {w.shape[0]} 不一致")
    grad_x = (g @ w).reshape(x.shape)
    return grad_x.astype(np.float32), (g.T @ flat).astype(np.float32), g.sum(axis=0).astype(np.float32)


@dataclass
class BatchNormState:
    """批归一化的滑动统计量"""
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = ModelConfig.BN_MOMENTUM

    @classmethod
    def create(cls, channels: int) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=np.float32), np.ones(channels, dtype=np.float32))

    def update(self, mean: np.ndarray, var: np.ndarray) -> None:
        # 原地更新，模型参数表持有同一数组
        m = self.momentum
        self.running_mean[...] = (1 - m) * self.running_mean + m * mean
        self.running_var[...] = (1 - m) * self.running_var + m * var


class BatchNormCache(NamedTuple):
    x_hat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    mode: str
    batch_mean: np.ndarray
    batch_var: np.ndarray


def batchnorm(input: Tensor, gamma, beta, state: BatchNormState, mode: str = "train",
              eps: float = ModelConfig.BN_EPS, update_stats: bool = True):
    """按通道归一化，返回 (输出, cache)；训练模式下更新滑动统计"""
    x = as_tensor(input)
    c = x.shape[1]
    gamma = np.asarray(gamma, dtype=np.float64).reshape(-1)
    beta = np.asarray(beta, dtype=np.float64).reshape(-1)
    if gamma.shape[0] != c or beta.shape[0] != c:
        raise DimensionError(f"轴 C 不匹配: 输入通道 {c}，gamma/beta 长度 {gamma.shape[0]}/{beta.shape[0]}")
    if eps <= 0:
        raise ConfigurationError(f"eps 必须为正: {eps}")
    if mode not in ("train", "infer"):
        raise ConfigurationError(f"未知模式: {mode}")

    x64 = x.astype(np.float64)
    shape = (1, c, 1, 1)
    if mode == "train":
        mean = x64.mean(axis=(0, 2, 3))
        var = x64.var(axis=(0, 2, 3))
        count = x.shape[0] * x.shape[2] * x.shape[3]
        unbiased = var * count / (count - 1) if count > 1 else var
        if update_stats:
            state.update(mean, unbiased)
    else:
        mean = state.running_mean.astype(np.float64)
        var = state.running_var.astype(np.float64)
        unbiased = var

    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x64 - mean.reshape(shape)) * inv_std.reshape(shape)
    out = gamma.reshape(shape) * x_hat + beta.reshape(shape)
    cache = BatchNormCache(x_hat, inv_std, gamma, mode, mean, unbiased)
    return out.astype(np.float32), cache


def batchnorm_backward(cache: BatchNormCache, grad_out: Tensor):
    """返回 (grad_input, grad_gamma, grad_beta)"""
    g = np.asarray(grad_out, dtype=np.float64)
    if g.shape != cache.x_hat.shape:
        raise DimensionError(f"grad_out 形状 {g.shape} 与输入 {cache.x_hat.shape} 不一致")
    c = g.shape[1]
    shape = (1, c, 1, 1)
    axes = (0, 2, 3)
    grad_gamma = (g * cache.x_hat).sum(axis=axes)
    grad_beta = g.sum(axis=axes)
    dx_hat = g * cache.gamma.reshape(shape)
    if cache.mode == "infer":
        dx = dx_hat * cache.inv_std.reshape(shape)
    else:
        count = g.shape[0] * g.shape[2] * g.shape[3]
        dx = (cache.inv_std.reshape(shape) / count) * (
            count * dx_hat
            - dx_hat.sum(axis=axes).reshape(shape)
            - cache.x_hat * (dx_hat * cache.x_hat).sum(axis=axes).reshape(shape)
        )
    return dx.astype(np.float32), grad_gamma.astype(np.float32), grad_beta.astype(np.float32)


def softmax_cross_entropy(logits: Tensor, labels) -> Tuple[float, np.ndarray]:
    """批平均交叉熵，返回 (loss, grad_logits)"""
    raw = np.asarray(logits)
    n = raw.shape[0]
    z = raw.astype(np.float64).reshape(n, -1)
    labels = np.asarray(labels).reshape(-1)
    if labels.shape[0] != n:
        raise DimensionError(f"标签数 {labels.shape[0]} 与批大小 {n} 不一致")
    k = z.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise InputError(f"标签超出范围 [0, {k}): min={labels.min()} max={labels.max()}")
    labels = labels.astype(np.int64)

    z = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(log_norm - z[rows, labels]))

    prob = np.exp(z - log_norm[:, None])
    prob[rows, labels] -= 1.0
    grad = (prob / n).reshape(raw.shape)
    return loss, grad.astype(np.float32)


def numerical_gradient(func: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-2) -> np.ndarray:
    """逐坐标中心差分"""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = float(func(x))
        flat[i] = orig - eps
        f_minus = float(func(x))
        flat[i] = orig
        out[i] = (f_plus - f_minus) / (2 * eps)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """|a−b| / max(1, |a|, |b|)"""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))


def grad_check(closure: Callable[[np.ndarray], Tuple[float, np.ndarray]], input: np.ndarray,
               eps: float = 1e-2) -> float:
    """closure(x) 返回 (标量, 解析梯度)；返回最大相对误差"""
    x = np.array(input, dtype=np.float64)
    _, analytic = closure(x.copy())
    numeric = numerical_gradient(lambda z: closure(z)[0], x, eps)
    analytic = np.asarray(analytic, dtype=np.float64).reshape(numeric.shape)
    if numeric.size == 0:
        return 0.0
    err = float(relative_error(analytic, numeric).max())
    logger.debug("grad_check: %d 个坐标，最大相对误差 %.3e", numeric.size, err)
    return err
