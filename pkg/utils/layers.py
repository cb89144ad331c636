"""网络层：分解卷积层、层描述以及可训练层对象

分解层计算 φ(b^h + 水平卷积(φ(b^v + 垂直卷积(x))))，
order="hv" 时两个一维阶段交换顺序。
"""
from abc import ABC, abstractmethod
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, NamedTuple, Optional, Tuple, Union
import copy
import logging

import numpy as np

from . import tensor_core as tc
from .exceptions import ConfigurationError, DimensionError, SemanticError, ValidationError
from .tensor_core import KernelBank2D, Pair, Tensor

logger = logging.getLogger(__name__)


class Nonlinearity(str, Enum):
    RELU = "relu"
    TANH = "tanh"
    IDENTITY = "identity"


NONLINEARITIES = tuple(nl.value for nl in Nonlinearity)
ORDERS = ("vh", "hv")
LAYER_KINDS = ("conv2d", "decomposed", "relu", "tanh", "maxpool", "batchnorm", "linear", "avgpool_global")


def activate(x: Tensor, nl: Nonlinearity) -> Tensor:
    nl = Nonlinearity(nl)
    if nl is Nonlinearity.RELU:
        return tc.relu(x)
    if nl is Nonlinearity.TANH:
        return tc.tanh(x)
    return np.asarray(x, dtype=np.float32)


def activate_backward(x: Tensor, grad_out: Tensor, nl: Nonlinearity) -> Tensor:
    nl = Nonlinearity(nl)
    if nl is Nonlinearity.RELU:
        return tc.relu_backward(x, grad_out)
    if nl is Nonlinearity.TANH:
        return tc.tanh_backward(x, grad_out)
    return np.asarray(grad_out, dtype=np.float32)


@dataclass
class DecomposedLayer:
    """两个一维卷积阶段组成的分解层

    order="vh": vertical (L,C,d,1)，horizontal (F,L,1,d)
    order="hv": horizontal (L,C,1,d)，vertical (F,L,d,1)
    bias_v 始终是中间阶段（长度 L）的偏置，bias_h 是输出阶段（长度 F）的偏置。
    """
    vertical: np.ndarray
    horizontal: np.ndarray
    bias_v: np.ndarray
    bias_h: np.ndarray
    nonlinearity: Nonlinearity = Nonlinearity.RELU
    stride: Union[int, Pair] = 1
    padding: Union[int, Pair] = 0
    order: str = "vh"

    def __post_init__(self):
        self.vertical = np.asarray(self.vertical, dtype=np.float32)
        self.horizontal = np.asarray(self.horizontal, dtype=np.float32)
        self.bias_v = np.asarray(self.bias_v, dtype=np.float32).reshape(-1)
        self.bias_h = np.asarray(self.bias_h, dtype=np.float32).reshape(-1)
        self.nonlinearity = Nonlinearity(self.nonlinearity)
        self.stride = tc._pair(self.stride, "stride")
        self.padding = tc._pair(self.padding, "padding")
        if self.order not in ORDERS:
            raise ConfigurationError(f"未知的阶段顺序: {self.order}")
        if self.vertical.ndim != 4 or self.horizontal.ndim != 4:
            raise DimensionError("分解层的两个卷积核都必须是4维")
        if self.vertical.shape[3] != 1 or self.horizontal.shape[2] != 1:
            raise DimensionError(
                f"垂直核需为 (·,·,d,1)，水平核需为 (·,·,1,d)，实际 {self.vertical.shape} / {self.horizontal.shape}"
            )
        first, second = (self.vertical, self.horizontal) if self.order == "vh" else (self.horizontal, self.vertical)
        if second.shape[1] != first.shape[0]:
            raise DimensionError(
                f"中间通道不一致: 第一阶段输出 {first.shape[0]}，第二阶段输入 {second.shape[1]}"
            )
        if self.bias_v.shape[0] != first.shape[0]:
            raise DimensionError(f"bias_v 长度 {self.bias_v.shape[0]} 与 L={first.shape[0]} 不一致")
        if self.bias_h.shape[0] != second.shape[0]:
            raise DimensionError(f"bias_h 长度 {self.bias_h.shape[0]} 与 F={second.shape[0]} 不一致")

    @property
    def L(self) -> int:
        return self.bias_v.shape[0]

    @property
    def C(self) -> int:
        first = self.vertical if self.order == "vh" else self.horizontal
        return first.shape[1]

    @property
    def F(self) -> int:
        return self.bias_h.shape[0]

    @property
    def kernel_size(self) -> Pair:
        """(d_v, d_h)"""
        return self.vertical.shape[2], self.horizontal.shape[3]

    def stages(self) -> Tuple[KernelBank2D, KernelBank2D]:
        """两个阶段的卷积核，与本层共享数组"""
        s_h, s_w = self.stride
        p_h, p_w = self.padding
        vertical_geom = {"stride": (s_h, 1), "padding": (p_h, 0)}
        horizontal_geom = {"stride": (1, s_w), "padding": (0, p_w)}
        if self.order == "vh":
            return (KernelBank2D(self.vertical, self.bias_v, **vertical_geom),
                    KernelBank2D(self.horizontal, self.bias_h, **horizontal_geom))
        return (KernelBank2D(self.horizontal, self.bias_v, **horizontal_geom),
                KernelBank2D(self.vertical, self.bias_h, **vertical_geom))


class DecomposedCache(NamedTuple):
    z1: np.ndarray
    a1: np.ndarray
    z2: np.ndarray


class DecomposedGrads(NamedTuple):
    vertical: np.ndarray
    horizontal: np.ndarray
    bias_v: np.ndarray
    bias_h: np.ndarray


def decomposed_forward(input: Tensor, layer: DecomposedLayer):
    """返回 (输出, 中间结果缓存)"""
    first, second = layer.stages()
    z1 = tc.conv2d(input, first)
    a1 = activate(z1, layer.nonlinearity)
    z2 = tc.conv2d(a1, second)
    return activate(z2, layer.nonlinearity), DecomposedCache(z1, a1, z2)


def decomposed_backward(input: Tensor, layer: DecomposedLayer, cache: DecomposedCache, grad_out: Tensor):
    """返回 (grad_input, DecomposedGrads)"""
    if np.shape(grad_out) != cache.z2.shape:
        raise DimensionError(f"grad_out 形状 {np.shape(grad_out)} 与输出 {cache.z2.shape} 不一致")
    first, second = layer.stages()
    g2 = activate_backward(cache.z2, grad_out, layer.nonlinearity)
    g_a1, g_w2, g_b2 = tc.conv2d_backward(cache.a1, second, g2)
    g1 = activate_backward(cache.z1, g_a1, layer.nonlinearity)
    g_x, g_w1, g_b1 = tc.conv2d_backward(input, first, g1)
    if layer.order == "vh":
        return g_x, DecomposedGrads(g_w1, g_w2, g_b1, g_b2)
    return g_x, DecomposedGrads(g_w2, g_w1, g_b1, g_b2)


@dataclass(frozen=True)
class LayerSpec:
    """单层描述；out_channels 对 linear 表示输出单元数"""
    kind: str
    in_channels: Optional[int] = None
    out_channels: Optional[int] = None
    kernel: Optional[int] = None
    stride: int = 1
    pad: int = 0
    L: Optional[int] = None
    nl: str = "relu"
    order: str = "vh"
    inner_bn: bool = False

    def validate(self, where: str = "") -> None:
        prefix = f"{where}: " if where else ""
        if self.kind not in LAYER_KINDS:
            raise ValidationError(f"{prefix}未知层类型 {self.kind}")
        required = {
            "conv2d": ("in_channels", "out_channels", "kernel"),
            "decomposed": ("in_channels", "out_channels", "kernel", "L"),
            "maxpool": ("kernel",),
            "linear": ("out_channels",),
        }.get(self.kind, ())
        for field_name in required:
            value = getattr(self, field_name)
            if value is None or value < 1:
                raise ValidationError(f"{prefix}{self.kind} 的 {field_name} 必须为正整数，实际 {value}")
        if self.stride < 1 or self.pad < 0:
            raise ValidationError(f"{prefix}stride 必须为正且 pad 不能为负")
        if self.nl not in NONLINEARITIES:
            raise ValidationError(f"{prefix}未知非线性 {self.nl}")
        if self.order not in ORDERS:
            raise ValidationError(f"{prefix}未知阶段顺序 {self.order}")


def param_count(obj) -> int:
    """可学习参数数目（不含BN滑动统计）"""
    if isinstance(obj, DecomposedLayer):
        d_v, d_h = obj.kernel_size
        first_len, second_len = (d_v, d_h) if obj.order == "vh" else (d_h, d_v)
        return obj.L * obj.C * first_len + obj.L + obj.F * obj.L * second_len + obj.F
    if isinstance(obj, KernelBank2D):
        return int(obj.weights.size + obj.bias.size)
    if isinstance(obj, Layer):
        return int(sum(p.size for p in obj.params.values()))
    if isinstance(obj, LayerSpec):
        if obj.kind == "conv2d":
            return obj.in_channels * obj.out_channels * obj.kernel ** 2 + obj.out_channels
        if obj.kind == "decomposed":
            count = obj.L * obj.in_channels * obj.kernel + obj.L + obj.out_channels * obj.L * obj.kernel + obj.out_channels
            return count + (2 * obj.L if obj.inner_bn else 0)
        if obj.kind == "linear":
            return obj.in_channels * obj.out_channels + obj.out_channels
        if obj.kind == "batchnorm":
            return 2 * obj.in_channels
        return 0
    raise TypeError(f"无法统计参数: {type(obj).__name__}")


class Layer(ABC):
    """可训练层基类；只有训练模式的前向才缓存反向所需数据"""
    kind = ""

    def __init__(self, name: str):
        self.name = name
        self.params: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}
        self.buffers: Dict[str, np.ndarray] = {}
        self.defer_stats = False
        self._cache = None

    @abstractmethod
    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        ...

    @abstractmethod
    def backward(self, grad: Tensor) -> Tensor:
        ...

    def _require_cache(self):
        if self._cache is None:
            raise SemanticError(f"层 {self.name} 没有训练模式的前向缓存，无法反向")
        return self._cache

    def state_tensors(self) -> List[Tuple[str, np.ndarray]]:
        """按固定顺序列出需要持久化的张量"""
        return list(self.params.items()) + list(self.buffers.items())

    def pending_stats(self) -> List[Tuple[tc.BatchNormState, np.ndarray, np.ndarray]]:
        """延迟更新模式下最近一次前向的批统计"""
        return []

    def zero_grads(self) -> None:
        self.grads = {}

    def replicate(self) -> "Layer":
        """共享参数，私有缓存与梯度"""
        clone = copy.copy(self)
        clone.grads = {}
        clone._cache = None
        clone.defer_stats = True
        return clone

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.name})"


class Conv2D(Layer):
    kind = "conv2d"

    def __init__(self, name: str, bank: KernelBank2D):
        super().__init__(name)
        self.bank = bank
        self.params = {"weight": bank.weights, "bias": bank.bias}

    def forward(self, x, train=False):
        out = tc.conv2d(x, self.bank)
        self._cache = np.asarray(x, dtype=np.float32) if train else None
        return out

    def backward(self, grad):
        x = self._require_cache()
        g_x, g_w, g_b = tc.conv2d_backward(x, self.bank, grad)
        self.grads = {"weight": g_w, "bias": g_b}
        return g_x


class Decomposed(Layer):
    kind = "decomposed"

    def __init__(self, name: str, layer: DecomposedLayer, inner_bn: bool = False):
        super().__init__(name)
        self.layer = layer
        self.params = {
            "vertical": layer.vertical,
            "horizontal": layer.horizontal,
            "bias_v": layer.bias_v,
            "bias_h": layer.bias_h,
        }
        self.bn_state: Optional[tc.BatchNormState] = None
        if inner_bn:
            self.bn_state = tc.BatchNormState.create(layer.L)
            self.params["bn_gamma"] = np.ones(layer.L, dtype=np.float32)
            self.params["bn_beta"] = np.zeros(layer.L, dtype=np.float32)
            self.buffers = {
                "bn_running_mean": self.bn_state.running_mean,
                "bn_running_var": self.bn_state.running_var,
            }
        self._stats = []

    def forward(self, x, train=False):
        if self.bn_state is None:
            out, cache = decomposed_forward(x, self.layer)
            self._cache = (np.asarray(x, dtype=np.float32), cache, None) if train else None
            return out

        # 中间阶段之后插入批归一化
        first, second = self.layer.stages()
        nl = self.layer.nonlinearity
        z1 = tc.conv2d(x, first)
        b1, bn_cache = tc.batchnorm(
            z1, self.params["bn_gamma"], self.params["bn_beta"], self.bn_state,
            mode="train" if train else "infer", update_stats=train and not self.defer_stats,
        )
        if train and self.defer_stats:
            self._stats = [(self.bn_state, bn_cache.batch_mean, bn_cache.batch_var)]
        a1 = activate(b1, nl)
        z2 = tc.conv2d(a1, second)
        self._cache = (np.asarray(x, dtype=np.float32), DecomposedCache(b1, a1, z2), bn_cache) if train else None
        return activate(z2, nl)

    def backward(self, grad):
        x, cache, bn_cache = self._require_cache()
        if bn_cache is None:
            g_x, grads = decomposed_backward(x, self.layer, cache, grad)
            self.grads = grads._asdict()
            return g_x

        first, second = self.layer.stages()
        nl = self.layer.nonlinearity
        g2 = activate_backward(cache.z2, grad, nl)
        g_a1, g_w2, g_b2 = tc.conv2d_backward(cache.a1, second, g2)
        g_b1_out = activate_backward(cache.z1, g_a1, nl)
        g_z1, g_gamma, g_beta = tc.batchnorm_backward(bn_cache, g_b1_out)
        g_x, g_w1, g_b1 = tc.conv2d_backward(x, first, g_z1)
        g_vertical, g_horizontal = (g_w1, g_w2) if self.layer.order == "vh" else (g_w2, g_w1)
        self.grads = {
            "vertical": g_vertical,
            "horizontal": g_horizontal,
            "bias_v": g_b1,
            "bias_h": g_b2,
            "bn_gamma": g_gamma,
            "bn_beta": g_beta,
        }
        return g_x

    def pending_stats(self):
        return list(self._stats)

    def replicate(self):
        clone = super().replicate()
        clone._stats = []
        return clone


class BatchNorm(Layer):
    kind = "batchnorm"

    def __init__(self, name: str, channels: int):
        super().__init__(name)
        self.state = tc.BatchNormState.create(channels)
        self.params = {
            "gamma": np.ones(channels, dtype=np.float32),
            "beta": np.zeros(channels, dtype=np.float32),
        }
        self.buffers = {"running_mean": self.state.running_mean, "running_var": self.state.running_var}
        self._stats = []

    def forward(self, x, train=False):
        out, cache = tc.batchnorm(
            x, self.params["gamma"], self.params["beta"], self.state,
            mode="train" if train else "infer", update_stats=train and not self.defer_stats,
        )
        if train and self.defer_stats:
            self._stats = [(self.state, cache.batch_mean, cache.batch_var)]
        self._cache = cache if train else None
        return out

    def backward(self, grad):
        g_x, g_gamma, g_beta = tc.batchnorm_backward(self._require_cache(), grad)
        self.grads = {"gamma": g_gamma, "beta": g_beta}
        return g_x

    def pending_stats(self):
        return list(self._stats)

    def replicate(self):
        clone = super().replicate()
        clone._stats = []
        return clone


class Linear(Layer):
    kind = "linear"

    def __init__(self, name: str, weight: np.ndarray, bias: np.ndarray):
        super().__init__(name)
        self.params = {
            "weight": np.asarray(weight, dtype=np.float32),
            "bias": np.asarray(bias, dtype=np.float32),
        }

    def forward(self, x, train=False):
        out = tc.linear(x, self.params["weight"], self.params["bias"])
        self._cache = np.asarray(x, dtype=np.float32) if train else None
        return out

    def backward(self, grad):
        x = self._require_cache()
        g_x, g_w, g_b = tc.linear_backward(x, self.params["weight"], grad)
        self.grads = {"weight": g_w, "bias": g_b}
        return g_x


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=False):
        self._cache = np.asarray(x, dtype=np.float32) if train else None
        return tc.relu(x)

    def backward(self, grad):
        return tc.relu_backward(self._require_cache(), grad)


class Tanh(Layer):
    kind = "tanh"

    def forward(self, x, train=False):
        self._cache = np.asarray(x, dtype=np.float32) if train else None
        return tc.tanh(x)

    def backward(self, grad):
        return tc.tanh_backward(self._require_cache(), grad)


class MaxPool(Layer):
    kind = "maxpool"

    def __init__(self, name: str, window: int, stride: int):
        super().__init__(name)
        self.window = window
        self.stride = stride

    def forward(self, x, train=False):
        out, argmax = tc.maxpool(x, self.window, self.stride)
        self._cache = (np.shape(x), argmax) if train else None
        return out

    def backward(self, grad):
        shape, argmax = self._require_cache()
        return tc.maxpool_backward(np.empty(shape, dtype=np.float32), argmax, grad, self.window, self.stride)


class GlobalAvgPool(Layer):
    kind = "avgpool_global"

    def forward(self, x, train=False):
        self._cache = np.shape(x) if train else None
        return tc.global_avgpool(x)

    def backward(self, grad):
        shape = self._require_cache()
        return tc.global_avgpool_backward(np.empty(shape, dtype=np.float32), grad)
