"""模型描述、实例化与结构变换

ModelSpec 只描述卷积主干，分类头由 head/hidden 在 expand_layers 中展开。
"""
from dataclasses import dataclass, replace
from typing import Dict, Iterable, List, Mapping, Sequence, Tuple, Union
import copy
import json
import logging

import numpy as np

from config import ModelConfig
from presets import PRESET_NAMES, get_preset
from .decompose import build_decomposed_pair
from .exceptions import ConfigurationError, InputError, SpecParseError, ValidationError
from .layers import (
    LAYER_KINDS, NONLINEARITIES, ORDERS,
    BatchNorm, Conv2D, Decomposed, DecomposedLayer, GlobalAvgPool, Layer, LayerSpec,
    Linear, MaxPool, Nonlinearity, ReLU, Tanh,
)
from .tensor_core import KernelBank2D, Tensor, conv_output_size

logger = logging.getLogger(__name__)

HEADS = ("full", "compact", "compact_avg")
Shape = Tuple[int, int, int]

# 文档字段 -> LayerSpec 字段
_DOC_FIELDS = {
    "in": "in_channels", "out": "out_channels", "k": "kernel", "stride": "stride",
    "pad": "pad", "L": "L", "nl": "nl", "order": "order", "inner_bn": "inner_bn",
}
_LAYER_SCHEMA = {
    "conv2d": (("in", "out", "k"), ("stride", "pad")),
    "decomposed": (("in", "L", "out", "k"), ("nl", "stride", "pad", "order", "inner_bn")),
    "maxpool": (("k",), ("stride",)),
    "linear": (("out",), ()),
    "batchnorm": ((), ()),
    "relu": ((), ()),
    "tanh": ((), ()),
    "avgpool_global": ((), ()),
}
_CANONICAL_KEYS = {
    "conv2d": ("in", "out", "k", "stride", "pad"),
    "decomposed": ("in", "L", "out", "k", "stride", "pad", "nl", "order", "inner_bn"),
    "maxpool": ("k", "stride"),
    "linear": ("out",),
}
_TOP_REQUIRED = ("name", "input_shape", "num_classes", "layers")
_TOP_OPTIONAL = ("head", "hidden")


@dataclass(frozen=True)
class ModelSpec:
    name: str
    input_shape: Shape
    num_classes: int
    layers: Tuple[LayerSpec, ...]
    head: str = "full"
    hidden: Tuple[int, ...] = ModelConfig.DEFAULT_HIDDEN


def _head_layers(spec: ModelSpec) -> List[LayerSpec]:
    if spec.head == "full":
        layers = []
        for units in spec.hidden:
            layers += [LayerSpec("linear", out_channels=units), LayerSpec("relu")]
        return layers + [LayerSpec("linear", out_channels=spec.num_classes)]
    if spec.head == "compact":
        return [LayerSpec("linear", out_channels=spec.num_classes)]
    return [LayerSpec("avgpool_global"), LayerSpec("linear", out_channels=spec.num_classes)]


def _resolve(layers: Sequence[LayerSpec], input_shape: Shape) -> Tuple[List[LayerSpec], List[Shape]]:
    """逐层推断形状，补全 batchnorm/linear 的输入尺寸"""
    resolved, shapes = [], []
    c, h, w = input_shape
    for index, layer in enumerate(layers):
        where = f"layers[{index}]"
        layer.validate(where)
        try:
            if layer.kind in ("conv2d", "decomposed"):
                if layer.in_channels != c:
                    raise ValidationError(f"{where}: 输入通道 {layer.in_channels} 与上一层输出 {c} 不一致")
                h = conv_output_size(h, layer.kernel, layer.stride, layer.pad, "H")
                w = conv_output_size(w, layer.kernel, layer.stride, layer.pad, "W")
                c = layer.out_channels
            elif layer.kind == "maxpool":
                h = conv_output_size(h, layer.kernel, layer.stride, 0, "H")
                w = conv_output_size(w, layer.kernel, layer.stride, 0, "W")
            elif layer.kind == "batchnorm":
                layer = replace(layer, in_channels=c)
            elif layer.kind == "linear":
                layer = replace(layer, in_channels=c * h * w)
                c, h, w = layer.out_channels, 1, 1
            elif layer.kind == "avgpool_global":
                h, w = 1, 1
        except ConfigurationError as e:
            raise ValidationError(f"{where}: {e}") from e
        resolved.append(layer)
        shapes.append((c, h, w))
    return resolved, shapes


def _check(spec: ModelSpec) -> ModelSpec:
    if not spec.layers:
        raise ValidationError("layers 不能为空")
    if spec.head not in HEADS:
        raise ValidationError(f"未知分类头 {spec.head}")
    if len(spec.input_shape) != 3 or min(spec.input_shape) < 1:
        raise ValidationError(f"input_shape 需要三个正整数: {spec.input_shape}")
    if spec.num_classes < 1 or any(u < 1 for u in spec.hidden):
        raise ValidationError("num_classes 与 hidden 必须为正整数")
    _resolve(list(spec.layers) + _head_layers(spec), spec.input_shape)
    return spec


def expand_layers(spec: ModelSpec) -> List[LayerSpec]:
    """主干 + 分类头，输入尺寸已补全"""
    return _resolve(list(spec.layers) + _head_layers(spec), spec.input_shape)[0]


def infer_shapes(spec: ModelSpec) -> List[Shape]:
    """expand_layers 每层的输出形状 (C, H, W)"""
    return _resolve(list(spec.layers) + _head_layers(spec), spec.input_shape)[1]


# ---------------------------------------------------------------- 文档解析

def _int_field(value, pointer: str, minimum: int = 1) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise SpecParseError(f"需要整数，实际 {value!r}", pointer)
    if value < minimum:
        raise SpecParseError(f"需要 ≥ {minimum} 的整数，实际 {value}", pointer)
    return value


def _layer_from_doc(doc, pointer: str) -> LayerSpec:
    if not isinstance(doc, dict):
        raise SpecParseError("层描述必须是对象", pointer)
    kind = doc.get("kind")
    if kind not in LAYER_KINDS:
        raise SpecParseError(f"未知层类型 {kind!r}", f"{pointer}/kind")
    required, optional = _LAYER_SCHEMA[kind]
    for key in doc:
        if key != "kind" and key not in required and key not in optional:
            raise SpecParseError(f"未知字段 {key!r}", f"{pointer}/{key}")
    for key in required:
        if key not in doc:
            raise SpecParseError(f"缺少必填字段 {key!r}", f"{pointer}/{key}")

    fields = {}
    for key, value in doc.items():
        if key == "kind":
            continue
        where = f"{pointer}/{key}"
        if key == "nl":
            if value not in NONLINEARITIES:
                raise SpecParseError(f"非线性必须是 {NONLINEARITIES} 之一", where)
        elif key == "order":
            if value not in ORDERS:
                raise SpecParseError(f"阶段顺序必须是 {ORDERS} 之一", where)
        elif key == "inner_bn":
            if not isinstance(value, bool):
                raise SpecParseError("inner_bn 需要布尔值", where)
        else:
            value = _int_field(value, where, minimum=0 if key == "pad" else 1)
        fields[_DOC_FIELDS[key]] = value

    if kind == "maxpool" and "stride" not in fields:
        fields["stride"] = fields["kernel"]
    return LayerSpec(kind=kind, **fields)


def spec_from_dict(doc) -> ModelSpec:
    """从已解码的JSON对象构造并校验 ModelSpec"""
    if not isinstance(doc, dict):
        raise SpecParseError("模型描述必须是JSON对象")
    for key in doc:
        if key not in _TOP_REQUIRED and key not in _TOP_OPTIONAL:
            raise SpecParseError(f"未知字段 {key!r}", f"/{key}")
    for key in _TOP_REQUIRED:
        if key not in doc:
            raise SpecParseError(f"缺少必填字段 {key!r}", f"/{key}")

    if not isinstance(doc["name"], str) or not doc["name"]:
        raise SpecParseError("name 需要非空字符串", "/name")
    shape = doc["input_shape"]
    if not isinstance(shape, list) or len(shape) != 3:
        raise SpecParseError("input_shape 需要 [C, H, W]", "/input_shape")
    shape = tuple(_int_field(v, f"/input_shape/{i}") for i, v in enumerate(shape))
    num_classes = _int_field(doc["num_classes"], "/num_classes")
    head = doc.get("head", "full")
    if head not in HEADS:
        raise SpecParseError(f"head 必须是 {HEADS} 之一", "/head")
    hidden = doc.get("hidden", list(ModelConfig.DEFAULT_HIDDEN))
    if not isinstance(hidden, list):
        raise SpecParseError("hidden 需要整数数组", "/hidden")
    hidden = tuple(_int_field(v, f"/hidden/{i}") for i, v in enumerate(hidden))
    if not isinstance(doc["layers"], list):
        raise SpecParseError("layers 需要数组", "/layers")
    layers = tuple(_layer_from_doc(d, f"/layers/{i}") for i, d in enumerate(doc["layers"]))

    return _check(ModelSpec(doc["name"], shape, num_classes, layers, head, hidden))


def parse_model_spec(text: Union[str, bytes]) -> ModelSpec:
    """解析模型描述文档；内置名称直接解析为预设"""
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as e:
            raise SpecParseError(f"文档不是合法的UTF-8: {e}") from e
    name = text.strip()
    if name in PRESET_NAMES:
        return spec_from_dict(get_preset(name))
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise SpecParseError(f"JSON语法错误: {e.msg} (行 {e.lineno} 列 {e.colno})") from e
    return spec_from_dict(doc)


def spec_to_dict(spec: ModelSpec) -> Dict:
    layers = []
    for layer in spec.layers:
        doc = {"kind": layer.kind}
        for key in _CANONICAL_KEYS.get(layer.kind, ()):
            doc[key] = getattr(layer, _DOC_FIELDS[key])
        layers.append(doc)
    return {
        "name": spec.name,
        "input_shape": list(spec.input_shape),
        "num_classes": spec.num_classes,
        "head": spec.head,
        "hidden": list(spec.hidden),
        "layers": layers,
    }


def serialize_model_spec(spec: ModelSpec) -> str:
    """规范化JSON：固定字段顺序，写出全部默认值"""
    return json.dumps(spec_to_dict(spec), indent=2, ensure_ascii=False) + "\n"


def load_model_spec(source: str) -> ModelSpec:
    """内置名称或JSON文件路径"""
    if source in PRESET_NAMES:
        return parse_model_spec(source)
    with open(source, "rb") as f:
        return parse_model_spec(f.read())


# ---------------------------------------------------------------- 实例化

def init_weights(shape, fan_in: int, fan_out: int, scheme: str, rng: np.random.Generator) -> np.ndarray:
    if scheme == "xavier":
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=shape).astype(np.float32)
    if scheme == "kaiming":
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(np.float32)
    raise InputError(f"未知初始化方案 {scheme}，可选 {ModelConfig.INIT_SCHEMES}")


def build_layer(layer: LayerSpec, index: int, rng: np.random.Generator, scheme: str) -> Layer:
    name = f"{index}.{layer.kind}"
    if layer.kind == "conv2d":
        c, f, k = layer.in_channels, layer.out_channels, layer.kernel
        weights = init_weights((f, c, k, k), c * k * k, f * k * k, scheme, rng)
        bank = KernelBank2D(weights, np.zeros(f, dtype=np.float32), layer.stride, layer.pad)
        return Conv2D(name, bank)
    if layer.kind == "decomposed":
        c, n, f, k = layer.in_channels, layer.L, layer.out_channels, layer.kernel
        first = init_weights((n, c, k), c * k, n * k, scheme, rng)
        second = init_weights((f, n, k), n * k, f * k, scheme, rng)
        if layer.order == "vh":
            vertical, horizontal = first.reshape(n, c, k, 1), second.reshape(f, n, 1, k)
        else:
            horizontal, vertical = first.reshape(n, c, 1, k), second.reshape(f, n, k, 1)
        dec = DecomposedLayer(
            vertical, horizontal, np.zeros(n, dtype=np.float32), np.zeros(f, dtype=np.float32),
            nonlinearity=Nonlinearity(layer.nl), stride=layer.stride, padding=layer.pad, order=layer.order,
        )
        return Decomposed(name, dec, inner_bn=layer.inner_bn)
    if layer.kind == "linear":
        weight = init_weights((layer.out_channels, layer.in_channels), layer.in_channels,
                              layer.out_channels, scheme, rng)
        return Linear(name, weight, np.zeros(layer.out_channels, dtype=np.float32))
    if layer.kind == "batchnorm":
        return BatchNorm(name, layer.in_channels)
    if layer.kind == "maxpool":
        return MaxPool(name, layer.kernel, layer.stride)
    if layer.kind == "relu":
        return ReLU(name)
    if layer.kind == "tanh":
        return Tanh(name)
    return GlobalAvgPool(name)


class Model:
    """按 ModelSpec 实例化的网络"""

    def __init__(self, spec: ModelSpec, layers: List[Layer], rng_seed: int = 0,
                 scheme: str = ModelConfig.DEFAULT_INIT):
        self.spec = spec
        self.layers = layers
        self.rng_seed = rng_seed
        self.scheme = scheme

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        out = x
        for layer in self.layers:
            out = layer.forward(out, train=train)
        return out

    def backward(self, grad: Tensor) -> Tensor:
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def named_parameters(self) -> Dict[str, np.ndarray]:
        return {f"{layer.name}.{key}": value for layer in self.layers for key, value in layer.params.items()}

    def named_gradients(self) -> Dict[str, np.ndarray]:
        return {f"{layer.name}.{key}": value for layer in self.layers for key, value in layer.grads.items()}

    def named_buffers(self) -> Dict[str, np.ndarray]:
        return {f"{layer.name}.{key}": value for layer in self.layers for key, value in layer.buffers.items()}

    def persistent_layers(self) -> List[Layer]:
        return [layer for layer in self.layers if layer.params or layer.buffers]

    def param_count(self) -> int:
        return int(sum(p.size for p in self.named_parameters().values()))

    def replicate(self) -> "Model":
        """共享参数的副本，前向缓存与梯度各自独立"""
        return Model(self.spec, [layer.replicate() for layer in self.layers], self.rng_seed, self.scheme)

    def __repr__(self) -> str:
        return f"Model({self.spec.name}, {len(self.layers)} layers)"


def instantiate(spec: ModelSpec, scheme: str = ModelConfig.DEFAULT_INIT, seed: int = 0) -> Model:
    """相同 (spec, scheme, seed) 得到逐位相同的参数"""
    if scheme not in ModelConfig.INIT_SCHEMES:
        raise InputError(f"未知初始化方案 {scheme}，可选 {ModelConfig.INIT_SCHEMES}")
    rng = np.random.default_rng(seed)
    layers = [build_layer(layer, index, rng, scheme) for index, layer in enumerate(expand_layers(spec))]
    model = Model(spec, layers, seed, scheme)
    logger.debug(f"实例化 {spec.name}: {model.param_count()} 个参数 ({scheme}, seed={seed})")
    return model


# ---------------------------------------------------------------- 结构变换

def decompose_model(spec: ModelSpec, indices: Iterable[int],
                    policy: Union[str, Mapping[int, int]] = "match_output",
                    nl: str = "relu", order: str = "vh") -> ModelSpec:
    """把选中的 conv2d 层换成分解层；match_output 取 L = F"""
    indices = sorted(set(indices))
    if not indices:
        return spec
    layers = list(spec.layers)
    for index in indices:
        if not 0 <= index < len(layers):
            raise InputError(f"层下标 {index} 超出范围 [0, {len(layers)})")
        layer = layers[index]
        if layer.kind != "conv2d":
            raise InputError(f"层 {index} 是 {layer.kind}，只能分解 conv2d")
        if policy == "match_output":
            rank = layer.out_channels
        elif isinstance(policy, Mapping):
            if index not in policy:
                raise InputError(f"显式 L 策略缺少层 {index}")
            rank = int(policy[index])
        else:
            raise InputError(f"未知 L 策略 {policy!r}")
        layers[index] = replace(layer, kind="decomposed", L=rank, nl=nl, order=order)
    name = f"{spec.name}-dec{len(indices)}"
    return _check(replace(spec, name=name, layers=tuple(layers)))


def convert_model(model: Model, indices: Iterable[int], rank: Union[str, int] = "full") -> Model:
    """把已训练模型的 conv2d 层转换为 identity 分解层，其余层复制"""
    converted = copy.deepcopy(model)
    indices = sorted(set(indices))
    layers = list(converted.spec.layers)
    for index in indices:
        if not 0 <= index < len(layers) or layers[index].kind != "conv2d":
            raise InputError(f"层 {index} 不是可转换的 conv2d")
        conv = converted.layers[index]
        ranks = None if rank == "full" else int(rank)
        dec = build_decomposed_pair(conv.bank, ranks=ranks, nonlinearity=Nonlinearity.IDENTITY)
        layers[index] = replace(layers[index], kind="decomposed", L=dec.L, nl="identity", order="vh")
        converted.layers[index] = Decomposed(conv.name.replace("conv2d", "decomposed"), dec)
    converted.spec = _check(replace(converted.spec, layers=tuple(layers)))
    return converted


def fuse_consecutive(spec: ModelSpec, group: Tuple[int, int]) -> ModelSpec:
    """把连续的步长1卷积组（可夹 relu）合并为一个大核分解层"""
    start, end = group
    layers = list(spec.layers)
    if not 0 <= start <= end < len(layers):
        raise InputError(f"层组 {start}-{end} 超出范围 [0, {len(layers)})")
    members = layers[start:end + 1]
    if members[0].kind != "conv2d" or members[-1].kind != "conv2d":
        raise InputError(f"层组 {start}-{end} 必须以 conv2d 开始和结束")
    for offset, layer in enumerate(members):
        if layer.kind not in ("conv2d", "relu"):
            raise InputError(f"层 {start + offset} 是 {layer.kind}，层组只能包含 conv2d 与 relu")
    convs = [layer for layer in members if layer.kind == "conv2d"]
    if any(layer.stride != 1 for layer in convs):
        raise InputError(f"层组 {start}-{end} 含有步长不为1的卷积")
    for prev, cur in zip(convs, convs[1:]):
        if cur.in_channels != prev.out_channels:
            raise InputError("层组内通道不连续")

    fused = LayerSpec(
        kind="decomposed",
        in_channels=convs[0].in_channels,
        out_channels=convs[-1].out_channels,
        L=convs[-1].out_channels,
        kernel=sum(layer.kernel - 1 for layer in convs) + 1,
        stride=1,
        pad=sum(layer.pad for layer in convs),
        nl="relu",
    )
    layers[start:end + 1] = [fused]
    return _check(replace(spec, layers=tuple(layers)))


def fuse_groups(spec: ModelSpec, groups: Sequence[Tuple[int, int]]) -> ModelSpec:
    """多个互不重叠的层组，从后往前合并使下标保持有效"""
    ordered = sorted(groups, key=lambda g: g[0])
    for (_, prev_end), (next_start, _) in zip(ordered, ordered[1:]):
        if next_start <= prev_end:
            raise InputError(f"层组重叠: {ordered}")
    for group in reversed(ordered):
        spec = fuse_consecutive(spec, group)
    if ordered:
        spec = replace(spec, name=f"{spec.name}-fused{len(ordered)}")
    return spec


def receptive_field(spec: ModelSpec, index: int) -> int:
    """到第 index 层（含）为止的输入感受野边长"""
    layers = expand_layers(spec)
    if not 0 <= index < len(layers):
        raise InputError(f"层下标 {index} 超出范围 [0, {len(layers)})")
    field, jump = 1, 1
    for layer in layers[:index + 1]:
        if layer.kind in ("conv2d", "decomposed", "maxpool"):
            # 分解层的两个一维阶段各覆盖一个轴，范围相同
            field += (layer.kernel - 1) * jump
            jump *= layer.stride
        elif layer.kind in ("linear", "avgpool_global"):
            field = max(spec.input_shape[1], spec.input_shape[2])
    return field


def with_head(spec: ModelSpec, head: str) -> ModelSpec:
    """替换分类头类型"""
    if head == spec.head:
        return spec
    if head not in HEADS:
        raise InputError(f"未知分类头 {head}，可选 {HEADS}")
    return _check(replace(spec, head=head))
