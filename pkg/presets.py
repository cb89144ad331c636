from typing import Dict, List
import copy

# 层文档构造
def _conv(c: int, f: int, k: int, stride: int = 1, pad: int = 0) -> Dict:
    return {"kind": "conv2d", "in": c, "out": f, "k": k, "stride": stride, "pad": pad}

def _dec(c: int, L: int, f: int, k: int, nl: str = "relu", pad: int = 0, order: str = "vh") -> Dict:
    return {"kind": "decomposed", "in": c, "L": L, "out": f, "k": k, "stride": 1, "pad": pad,
            "nl": nl, "order": order, "inner_bn": False}

def _pool(k: int = 2, stride: int = 2) -> Dict:
    return {"kind": "maxpool", "k": k, "stride": stride}

def _act(kind: str = "relu") -> Dict:
    return {"kind": kind}

def _model(name: str, input_shape, num_classes: int, layers: List[Dict], hidden, head: str = "full") -> Dict:
    return {
        "name": name,
        "input_shape": list(input_shape),
        "num_classes": num_classes,
        "head": head,
        "hidden": list(hidden),
        "layers": layers,
    }

# LeNet: 两个5×5卷积 + tanh + 池化，全连接头一个500单元隐藏层
LENET = _model("lenet", (1, 28, 28), 10, [
    _conv(1, 20, 5), _act("tanh"), _pool(),
    _conv(20, 50, 5), _act("tanh"), _pool(),
], hidden=(500,))

LENET_K9 = _model("lenet-k9", (1, 28, 28), 10, [
    _conv(1, 20, 9, pad=2), _act("tanh"), _pool(),
    _conv(20, 50, 9, pad=2), _act("tanh"), _pool(),
], hidden=(500,))

LENET_DEC1 = _model("lenet-dec1", (1, 28, 28), 10, [
    _dec(1, 20, 20, 5), _pool(),
    _conv(20, 50, 5), _act("tanh"), _pool(),
], hidden=(500,))

LENET_DEC2 = _model("lenet-dec2", (1, 28, 28), 10, [
    _dec(1, 10, 20, 5), _pool(),
    _dec(20, 25, 50, 5), _pool(),
], hidden=(500,))

LENET_DEC2K9 = _model("lenet-dec2k9", (1, 28, 28), 10, [
    _dec(1, 10, 20, 9, pad=2), _pool(),
    _dec(20, 25, 50, 9, pad=2), _pool(),
], hidden=(500,))

LENET_DEC1_TANH = _model("lenet-dec1-tanh", (1, 28, 28), 10, [
    _dec(1, 20, 20, 5, nl="tanh"), _pool(),
    _conv(20, 50, 5), _act("tanh"), _pool(),
], hidden=(500,))

LENET_DEC2_TANH = _model("lenet-dec2-tanh", (1, 28, 28), 10, [
    _dec(1, 10, 20, 5, nl="tanh"), _pool(),
    _dec(20, 25, 50, 5, nl="tanh"), _pool(),
], hidden=(500,))

# 两个一维阶段之间不加非线性
LENET_DEC2_NORELU = _model("lenet-dec2-norelu", (1, 28, 28), 10, [
    _dec(1, 10, 20, 5, nl="identity"), _pool(),
    _dec(20, 25, 50, 5, nl="identity"), _pool(),
], hidden=(500,))

# CIFAR-10 quick: 32/32/64 个5×5滤波器，每级 2×2 池化
def _quick_layers(make_stage) -> List[Dict]:
    layers = []
    for index, (c, f) in enumerate([(3, 32), (32, 32), (32, 64)]):
        layers += [make_stage(index, c, f), _act(), _pool()]
    return layers

CIFAR10_QUICK = _model("cifar10-quick", (3, 32, 32), 10,
                       _quick_layers(lambda i, c, f: _conv(c, f, 5, pad=2)), hidden=(64,))

CIFAR10_QUICK_DEC1 = _model("cifar10-quick-dec1", (3, 32, 32), 10, _quick_layers(
    lambda i, c, f: _dec(c, f, f, 5, pad=2) if i == 0 else _conv(c, f, 5, pad=2)), hidden=(64,))

CIFAR10_QUICK_DEC3 = _model("cifar10-quick-dec3", (3, 32, 32), 10,
                            _quick_layers(lambda i, c, f: _dec(c, f, f, 5, pad=2)), hidden=(64,))

CIFAR10_QUICK_DEC3T = _model("cifar10-quick-dec3t", (3, 32, 32), 10,
                             _quick_layers(lambda i, c, f: _dec(c, f, f, 5, pad=2, order="hv")), hidden=(64,))

CIFAR10_QUICK_DEC3_HALF = _model("cifar10-quick-dec3-half", (3, 32, 32), 10,
                                 _quick_layers(lambda i, c, f: _dec(c, f // 2, f, 5, pad=2)), hidden=(64,))

CIFAR10_QUICK5 = _model("cifar10-quick5", (3, 32, 32), 10, [
    _conv(3, 32, 5, pad=2), _act(), _conv(32, 32, 5, pad=2), _act(), _pool(),
    _conv(32, 64, 5, pad=2), _act(), _conv(64, 64, 5, pad=2), _act(), _pool(),
    _conv(64, 64, 5, pad=2), _act(), _pool(),
], hidden=(64,))

# VGG-B: 十个3×3卷积，每两层一次池化
_VGG_WIDTHS = [(3, 64), (64, 64), (64, 128), (128, 128), (128, 256),
               (256, 256), (256, 512), (512, 512), (512, 512), (512, 512)]

def _vgg_layers(decomposed=()) -> List[Dict]:
    layers = []
    for index, (c, f) in enumerate(_VGG_WIDTHS):
        stage = _dec(c, f, f, 3, pad=1) if index in decomposed else _conv(c, f, 3, pad=1)
        layers += [stage, _act()]
        if index % 2 == 1:
            layers.append(_pool())
    return layers

VGG_B = _model("vgg-b", (3, 224, 224), 1000, _vgg_layers(), hidden=(4096, 4096))
VGG_B_COMPACT = _model("vgg-b-compact", (3, 224, 224), 1000, _vgg_layers(),
                       hidden=(4096, 4096), head="compact")
VGG_B_DEC8_COMPACT_AVG = _model("vgg-b-dec8-compact-avg", (3, 224, 224), 1000,
                                _vgg_layers(decomposed=range(2, 10)),
                                hidden=(4096, 4096), head="compact_avg")

# AlexNet（单塔）+ 批归一化
def _alexnet_layers(decomposed=()) -> List[Dict]:
    stages = [  # (c, f, k, stride, pad, pool)
        (3, 64, 11, 4, 0, True),
        (64, 192, 5, 1, 2, True),
        (192, 384, 3, 1, 1, False),
        (384, 256, 3, 1, 1, False),
        (256, 256, 3, 1, 1, True),
    ]
    layers = []
    for index, (c, f, k, stride, pad, pool) in enumerate(stages):
        if index in decomposed:
            layers.append(_dec(c, f, f, k, pad=pad))
        else:
            layers.append(_conv(c, f, k, stride=stride, pad=pad))
        layers += [{"kind": "batchnorm"}, _act()]
        if pool:
            layers.append(_pool(3, 2))
    return layers

ALEXNET_OWTBN = _model("alexnet-owtbn", (3, 227, 227), 1000, _alexnet_layers(), hidden=(4096, 4096))
ALEXNET_OWTBN_COMPACT = _model("alexnet-owtbn-compact", (3, 227, 227), 1000, _alexnet_layers(),
                               hidden=(4096, 4096), head="compact")
ALEXNET_OWTBN_DEC3_COMPACT = _model("alexnet-owtbn-dec3-compact", (3, 227, 227), 1000,
                                    _alexnet_layers(decomposed=(2, 3, 4)),
                                    hidden=(4096, 4096), head="compact")

# 立体匹配特征提取：四个3×3卷积，9×9图像块输出一个特征向量
STEREO_FEATURES = _model("stereo-features", (1, 9, 9), 2, [
    _conv(1, 64, 3), _act(),
    _conv(64, 64, 3), _act(),
    _conv(64, 64, 3), _act(),
    _conv(64, 64, 3), _act(),
], hidden=(), head="compact")

PRESETS = {doc["name"]: doc for doc in [
    LENET, LENET_K9, LENET_DEC1, LENET_DEC2, LENET_DEC2K9,
    LENET_DEC1_TANH, LENET_DEC2_TANH, LENET_DEC2_NORELU,
    CIFAR10_QUICK, CIFAR10_QUICK_DEC1, CIFAR10_QUICK_DEC3, CIFAR10_QUICK_DEC3T,
    CIFAR10_QUICK_DEC3_HALF, CIFAR10_QUICK5,
    VGG_B, VGG_B_COMPACT, VGG_B_DEC8_COMPACT_AVG,
    ALEXNET_OWTBN, ALEXNET_OWTBN_COMPACT, ALEXNET_OWTBN_DEC3_COMPACT,
    STEREO_FEATURES,
]}

PRESET_NAMES = tuple(PRESETS)

def get_preset(name: str) -> Dict:
    """获取内置模型文档（副本）"""
    if name not in PRESETS:
        raise KeyError(name)
    return copy.deepcopy(PRESETS[name])
