"""参数量与乘加次数（MAC）统计"""
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple
import logging
import time

import numpy as np
import pandas as pd

from config import RuntimeConfig
from .exceptions import InputError
from .layers import LayerSpec, param_count
from .model_zoo import Model, ModelSpec, expand_layers
from .tensor_core import conv_output_size

logger = logging.getLogger(__name__)

CSV_COLUMNS = ["layer", "kind", "params", "macs", "out_c", "out_h", "out_w"]


@dataclass
class LayerCost:
    name: str
    kind: str
    params: int
    macs: int
    output_shape: Tuple[int, int, int]
    memory_bytes: int


@dataclass
class CostReport:
    """逐层统计；ConvP 只算卷积与分解层，FCP 只算全连接层"""
    model: str
    rows: List[LayerCost] = field(default_factory=list)
    predicted_speedup: Dict[str, float] = field(default_factory=dict)

    @property
    def conv_params(self) -> int:
        return sum(r.params for r in self.rows if r.kind in ("conv2d", "decomposed"))

    @property
    def fc_params(self) -> int:
        return sum(r.params for r in self.rows if r.kind == "linear")

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.rows)

    @property
    def memory_bytes(self) -> int:
        return sum(r.memory_bytes for r in self.rows)

    def to_frame(self) -> pd.DataFrame:
        records = [
            {"layer": r.name, "kind": r.kind, "params": r.params, "macs": r.macs,
             "out_c": r.output_shape[0], "out_h": r.output_shape[1], "out_w": r.output_shape[2]}
            for r in self.rows
        ]
        return pd.DataFrame.from_records(records, columns=CSV_COLUMNS)

    def to_csv(self) -> str:
        frame = self.to_frame().astype(object)
        blank = dict.fromkeys(CSV_COLUMNS, "")
        totals = pd.DataFrame.from_records([
            {**blank, "layer": "TOTAL_CONVP", "params": self.conv_params},
            {**blank, "layer": "TOTAL_FCP", "params": self.fc_params},
            {**blank, "layer": "TOTAL_MACS", "macs": self.total_macs},
        ], columns=CSV_COLUMNS).astype(object)
        table = pd.concat([frame, totals], ignore_index=True)
        return table.to_csv(index=False, lineterminator="\n")


def predicted_speedup(C: int, F: int, d: int, L: int) -> float:
    """CFd / (L(C+F))"""
    if min(C, F, d, L) < 1:
        raise InputError(f"C, F, d, L 必须为正: {(C, F, d, L)}")
    return C * F * d / (L * (C + F))


def _decomposed_macs(layer: LayerSpec, h: int, w: int) -> Tuple[int, int, int]:
    """返回 (macs, out_h, out_w)，按两个阶段各自的输出尺寸计"""
    k, s, p = layer.kernel, layer.stride, layer.pad
    if layer.order == "vh":
        h1, w1 = conv_output_size(h, k, s, p, "H"), w
        h2, w2 = h1, conv_output_size(w, k, s, p, "W")
    else:
        h1, w1 = h, conv_output_size(w, k, s, p, "W")
        h2, w2 = conv_output_size(h, k, s, p, "H"), w1
    macs = layer.in_channels * layer.L * k * h1 * w1 + layer.L * layer.out_channels * k * h2 * w2
    return macs, h2, w2


def count_macs(spec: ModelSpec, input_shape: Optional[Tuple[int, int, int]] = None) -> CostReport:
    """逐层参数量与乘加次数"""
    if input_shape is not None and tuple(input_shape) != tuple(spec.input_shape):
        spec = replace(spec, input_shape=tuple(input_shape))
    c, h, w = spec.input_shape
    report = CostReport(model=spec.name)
    for index, layer in enumerate(expand_layers(spec)):
        macs = 0
        if layer.kind == "conv2d":
            h = conv_output_size(h, layer.kernel, layer.stride, layer.pad, "H")
            w = conv_output_size(w, layer.kernel, layer.stride, layer.pad, "W")
            c = layer.out_channels
            macs = layer.in_channels * c * layer.kernel ** 2 * h * w
        elif layer.kind == "decomposed":
            macs, h, w = _decomposed_macs(layer, h, w)
            c = layer.out_channels
            report.predicted_speedup[f"{index}.{layer.kind}"] = predicted_speedup(
                layer.in_channels, layer.out_channels, layer.kernel, layer.L)
        elif layer.kind == "maxpool":
            h = conv_output_size(h, layer.kernel, layer.stride, 0, "H")
            w = conv_output_size(w, layer.kernel, layer.stride, 0, "W")
        elif layer.kind == "linear":
            macs = layer.in_channels * layer.out_channels
            c, h, w = layer.out_channels, 1, 1
        elif layer.kind == "avgpool_global":
            h, w = 1, 1
        params = param_count(layer)
        report.rows.append(LayerCost(f"{index}.{layer.kind}", layer.kind, params, macs, (c, h, w), 4 * params))
    logger.debug(f"{spec.name}: ConvP={report.conv_params} FCP={report.fc_params} MACs={report.total_macs}")
    return report


def compare_specs(a: ModelSpec, b: ModelSpec, input_shape=None) -> pd.DataFrame:
    """两个模型的汇总指标与比值 a/b"""
    ra, rb = count_macs(a, input_shape), count_macs(b, input_shape)
    metrics = ["conv_params", "fc_params", "total_params", "total_macs", "memory_bytes"]
    records = []
    for metric in metrics:
        va, vb = getattr(ra, metric), getattr(rb, metric)
        if va == 0 and vb == 0:
            ratio = 1.0
        elif vb == 0:
            ratio = float("inf")
        else:
            ratio = va / vb
        records.append({"metric": metric, "a": va, "b": vb, "ratio": ratio})
    frame = pd.DataFrame.from_records(records, columns=["metric", "a", "b", "ratio"])
    frame.attrs["a"] = a.name
    frame.attrs["b"] = b.name
    return frame


def measure_times(model: Model, batch: int = RuntimeConfig.TIME_BATCH,
                  repeats: int = RuntimeConfig.TIME_REPEATS, seed: int = 0) -> pd.DataFrame:
    """逐层前向/反向耗时（秒，取多次最小值），仅供参考"""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((batch,) + tuple(model.spec.input_shape)).astype(np.float32)
    # 副本不更新BN滑动统计
    model = model.replicate()
    forward = [float("inf")] * len(model.layers)
    backward = [float("inf")] * len(model.layers)
    for _ in range(repeats):
        out = x
        for i, layer in enumerate(model.layers):
            start = time.perf_counter()
            out = layer.forward(out, train=True)
            forward[i] = min(forward[i], time.perf_counter() - start)
        grad = np.ones_like(out)
        for i in reversed(range(len(model.layers))):
            start = time.perf_counter()
            grad = model.layers[i].backward(grad)
            backward[i] = min(backward[i], time.perf_counter() - start)
    return pd.DataFrame({
        "layer": [layer.name for layer in model.layers],
        "forward_s": forward,
        "backward_s": backward,
    })
