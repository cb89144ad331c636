"""卷积核的秩分解：小矩阵SVD、秩分配与卷积层到分解层的转换"""
from dataclasses import dataclass
from typing import List, Optional, Sequence, Union
import heapq
import logging

import numpy as np

from config import ModelConfig
from .exceptions import ConfigurationError, DimensionError, InfeasibleError, InputError, SemanticError
from .layers import DecomposedLayer, Nonlinearity, decomposed_forward
from .tensor_core import KernelBank2D

logger = logging.getLogger(__name__)


@dataclass
class RankComponents:
    """M = Σ_k σ_k · v_k ⊗ h_k，σ 按非增排序"""
    sigma: np.ndarray  # (K,)
    v: np.ndarray      # (K, rows)
    h: np.ndarray      # (K, cols)

    @property
    def rank(self) -> int:
        return int(self.sigma.shape[0])

    def reconstruct(self) -> np.ndarray:
        return (self.v * self.sigma[:, None]).T @ self.h

    def truncate(self, rank: int) -> "RankComponents":
        return RankComponents(self.sigma[:rank].copy(), self.v[:rank].copy(), self.h[:rank].copy())


def svd_small(matrix) -> RankComponents:
    """单边Jacobi SVD，在较高的方向上迭代"""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.size == 0:
        raise DimensionError(f"svd_small 需要非空二维矩阵，实际 {m.shape}")
    rows, cols = m.shape
    if min(rows, cols) > ModelConfig.SVD_MAX_DIM:
        raise ConfigurationError(f"矩阵 {m.shape} 超出小矩阵SVD上限 {ModelConfig.SVD_MAX_DIM}")

    transposed = rows < cols
    a = m.T.copy() if transposed else m.copy()
    q = a.shape[1]
    rot = np.eye(q)
    tol = ModelConfig.JACOBI_TOL

    for sweep in range(ModelConfig.JACOBI_MAX_SWEEPS):
        rotated = False
        for i in range(q - 1):
            for j in range(i + 1, q):
                alpha = a[:, i] @ a[:, i]
                beta = a[:, j] @ a[:, j]
                gamma = a[:, i] @ a[:, j]
                if gamma == 0.0 or abs(gamma) <= tol * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = (1.0 if zeta >= 0 else -1.0) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                col_i = a[:, i].copy()
                a[:, i] = c * col_i - s * a[:, j]
                a[:, j] = s * col_i + c * a[:, j]
                rot_i = rot[:, i].copy()
                rot[:, i] = c * rot_i - s * rot[:, j]
                rot[:, j] = s * rot_i + c * rot[:, j]
        if not rotated:
            break
    else:
        logger.warning(f"Jacobi SVD 在 {ModelConfig.JACOBI_MAX_SWEEPS} 轮后未完全收敛，矩阵 {m.shape}")

    sigma = np.linalg.norm(a, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    a = a[:, order]
    rot = rot[:, order]
    left = np.zeros_like(a)
    nonzero = sigma > 0
    left[:, nonzero] = a[:, nonzero] / sigma[nonzero]

    if transposed:
        v, h = rot.T, left.T
    else:
        v, h = left.T, rot.T
    v = v.copy()
    h = h.copy()

    # 符号约定：v_k 第一个非零元素为正
    for k in range(q):
        scale = np.abs(v[k]).max()
        if scale == 0:
            continue
        first = np.flatnonzero(np.abs(v[k]) > 1e-12 * scale)[0]
        if v[k, first] < 0:
            v[k] *= -1
            h[k] *= -1
    return RankComponents(sigma, v, h)


def decompose_kernel(kernel, rank: int) -> RankComponents:
    """单个二维核的秩 rank 截断"""
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 2:
        raise DimensionError(f"需要二维卷积核，实际 {kernel.shape}")
    full = svd_small(kernel)
    if not 1 <= rank <= full.rank:
        raise InputError(f"rank 必须在 [1, {full.rank}] 内，实际 {rank}")
    return full.truncate(rank)


def _filter_matrix(weights: np.ndarray, order: str) -> np.ndarray:
    """把单个滤波器 (C, d_v, d_h) 展成二维矩阵，行跨通道"""
    c, d_v, d_h = weights.shape
    if order == "vh":
        return weights.reshape(c * d_v, d_h)
    return weights.transpose(0, 2, 1).reshape(c * d_h, d_v)


def allocate_ranks(components: Sequence[RankComponents], budget: int) -> List[int]:
    """在总预算内按奇异值从大到小分配各滤波器的秩"""
    nonzero = [i for i, comp in enumerate(components) if comp.sigma[0] > 0]
    if budget < max(len(nonzero), 1):
        raise InfeasibleError(f"预算 L={budget} 小于非零滤波器数 {len(nonzero)}")
    ranks = [0] * len(components)
    for i in nonzero:
        ranks[i] = 1
    if not nonzero:
        ranks[0] = 1
    remaining = budget - sum(ranks)

    heap = []
    for i in nonzero:
        for k in range(1, components[i].rank):
            if components[i].sigma[k] > 0:
                heap.append((-components[i].sigma[k], i, k))
    heapq.heapify(heap)
    while remaining > 0 and heap:
        _, i, k = heapq.heappop(heap)
        # 同一滤波器的分量按k递增出堆
        ranks[i] = max(ranks[i], k + 1)
        remaining -= 1
    return ranks


def build_decomposed_pair(bank: KernelBank2D, ranks: Union[None, int, Sequence[int]] = None,
                          budget: Optional[int] = None,
                          nonlinearity: Nonlinearity = Nonlinearity.IDENTITY,
                          order: str = "vh") -> DecomposedLayer:
    """把卷积层转换为等价（满秩时）或近似的分解层

    每个滤波器单独做SVD，L = Σ ranks；水平核只把中间通道连到其来源滤波器。
    非线性为 identity 时满秩转换与原卷积逐元素相等（浮点误差内）。
    """
    if order not in ("vh", "hv"):
        raise ConfigurationError(f"未知阶段顺序: {order}")
    f, c, d_v, d_h = bank.weights.shape
    components = [svd_small(_filter_matrix(bank.weights[i], order)) for i in range(f)]
    max_rank = components[0].rank

    if ranks is None and budget is None:
        ranks = [max_rank] * f
    elif ranks is not None:
        ranks = [int(ranks)] * f if np.isscalar(ranks) else [int(r) for r in ranks]
        if len(ranks) != f:
            raise InputError(f"ranks 长度 {len(ranks)} 与滤波器数 {f} 不一致")
        for i, r in enumerate(ranks):
            if not 1 <= r <= max_rank:
                raise InputError(f"滤波器 {i} 的秩 {r} 超出 [1, {max_rank}]")
        if budget is not None and sum(ranks) > budget:
            raise InfeasibleError(f"Σ ranks = {sum(ranks)} 超出预算 {budget}")
    else:
        ranks = allocate_ranks(components, budget)

    total = sum(ranks)
    if order == "vh":
        first = np.zeros((total, c, d_v, 1), dtype=np.float32)
        second = np.zeros((f, total, 1, d_h), dtype=np.float32)
    else:
        first = np.zeros((total, c, 1, d_h), dtype=np.float32)
        second = np.zeros((f, total, d_v, 1), dtype=np.float32)

    channel = 0
    for i, (comp, rank) in enumerate(zip(components, ranks)):
        for k in range(rank):
            spread = comp.sigma[k] * comp.v[k]
            if order == "vh":
                first[channel, :, :, 0] = spread.reshape(c, d_v)
                second[i, channel, 0, :] = comp.h[k]
            else:
                first[channel, :, 0, :] = spread.reshape(c, d_h)
                second[i, channel, :, 0] = comp.h[k]
            channel += 1

    vertical, horizontal = (first, second) if order == "vh" else (second, first)
    logger.info(f"卷积层 F={f} C={c} d={d_v}x{d_h} 转换为分解层 L={total}")
    return DecomposedLayer(
        vertical=vertical,
        horizontal=horizontal,
        bias_v=np.zeros(total, dtype=np.float32),
        bias_h=bank.bias.copy(),
        nonlinearity=nonlinearity,
        stride=bank.stride,
        padding=bank.padding,
        order=order,
    )


def effective_kernels(layer: DecomposedLayer) -> np.ndarray:
    """用脉冲响应求出线性分解层对应的等效卷积核 (F, C, d_v, d_h)"""
    if layer.nonlinearity is not Nonlinearity.IDENTITY:
        raise SemanticError("非线性分解层没有等效的单个卷积核")
    d_v, d_h = layer.kernel_size
    c = layer.C
    impulse_layer = DecomposedLayer(
        layer.vertical, layer.horizontal, layer.bias_v, layer.bias_h,
        nonlinearity=Nonlinearity.IDENTITY, stride=1, padding=0, order=layer.order,
    )
    n = c * d_v * d_h
    impulses = np.eye(n, dtype=np.float32).reshape(n, c, d_v, d_h)
    response, _ = decomposed_forward(impulses, impulse_layer)
    offset, _ = decomposed_forward(np.zeros((1, c, d_v, d_h), dtype=np.float32), impulse_layer)
    kernels = response.astype(np.float64).reshape(n, layer.F) - offset.astype(np.float64).reshape(1, layer.F)
    return kernels.T.reshape(layer.F, c, d_v, d_h)


def reconstruction_error(bank: KernelBank2D, layer: DecomposedLayer) -> float:
    """原卷积核与分解层等效核之差的Frobenius范数"""
    if layer.nonlinearity is not Nonlinearity.IDENTITY:
        raise SemanticError("只有 identity 非线性的分解层才能计算重建误差")
    if (layer.C, layer.F) != (bank.channels, bank.filters) or layer.kernel_size != bank.kernel_size:
        raise DimensionError(
            f"分解层 (C={layer.C}, F={layer.F}, d={layer.kernel_size}) 与卷积核 {bank.weights.shape} 不一致"
        )
    diff = bank.weights.astype(np.float64) - effective_kernels(layer)
    return float(np.linalg.norm(diff))
