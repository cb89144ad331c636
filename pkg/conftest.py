import os
from pathlib import Path

import numpy as np
import pytest

from config import DataConfig


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def _naive_conv2d(x, weights, bias, stride=(1, 1), pad=(0, 0)):
    """逐元素循环的参考卷积，返回 (输出, 乘法次数)"""
    n, c, h, w = x.shape
    f, _, kh, kw = weights.shape
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (pad[0], pad[0]), (pad[1], pad[1])))
    oh = (h + 2 * pad[0] - kh) // stride[0] + 1
    ow = (w + 2 * pad[1] - kw) // stride[1] + 1
    out = np.zeros((n, f, oh, ow))
    mults = 0
    for b in range(n):
        for o in range(f):
            for i in range(oh):
                for j in range(ow):
                    acc = float(bias[o])
                    for ch in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[b, ch, i * stride[0] + u, j * stride[1] + v] * weights[o, ch, u, v]
                                mults += 1
                    out[b, o, i, j] = acc
    return out, mults


@pytest.fixture
def naive_conv2d():
    return _naive_conv2d


@pytest.fixture
def mnist_root():
    """真实 MNIST 目录；未配置时跳过"""
    root = os.getenv(DataConfig.DATA_ENV_VAR)
    names = DataConfig.MNIST_FILES["train"] + DataConfig.MNIST_FILES["test"]
    if not root or not all((Path(root) / name).is_file() for name in names):
        pytest.skip(f"需要 {DataConfig.DATA_ENV_VAR} 指向 MNIST IDX 文件")
    return Path(root)
