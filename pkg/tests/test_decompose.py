import numpy as np
import pytest

from utils import tensor_core as tc
from utils.decompose import (
    RankComponents, allocate_ranks, build_decomposed_pair, decompose_kernel, effective_kernels,
    reconstruction_error, svd_small,
)
from utils.exceptions import ConfigurationError, DimensionError, InfeasibleError, InputError, SemanticError
from utils.layers import Nonlinearity, decomposed_forward
from utils.tensor_core import KernelBank2D


def _bank(rng, f, c, d, stride=1, pad=0):
    return KernelBank2D(rng.standard_normal((f, c, d, d)), rng.standard_normal(f), stride, pad)


class TestSvdSmall:
    def test_rank_one_outer_product(self):
        m = np.outer([1.0, 2.0, 1.0], [1.0, 0.0, -1.0])
        comp = svd_small(m)
        assert comp.sigma[0] == pytest.approx(np.sqrt(12.0), rel=1e-12)
        np.testing.assert_allclose(comp.sigma[1:], 0.0, atol=1e-12)
        np.testing.assert_allclose(comp.v[0], np.array([1, 2, 1]) / np.sqrt(6), atol=1e-12)
        np.testing.assert_allclose(comp.h[0], np.array([1, 0, -1]) / np.sqrt(2), atol=1e-12)

    def test_zero_matrix(self):
        comp = svd_small(np.zeros((3, 3)))
        np.testing.assert_array_equal(comp.sigma, 0.0)
        np.testing.assert_array_equal(comp.reconstruct(), 0.0)

    @pytest.mark.parametrize("shape", [(3, 3), (9, 3), (3, 7), (1, 5), (6, 1)])
    def test_matches_lapack(self, rng, shape):
        m = rng.standard_normal(shape)
        comp = svd_small(m)
        np.testing.assert_allclose(comp.sigma, np.linalg.svd(m, compute_uv=False), atol=1e-10)
        np.testing.assert_allclose(comp.reconstruct(), m, atol=1e-10)
        assert np.all(np.diff(comp.sigma) <= 0)

    def test_sign_convention(self, rng):
        comp = svd_small(rng.standard_normal((5, 4)))
        for v in comp.v:
            assert v[np.flatnonzero(np.abs(v) > 1e-12)[0]] > 0

    def test_orthonormal_factors(self, rng):
        comp = svd_small(rng.standard_normal((6, 3)))
        np.testing.assert_allclose(comp.v @ comp.v.T, np.eye(3), atol=1e-10)
        np.testing.assert_allclose(comp.h @ comp.h.T, np.eye(3), atol=1e-10)

    @pytest.mark.parametrize("shape", [(4, 4), (11, 5), (3, 8)])
    def test_sigma_squared_matches_gram_eigenvalues(self, rng, shape):
        m = rng.standard_normal(shape)
        comp = svd_small(m)
        gram = m @ m.T if shape[0] < shape[1] else m.T @ m
        eig = np.sort(np.linalg.eigvalsh(gram))[::-1]
        np.testing.assert_allclose(comp.sigma ** 2, eig, atol=1e-9)

    def test_rejects_bad_input(self):
        with pytest.raises(DimensionError):
            svd_small(np.zeros(4))
        with pytest.raises(DimensionError):
            svd_small(np.zeros((0, 3)))
        with pytest.raises(ConfigurationError):
            svd_small(np.zeros((33, 33)))


class TestDecomposeKernel:
    def test_truncation(self, rng):
        kernel = rng.standard_normal((5, 5))
        comp = decompose_kernel(kernel, 2)
        assert comp.rank == 2
        full = np.linalg.svd(kernel, compute_uv=False)
        residual = np.linalg.norm(kernel - comp.reconstruct())
        assert residual == pytest.approx(np.sqrt(np.sum(full[2:] ** 2)), rel=1e-8)

    @pytest.mark.parametrize("rank", [1, 2, 4])
    def test_truncation_beats_other_low_rank_matrices(self, rng, rank):
        kernel = rng.standard_normal((5, 5))
        comp = decompose_kernel(kernel, rank)
        best = np.linalg.norm(kernel - comp.reconstruct())
        left = (comp.v * comp.sigma[:, None]).T
        for _ in range(200):
            # 在最优解附近扰动两个因子，结果仍是秩 ≤ rank
            scale = rng.uniform(0.01, 0.5)
            factor_v = left + scale * rng.standard_normal(left.shape)
            factor_h = comp.h + scale * rng.standard_normal(comp.h.shape)
            candidate = factor_v @ factor_h
            assert np.linalg.norm(kernel - candidate) >= best - 1e-12

    @pytest.mark.parametrize("alpha", [3.0, 0.25, -2.0])
    def test_scaling_the_kernel_scales_the_components(self, rng, alpha):
        kernel = rng.standard_normal((5, 5))
        comp = decompose_kernel(kernel, 3)
        scaled = decompose_kernel(alpha * kernel, 3)
        np.testing.assert_allclose(scaled.sigma, abs(alpha) * comp.sigma, rtol=1e-10)
        np.testing.assert_allclose(np.abs(np.sum(scaled.v * comp.v, axis=1)), 1.0, atol=1e-10)
        np.testing.assert_allclose(scaled.reconstruct(), alpha * comp.reconstruct(), atol=1e-10)

    def test_rank_out_of_range(self, rng):
        with pytest.raises(InputError):
            decompose_kernel(rng.standard_normal((3, 3)), 0)
        with pytest.raises(InputError):
            decompose_kernel(rng.standard_normal((3, 3)), 4)


class TestBuildDecomposedPair:
    @pytest.mark.parametrize("order", ["vh", "hv"])
    def test_full_rank_matches_convolution(self, rng, order):
        for stride, pad in [(1, 0), (1, 1), (2, 1)]:
            bank = _bank(rng, 3, 2, 3, stride, pad)
            layer = build_decomposed_pair(bank, order=order)
            assert layer.L == 3 * 3
            x = rng.standard_normal((2, 2, 7, 7)).astype(np.float32)
            out, _ = decomposed_forward(x, layer)
            np.testing.assert_allclose(out, tc.conv2d(x, bank), atol=1e-5, rtol=1e-5)

    def test_full_rank_matches_convolution_on_random_banks(self, rng):
        for _ in range(100):
            c, f = (int(v) for v in rng.integers(1, 9, size=2))
            d = int(rng.choice([3, 5, 7, 9, 11]))
            weights = rng.standard_normal((f, c, d, d)) / np.sqrt(c * d * d)
            bank = KernelBank2D(weights, rng.standard_normal(f))
            layer = build_decomposed_pair(bank)
            size = d + int(rng.integers(0, 4))
            x = rng.standard_normal((int(rng.integers(1, 3)), c, size, size)).astype(np.float32)
            out, _ = decomposed_forward(x, layer)
            assert np.abs(out - tc.conv2d(x, bank)).max() < 1e-5

    def test_multichannel_rank(self, rng):
        # 每个滤波器展成 (C·d)×d 矩阵，满秩为 d
        bank = _bank(rng, 2, 4, 3)
        layer = build_decomposed_pair(bank)
        assert layer.L == 6
        assert reconstruction_error(bank, layer) < 1e-5

    def test_truncation_error(self, rng):
        bank = _bank(rng, 3, 2, 5)
        layer = build_decomposed_pair(bank, ranks=2)
        expected = 0.0
        for i in range(3):
            s = np.linalg.svd(bank.weights[i].astype(np.float64).reshape(2 * 5, 5), compute_uv=False)
            expected += np.sum(s[2:] ** 2)
        assert reconstruction_error(bank, layer) == pytest.approx(np.sqrt(expected), rel=1e-4)

    def test_per_filter_ranks(self, rng):
        bank = _bank(rng, 3, 1, 3)
        layer = build_decomposed_pair(bank, ranks=[1, 2, 3])
        assert layer.L == 6
        with pytest.raises(InputError):
            build_decomposed_pair(bank, ranks=[1, 2])
        with pytest.raises(InputError):
            build_decomposed_pair(bank, ranks=[1, 2, 4])
        with pytest.raises(InfeasibleError):
            build_decomposed_pair(bank, ranks=[2, 2, 2], budget=5)

    def test_budget(self, rng):
        bank = _bank(rng, 4, 2, 3)
        layer = build_decomposed_pair(bank, budget=7)
        assert layer.L == 7
        with pytest.raises(InfeasibleError):
            build_decomposed_pair(bank, budget=3)

    def test_bias_moves_to_output_stage(self, rng):
        bank = _bank(rng, 2, 1, 3)
        layer = build_decomposed_pair(bank)
        np.testing.assert_array_equal(layer.bias_h, bank.bias)
        np.testing.assert_array_equal(layer.bias_v, 0.0)

    def test_keeps_geometry(self, rng):
        layer = build_decomposed_pair(_bank(rng, 2, 1, 3, stride=2, pad=1))
        assert layer.stride == (2, 2)
        assert layer.padding == (1, 1)


class TestAllocateRanks:
    def test_largest_singular_values_win(self):
        big = RankComponents(np.array([5.0, 4.0, 3.0]), np.eye(3), np.eye(3))
        small = RankComponents(np.array([2.0, 1.0, 0.5]), np.eye(3), np.eye(3))
        assert allocate_ranks([big, small], 4) == [3, 1]
        assert allocate_ranks([big, small], 5) == [3, 2]
        assert allocate_ranks([big, small], 10) == [3, 3]

    def test_infeasible(self):
        comp = RankComponents(np.array([1.0]), np.ones((1, 1)), np.ones((1, 1)))
        with pytest.raises(InfeasibleError):
            allocate_ranks([comp, comp, comp], 2)


class TestEffectiveKernels:
    def test_recovers_bias_free_kernel(self, rng):
        bank = _bank(rng, 2, 3, 3)
        layer = build_decomposed_pair(bank)
        np.testing.assert_allclose(effective_kernels(layer), bank.weights, atol=1e-5)

    def test_nonlinear_layer_has_no_kernel(self, rng):
        layer = build_decomposed_pair(_bank(rng, 2, 1, 3), nonlinearity=Nonlinearity.RELU)
        with pytest.raises(SemanticError):
            effective_kernels(layer)
        with pytest.raises(SemanticError):
            reconstruction_error(_bank(rng, 2, 1, 3), layer)

    def test_shape_mismatch(self, rng):
        layer = build_decomposed_pair(_bank(rng, 2, 1, 3))
        with pytest.raises(DimensionError):
            reconstruction_error(_bank(rng, 3, 1, 3), layer)
