import io

import numpy as np
import pandas as pd
import pytest

from utils.complexity import CSV_COLUMNS, compare_specs, count_macs, measure_times, predicted_speedup
from utils.exceptions import InputError
from utils.model_zoo import decompose_model, instantiate, parse_model_spec, spec_from_dict


def _spec(layer, c, size):
    return spec_from_dict({"name": "tiny-net", "input_shape": [c, size, size], "num_classes": 2,
                           "head": "compact", "layers": [layer]})


def _random_geometry(rng):
    while True:
        k = int(rng.integers(1, 5))
        s = int(rng.integers(1, 3))
        p = int(rng.integers(0, 2))
        out = int(rng.integers(1, 5))
        size = (out - 1) * s + k - 2 * p
        if size >= 1:
            return k, s, p, size


class TestCountMacs:
    def test_pointwise_conv(self):
        report = count_macs(_spec({"kind": "conv2d", "in": 1, "out": 1, "k": 1}, 1, 4))
        assert report.rows[0].macs == 16

    def test_small_conv_matches_oracle(self, naive_conv2d):
        report = count_macs(_spec({"kind": "conv2d", "in": 3, "out": 2, "k": 3}, 3, 5))
        _, mults = naive_conv2d(np.zeros((1, 3, 5, 5)), np.zeros((2, 3, 3, 3)), np.zeros(2))
        assert report.rows[0].macs == mults == 486

    def test_conv_oracle(self, rng, naive_conv2d):
        for _ in range(20):
            k, s, p, size = _random_geometry(rng)
            c, f = (int(v) for v in rng.integers(1, 4, size=2))
            report = count_macs(_spec({"kind": "conv2d", "in": c, "out": f, "k": k, "stride": s, "pad": p}, c, size))
            _, mults = naive_conv2d(np.zeros((1, c, size, size)), np.zeros((f, c, k, k)), np.zeros(f), (s, s), (p, p))
            assert report.rows[0].macs == mults

    @pytest.mark.parametrize("order", ["vh", "hv"])
    def test_decomposed_oracle(self, rng, naive_conv2d, order):
        for _ in range(20):
            k, s, p, size = _random_geometry(rng)
            c, n, f = (int(v) for v in rng.integers(1, 4, size=3))
            layer = {"kind": "decomposed", "in": c, "L": n, "out": f, "k": k, "stride": s, "pad": p, "order": order}
            report = count_macs(_spec(layer, c, size))
            vertical = ((k, 1), (s, 1), (p, 0))
            horizontal = ((1, k), (1, s), (0, p))
            first, second = (vertical, horizontal) if order == "vh" else (horizontal, vertical)
            x = np.zeros((1, c, size, size))
            mid, m1 = naive_conv2d(x, np.zeros((n, c) + first[0]), np.zeros(n), first[1], first[2])
            _, m2 = naive_conv2d(mid, np.zeros((f, n) + second[0]), np.zeros(f), second[1], second[2])
            assert report.rows[0].macs == m1 + m2

    def test_vgg_style_ratio(self):
        conv = count_macs(_spec({"kind": "conv2d", "in": 256, "out": 256, "k": 3, "pad": 1}, 256, 8))
        dec = count_macs(_spec({"kind": "decomposed", "in": 256, "L": 256, "out": 256, "k": 3, "pad": 1}, 256, 8))
        assert conv.rows[0].macs / dec.rows[0].macs == 1.5
        assert (conv.rows[0].params, dec.rows[0].params) == (590080, 394240)
        assert dec.predicted_speedup["0.decomposed"] == 1.5

    def test_non_mac_layers(self):
        report = count_macs(parse_model_spec("alexnet-owtbn"))
        for row in report.rows:
            if row.kind in ("relu", "maxpool", "batchnorm"):
                assert row.macs == 0

    def test_shipped_totals(self):
        vgg = count_macs(parse_model_spec("vgg-b"))
        assert vgg.conv_params == 9404992
        dec8 = count_macs(parse_model_spec("vgg-b-dec8-compact-avg"))
        assert (dec8.conv_params, dec8.fc_params) == (6802752, 513000)
        alexnet = count_macs(parse_model_spec("alexnet-owtbn"))
        assert (alexnet.conv_params, alexnet.fc_params) == (2469696, 58631144)
        assert count_macs(parse_model_spec("alexnet-owtbn-compact")).fc_params == 9217000
        assert alexnet.rows[-1].output_shape == (1000, 1, 1)

    @pytest.mark.parametrize("name", ["lenet", "cifar10-quick", "vgg-b"])
    def test_decomposing_keeps_output_shapes(self, name):
        base = parse_model_spec(name)
        convs = [i for i, layer in enumerate(base.layers) if layer.kind == "conv2d"]
        dec = decompose_model(base, convs)
        before = count_macs(base).rows
        after = count_macs(dec).rows
        assert [row.output_shape for row in after] == [row.output_shape for row in before]
        assert [after[i].kind for i in convs] == ["decomposed"] * len(convs)

    def test_memory_is_float32_params(self):
        report = count_macs(parse_model_spec("lenet"))
        assert report.memory_bytes == 4 * report.total_params

    def test_csv(self):
        report = count_macs(parse_model_spec("lenet"))
        text = report.to_csv()
        lines = text.splitlines()
        assert lines[0] == ",".join(CSV_COLUMNS)
        assert lines[1] == "0.conv2d,conv2d,520,288000,20,24,24"
        assert lines[-3:] == [
            "TOTAL_CONVP,,25570,,,,",
            f"TOTAL_FCP,,{report.fc_params},,,,",
            f"TOTAL_MACS,,,{report.total_macs},,,",
        ]
        frame = pd.read_csv(io.StringIO(text))
        assert len(frame) == len(report.rows) + 3


class TestPredictedSpeedup:
    def test_worked_cases(self):
        assert predicted_speedup(256, 256, 3, 256) == 1.5
        assert predicted_speedup(3, 64, 11, 64) == pytest.approx(0.4925, abs=1e-4)
        assert predicted_speedup(2, 2, 2, 2) == 1.0

    def test_condition(self):
        grid = np.random.default_rng(7).integers(1, 300, size=(1000, 4))
        for c, f, d, n in grid.tolist():
            assert (predicted_speedup(c, f, d, n) > 1) == (n * (c + f) < c * f * d)

    def test_rejects_non_positive(self):
        with pytest.raises(InputError):
            predicted_speedup(0, 1, 1, 1)


class TestCompareSpecs:
    def test_identical(self):
        spec = parse_model_spec("cifar10-quick")
        table = compare_specs(spec, spec)
        assert list(table.columns) == ["metric", "a", "b", "ratio"]
        assert (table["ratio"] == 1.0).all()

    def test_lenet_conv_ratio(self):
        table = compare_specs(parse_model_spec("lenet"), parse_model_spec("lenet-dec2")).set_index("metric")
        assert table.loc["conv_params", "ratio"] >= 2.0

    def test_vgg_reduction(self):
        table = compare_specs(parse_model_spec("vgg-b"), parse_model_spec("vgg-b-dec8-compact-avg"))
        total = table.set_index("metric").loc["total_params"]
        assert 1 - total["b"] / total["a"] >= 0.9
        assert table.attrs == {"a": "vgg-b", "b": "vgg-b-dec8-compact-avg"}


class TestMeasureTimes:
    def test_per_layer_rows_and_no_side_effects(self):
        spec = spec_from_dict({"name": "bn", "input_shape": [2, 6, 6], "num_classes": 3, "head": "compact",
                               "layers": [{"kind": "conv2d", "in": 2, "out": 4, "k": 3},
                                          {"kind": "batchnorm"}, {"kind": "relu"}]})
        model = instantiate(spec, seed=0)
        times = measure_times(model, batch=2, repeats=2)
        assert list(times["layer"]) == [layer.name for layer in model.layers]
        assert (times[["forward_s", "backward_s"]] >= 0).all().all()
        np.testing.assert_array_equal(model.named_buffers()["1.batchnorm.running_mean"], 0)
