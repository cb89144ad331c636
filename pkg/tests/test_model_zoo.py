import json
from pathlib import Path

import numpy as np
import pytest

from presets import PRESET_NAMES
from utils.exceptions import InputError, SpecParseError, ValidationError
from utils.layers import param_count
from utils.model_zoo import (
    convert_model, decompose_model, expand_layers, fuse_consecutive, fuse_groups, infer_shapes,
    instantiate, load_model_spec, parse_model_spec, receptive_field, serialize_model_spec,
    spec_from_dict, with_head,
)

FIXTURES = Path(__file__).parent / "fixtures" / "specs"
FIXTURE_NAMES = ["tiny_conv", "decomposed_tanh", "avg_head", "strided_linear"]


def _conv_params(spec):
    return sum(param_count(layer) for layer in expand_layers(spec) if layer.kind in ("conv2d", "decomposed"))


def _doc(layers, **extra):
    doc = {"name": "t", "input_shape": [1, 8, 8], "num_classes": 2, "head": "compact", "layers": layers}
    doc.update(extra)
    return doc


class TestParse:
    @pytest.mark.parametrize("name", PRESET_NAMES)
    def test_presets_resolve(self, name):
        spec = parse_model_spec(name)
        assert spec.name == name
        assert serialize_model_spec(parse_model_spec(serialize_model_spec(spec))) == serialize_model_spec(spec)

    def test_lenet_structure(self):
        spec = parse_model_spec("lenet")
        assert [layer.kind for layer in spec.layers] == ["conv2d", "tanh", "maxpool", "conv2d", "tanh", "maxpool"]
        assert all(layer.kernel == 5 for layer in spec.layers if layer.kind == "conv2d")
        head = expand_layers(spec)[6:]
        assert [(layer.kind, layer.out_channels) for layer in head] == [
            ("linear", 500), ("relu", None), ("linear", 10)]
        assert head[0].in_channels == 50 * 4 * 4

    @pytest.mark.parametrize("name", PRESET_NAMES)
    def test_every_conv_is_followed_by_nonlinearity(self, name):
        layers = parse_model_spec(name).layers
        for index, layer in enumerate(layers):
            if layer.kind != "conv2d":
                continue
            following = [nxt.kind for nxt in layers[index + 1:index + 3]]
            if following[:1] == ["batchnorm"]:
                following = following[1:]
            assert following[:1] in (["relu"], ["tanh"]), f"{name}: {index}.conv2d"

    @pytest.mark.parametrize("name", ["lenet", "lenet-k9"])
    def test_lenet_baselines_use_tanh(self, name):
        kinds = [layer.kind for layer in parse_model_spec(name).layers]
        assert kinds.count("tanh") == kinds.count("conv2d") == 2

    @pytest.mark.parametrize("name", FIXTURE_NAMES)
    def test_canonical_form(self, name):
        text = (FIXTURES / f"{name}.json").read_bytes()
        golden = json.loads((FIXTURES / f"{name}.canonical.json").read_text(encoding="utf-8"))
        out = serialize_model_spec(parse_model_spec(text))
        assert out == json.dumps(golden, indent=2, ensure_ascii=False) + "\n"
        assert serialize_model_spec(parse_model_spec(out)) == out

    def test_load_from_path_and_name(self):
        assert load_model_spec(str(FIXTURES / "tiny_conv.json")).name == "tiny"
        assert load_model_spec("lenet-dec2").name == "lenet-dec2"

    @pytest.mark.parametrize("layers, pointer", [
        ([{"kind": "conv2d", "in": 1, "out": 4}], "/layers/0/k"),
        ([{"kind": "relu"}, {"kind": "relu", "foo": 1}], "/layers/1/foo"),
        ([{"kind": "softmax"}], "/layers/0/kind"),
        ([{"kind": "conv2d", "in": 1, "out": True, "k": 3}], "/layers/0/out"),
        ([{"kind": "conv2d", "in": 1, "out": 4, "k": 3, "pad": -1}], "/layers/0/pad"),
        ([{"kind": "decomposed", "in": 1, "L": 2, "out": 4, "k": 3, "nl": "sigmoid"}], "/layers/0/nl"),
        ([{"kind": "decomposed", "in": 1, "L": 2, "out": 4, "k": 3, "inner_bn": 1}], "/layers/0/inner_bn"),
    ])
    def test_errors_carry_pointer(self, layers, pointer):
        with pytest.raises(SpecParseError) as info:
            parse_model_spec(json.dumps(_doc(layers)))
        assert info.value.pointer == pointer

    def test_top_level_errors(self):
        with pytest.raises(SpecParseError) as info:
            spec_from_dict(_doc([{"kind": "relu"}], extra=1))
        assert info.value.pointer == "/extra"
        doc = _doc([{"kind": "relu"}])
        del doc["num_classes"]
        with pytest.raises(SpecParseError):
            spec_from_dict(doc)
        with pytest.raises(SpecParseError):
            parse_model_spec("{not json")
        with pytest.raises(SpecParseError):
            parse_model_spec(b"\xff\xfe")

    def test_validation_errors(self):
        with pytest.raises(ValidationError):
            spec_from_dict(_doc([]))
        with pytest.raises(ValidationError):
            spec_from_dict(_doc([{"kind": "conv2d", "in": 3, "out": 4, "k": 3}]))
        with pytest.raises(ValidationError):
            spec_from_dict(_doc([{"kind": "conv2d", "in": 1, "out": 4, "k": 2, "stride": 2}], input_shape=[1, 7, 7]))


class TestInstantiate:
    def test_deterministic(self):
        spec = parse_model_spec("lenet-dec2")
        a = instantiate(spec, "xavier", seed=3).named_parameters()
        b = instantiate(spec, "xavier", seed=3).named_parameters()
        c = instantiate(spec, "xavier", seed=4).named_parameters()
        assert list(a) == list(b)
        for key in a:
            assert a[key].tobytes() == b[key].tobytes()
        assert any(a[key].tobytes() != c[key].tobytes() for key in a)

    def test_kaiming_std(self):
        spec = spec_from_dict(_doc([{"kind": "conv2d", "in": 8, "out": 150, "k": 3}], input_shape=[8, 3, 3]))
        weights = instantiate(spec, "kaiming", seed=0).named_parameters()["0.conv2d.weight"]
        assert weights.size >= 10000
        assert abs(weights.std() / np.sqrt(2 / 72) - 1) < 0.1

    def test_kaiming_uses_one_dimensional_fan(self):
        spec = spec_from_dict(_doc([{"kind": "decomposed", "in": 16, "L": 256, "out": 4, "k": 3, "pad": 1}],
                                   input_shape=[16, 4, 4]))
        params = instantiate(spec, "kaiming", seed=0).named_parameters()
        vertical = params["0.decomposed.vertical"]
        assert vertical.shape == (256, 16, 3, 1)
        assert abs(vertical.std() / np.sqrt(2 / 48) - 1) < 0.1

    def test_xavier_bounds(self):
        spec = spec_from_dict(_doc([{"kind": "conv2d", "in": 1, "out": 4, "k": 3}]))
        weights = instantiate(spec, "xavier", seed=0).named_parameters()["0.conv2d.weight"]
        assert np.abs(weights).max() <= np.sqrt(6 / (9 + 36))

    def test_biases_zero(self):
        params = instantiate(parse_model_spec("cifar10-quick-dec1"), seed=5).named_parameters()
        biases = [v for k, v in params.items() if k.rsplit(".", 1)[1] in ("bias", "bias_v", "bias_h")]
        assert biases
        assert all(np.all(b == 0) for b in biases)

    def test_unknown_scheme(self):
        with pytest.raises(InputError):
            instantiate(parse_model_spec("lenet"), "orthogonal")

    def test_forward_shape(self, rng):
        model = instantiate(spec_from_dict(json.loads((FIXTURES / "avg_head.json").read_text())), seed=0)
        out = model.forward(rng.standard_normal((2, 2, 11, 11)).astype(np.float32))
        assert out.shape == (2, 3, 1, 1)


class TestDecomposeModel:
    def test_empty_selection(self):
        spec = parse_model_spec("lenet")
        assert decompose_model(spec, []) is spec

    def test_match_output(self):
        base = parse_model_spec("lenet")
        dec = decompose_model(base, [0, 3])
        assert dec.name == "lenet-dec2"
        assert [(layer.kind, layer.L) for layer in dec.layers if layer.kind == "decomposed"] == [
            ("decomposed", 20), ("decomposed", 50)]
        assert _conv_params(dec) < _conv_params(base)
        assert infer_shapes(dec) == infer_shapes(base)

    def test_shipped_lenet_halves_conv_params(self):
        assert _conv_params(parse_model_spec("lenet")) == 25570
        assert _conv_params(parse_model_spec("lenet-dec2")) == 9905

    def test_explicit_policy(self):
        dec = decompose_model(parse_model_spec("lenet"), [0], policy={0: 7}, nl="tanh")
        assert (dec.layers[0].L, dec.layers[0].nl) == (7, "tanh")
        with pytest.raises(InputError):
            decompose_model(parse_model_spec("lenet"), [0, 3], policy={0: 7})

    def test_bad_targets(self):
        spec = parse_model_spec("lenet")
        with pytest.raises(InputError):
            decompose_model(spec, [1])
        with pytest.raises(InputError):
            decompose_model(spec, [9])

    @pytest.mark.parametrize("name", ["cifar10-quick-dec3", "lenet-dec2", "vgg-b-dec8-compact-avg"])
    def test_shipped_multi_layer_decompositions_shrink(self, name):
        base = {"cifar10-quick-dec3": "cifar10-quick", "lenet-dec2": "lenet",
                "vgg-b-dec8-compact-avg": "vgg-b"}[name]
        assert _conv_params(parse_model_spec(name)) < _conv_params(parse_model_spec(base))


class TestConvertModel:
    def test_full_rank_preserves_logits(self, rng):
        spec = spec_from_dict(json.loads((FIXTURES / "strided_linear.json").read_text()))
        model = instantiate(spec, seed=1)
        converted = convert_model(model, [0])
        assert converted.layers[0].name == "0.decomposed"
        assert converted.spec.layers[0].nl == "identity"
        assert model.layers[0].kind == "conv2d"
        x = rng.standard_normal((10, 3, 12, 12)).astype(np.float32)
        np.testing.assert_allclose(converted.forward(x), model.forward(x), atol=1e-4)

    def test_truncated_rank(self):
        model = instantiate(spec_from_dict(json.loads((FIXTURES / "tiny_conv.json").read_text())), seed=0)
        converted = convert_model(model, [0], rank=1)
        assert converted.spec.layers[0].L == 4

    def test_rejects_non_conv(self):
        model = instantiate(spec_from_dict(json.loads((FIXTURES / "tiny_conv.json").read_text())), seed=0)
        with pytest.raises(InputError):
            convert_model(model, [1])


class TestFuse:
    def test_four_by_three_becomes_nine(self):
        spec = parse_model_spec("stereo-features")
        fused = fuse_consecutive(spec, (0, 6))
        assert fused.layers[0].kind == "decomposed"
        assert (fused.layers[0].kernel, fused.layers[0].L) == (9, 64)
        assert receptive_field(fused, 0) == receptive_field(spec, 6) == 9
        assert infer_shapes(fused)[0] == infer_shapes(spec)[6]

    def test_two_by_three_becomes_five(self):
        fused = fuse_consecutive(parse_model_spec("stereo-features"), (0, 2))
        assert fused.layers[0].kernel == 5
        assert receptive_field(fused, 0) == 5

    def test_single_layer(self):
        assert fuse_consecutive(parse_model_spec("stereo-features"), (0, 0)).layers[0].kernel == 3

    def test_rejects_bad_groups(self):
        with pytest.raises(InputError):
            fuse_consecutive(parse_model_spec("lenet"), (0, 2))
        strided = spec_from_dict(_doc([{"kind": "conv2d", "in": 1, "out": 2, "k": 3, "stride": 2, "pad": 1}],
                               input_shape=[1, 9, 9]))
        with pytest.raises(InputError):
            fuse_consecutive(strided, (0, 0))
        with pytest.raises(InputError):
            fuse_groups(parse_model_spec("stereo-features"), [(0, 2), (2, 4)])

    def test_groups(self):
        fused = fuse_groups(parse_model_spec("stereo-features"), [(4, 6), (0, 2)])
        assert fused.name == "stereo-features-fused2"
        assert [layer.kernel for layer in fused.layers if layer.kind == "decomposed"] == [5, 5]


class TestReceptiveField:
    def test_single_conv(self):
        spec = spec_from_dict(_doc([{"kind": "conv2d", "in": 1, "out": 2, "k": 5}]))
        assert receptive_field(spec, 0) == 5

    def test_conv_pool_conv(self):
        spec = spec_from_dict(_doc([
            {"kind": "conv2d", "in": 1, "out": 2, "k": 3, "pad": 1},
            {"kind": "maxpool", "k": 2},
            {"kind": "conv2d", "in": 2, "out": 2, "k": 3},
        ]))
        assert [receptive_field(spec, i) for i in range(3)] == [3, 4, 8]

    def test_head_covers_input(self):
        spec = parse_model_spec("lenet")
        assert receptive_field(spec, len(expand_layers(spec)) - 1) == 28
        with pytest.raises(InputError):
            receptive_field(spec, 99)


class TestWithHead:
    def test_switch(self):
        spec = with_head(parse_model_spec("vgg-b"), "compact_avg")
        assert [layer.kind for layer in expand_layers(spec)[-2:]] == ["avgpool_global", "linear"]
        with pytest.raises(InputError):
            with_head(spec, "tiny")
