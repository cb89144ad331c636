import io
import json

import numpy as np
import pandas as pd
import pytest

from app import dispatch, load_datasets, spec_hash
from utils.data_io import load_mnist
from utils.model_zoo import load_model_spec, parse_model_spec

BLOB_NET = {
    "name": "blob-net", "input_shape": [1, 12, 12], "num_classes": 2, "head": "compact",
    "layers": [{"kind": "conv2d", "in": 1, "out": 3, "k": 3}, {"kind": "relu"}, {"kind": "maxpool", "k": 2}],
}


@pytest.fixture
def blob_spec(tmp_path):
    path = tmp_path / "blob.json"
    path.write_text(json.dumps(BLOB_NET), encoding="utf-8")
    return str(path)


def run(argv):
    return dispatch(argv, configure_logging=False)


def _train(blob_spec, out, *extra):
    return run(["train", "--model", blob_spec, "--dataset", "synth:blobs:40", "--epochs", "2",
                "--batch", "8", "--seed", "3", "--no-progress", "--out", str(out), *extra])


class TestDispatch:
    def test_analyze_prints_cost_csv(self, capsys):
        assert run(["analyze", "--model", "lenet", "--input", "1x28x28"]) == 0
        out = capsys.readouterr().out.splitlines()
        assert out[0] == "layer,kind,params,macs,out_c,out_h,out_w"
        assert out[-3].startswith("TOTAL_CONVP,,25570")

    def test_analyze_compare(self, capsys, tmp_path):
        assert run(["analyze", "--model", "lenet", "--compare", "lenet-dec2", "--out", str(tmp_path)]) == 0
        table = pd.read_csv(io.StringIO(capsys.readouterr().out)).set_index("metric")
        assert table.loc["conv_params", "a"] == 25570
        assert table.loc["conv_params", "b"] == 9905
        assert (tmp_path / "compare.csv").is_file()

    def test_analyze_diagram_to_stdout(self, capsys):
        assert run(["analyze", "--model", "lenet-dec1", "--diagram"]) == 0
        assert "digraph" in capsys.readouterr().out

    @pytest.mark.parametrize("argv", [
        ["explode"],
        ["analyze", "--model", "lenet", "--bogus"],
        ["analyze"],
        [],
    ])
    def test_usage_errors(self, argv, capsys):
        assert run(argv) == 1
        assert "usage" in capsys.readouterr().err

    def test_bad_spec_is_validation_error(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text('{"name": "x", "input_shape": [1, 8, 8], "num_classes": 2, "layers": []}')
        assert run(["analyze", "--model", str(bad)]) == 1
        bad.write_text("{oops")
        assert run(["analyze", "--model", str(bad)]) == 1

    def test_missing_file_is_runtime_error(self, tmp_path):
        assert run(["analyze", "--model", str(tmp_path / "missing.json")]) == 2

    def test_missing_data_root(self, monkeypatch, tmp_path):
        monkeypatch.delenv("DECOMPOSEME_DATA", raising=False)
        assert run(["train", "--model", "lenet", "--epochs", "1", "--out", str(tmp_path)]) == 1


class TestTrainAndReplay:
    def test_outputs_and_replay(self, blob_spec, tmp_path, capsys):
        run_dir = tmp_path / "run1"
        assert _train(blob_spec, run_dir) == 0
        printed = capsys.readouterr().out
        metrics = (run_dir / "metrics.csv").read_text()
        assert printed == metrics
        assert metrics.splitlines()[0] == "epoch,lr,train_loss,train_top1,val_top1,gap"
        assert len(metrics.splitlines()) == 3
        assert (run_dir / "weights.dmw1").read_bytes()[:4] == b"DMW1"

        manifest = json.loads((run_dir / "manifest.json").read_text())
        assert manifest["spec_hash"] == spec_hash(load_model_spec(blob_spec))
        assert manifest["seeds"] == {"model_seed": 3, "train_seed": 3}
        assert manifest["config"]["train"]["augment"]["flip_prob"] == 0.0

        replay_dir = tmp_path / "replay"
        assert run(["replay", "--manifest", str(run_dir / "manifest.json"), "--out", str(replay_dir)]) == 0
        assert (replay_dir / "metrics.csv").read_text() == metrics
        assert (replay_dir / "weights.dmw1").read_bytes() == (run_dir / "weights.dmw1").read_bytes()

    def test_bundle(self, blob_spec, tmp_path):
        assert _train(blob_spec, tmp_path / "run", "--bundle") == 0
        assert (tmp_path / "run" / "run.zip").is_file()

    def test_eval_and_decompose_equivalence(self, blob_spec, tmp_path, capsys):
        run_dir = tmp_path / "run"
        assert _train(blob_spec, run_dir) == 0
        dec_dir = tmp_path / "dec"
        assert run(["decompose", "--model", blob_spec, "--weights", str(run_dir / "weights.dmw1"),
                    "--rank", "full", "--out", str(dec_dir)]) == 0
        assert parse_model_spec((dec_dir / "model.json").read_text()).layers[0].kind == "decomposed"
        capsys.readouterr()

        logits = []
        for spec, weights, out in [(blob_spec, run_dir / "weights.dmw1", tmp_path / "e1"),
                                   (str(dec_dir / "model.json"), dec_dir / "weights.dmw1", tmp_path / "e2")]:
            assert run(["eval", "--model", spec, "--weights", str(weights), "--dataset", "synth:blobs:40",
                        "--seed", "3", "--out", str(out)]) == 0
            lines = capsys.readouterr().out.splitlines()
            assert lines[0] == "model,top1,mean_per_class"
            logits.append(pd.read_csv(out / "logits.csv"))
        assert list(logits[0].columns) == ["label", "class_0", "class_1"]
        np.testing.assert_array_equal(logits[0]["label"], logits[1]["label"])
        diff = np.abs(logits[0].to_numpy(dtype=float) - logits[1].to_numpy(dtype=float)).max()
        assert diff < 1e-4


class TestSpecCommands:
    def test_decompose_structural(self, tmp_path, capsys):
        assert run(["decompose", "--model", "lenet", "--layers", "0,3", "--L", "16", "--out", str(tmp_path)]) == 0
        spec = parse_model_spec((tmp_path / "model.json").read_text())
        assert spec.name == "lenet-dec2"
        assert [layer.L for layer in spec.layers if layer.kind == "decomposed"] == [16, 16]
        assert capsys.readouterr().out.startswith("metric,a,b,ratio")

    def test_decompose_rejects_pool(self, tmp_path):
        assert run(["decompose", "--model", "lenet", "--layers", "2", "--out", str(tmp_path)]) == 1

    def test_fuse(self, tmp_path, capsys):
        assert run(["fuse", "--model", "stereo-features", "--group", "0-6", "--out", str(tmp_path)]) == 0
        printed = capsys.readouterr().out
        assert printed == (tmp_path / "model.json").read_text()
        spec = parse_model_spec(printed)
        assert spec.layers[0].kernel == 9

    def test_synth_dataset_option_shares_train_stats(self):
        train_set, val_set = load_datasets("synth:separable_bars:30", None, seed=5)
        assert (len(train_set), len(val_set)) == (30, 6)
        np.testing.assert_array_equal(val_set.mean, train_set.mean)
        assert abs(float(train_set.images.mean())) < 1e-5

    def test_synth_writes_idx(self, tmp_path):
        assert run(["synth", "--kind", "separable_bars", "--n", "20", "--seed", "2", "--out", str(tmp_path)]) == 0
        train, test = load_mnist(tmp_path)
        assert train.images.shape == (20, 1, 12, 12)
        assert len(test) == 4
