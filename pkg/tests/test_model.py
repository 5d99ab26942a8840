import json

import numpy as np
import pytest

from conftest import dense_model
from oracles import dense_status_oracle, loop_forward
from qrepair.model import (
    Layer,
    Model,
    ModelFormatError,
    ShapeMismatchError,
    Tensor,
    argmax_label,
    capture_activations,
    forward,
    load_model,
    save_model,
)


def test_load_minimal_identity(tmp_path):
    obj = {
        "input_shape": [2],
        "num_classes": 2,
        "layers": [
            {"kind": "dense", "weights": {"shape": [2, 2], "data": [1, 0, 0, 1]}}
        ],
    }
    path = tmp_path / "m.json"
    path.write_text(json.dumps(obj))
    model = load_model(path)
    assert len(model.layers) == 1
    assert model.layers[0].kind == "dense"


def test_load_shape_mismatch(tmp_path):
    obj = {
        "input_shape": [3],
        "num_classes": 2,
        "layers": [
            {"kind": "dense", "weights": {"shape": [3, 2], "data": [0] * 6}},
            {"kind": "dense", "weights": {"shape": [5, 2], "data": [0] * 10}},
        ],
    }
    path = tmp_path / "m.json"
    path.write_text(json.dumps(obj))
    with pytest.raises(ShapeMismatchError):
        load_model(path)


def test_load_malformed_json(tmp_path):
    path = tmp_path / "m.json"
    path.write_text("{not json")
    with pytest.raises(ModelFormatError):
        load_model(path)


def test_conv3_fixture_layer_count(conv3_model):
    assert len(conv3_model.layers) == 6
    kinds = [l.kind for l in conv3_model.layers]
    assert kinds == ["conv2d", "conv2d", "conv2d", "flatten", "dense", "dense"]


def test_forward_identity():
    model = dense_model(np.eye(2), np.zeros(2))
    out = forward(model, np.array([1.5, -2.0], dtype=np.float32))
    assert out.data.tolist() == [1.5, -2.0]


def test_forward_affine_relu():
    # Wx+b = [-2, 3], so post-relu is [0, 3]
    model = dense_model(np.eye(2), np.ones(2), extra_relu=True)
    out = forward(model, np.array([-3.0, 2.0], dtype=np.float32))
    assert out.data.tolist() == [0.0, 3.0]


def test_forward_deterministic():
    rng = np.random.default_rng(42)
    model = Model(
        [
            Layer("dense", Tensor.from_array(rng.normal(size=(4, 5)).astype(np.float32))),
            Layer("relu"),
            Layer("dense", Tensor.from_array(rng.normal(size=(5, 3)).astype(np.float32))),
        ],
        (4,),
        3,
    )
    x = rng.normal(size=4).astype(np.float32)
    first = forward(model, x).data
    for _ in range(10):
        assert np.array_equal(forward(model, x).data, first)


def test_forward_wrong_input_shape():
    model = dense_model(np.eye(2))
    with pytest.raises(ShapeMismatchError):
        forward(model, np.zeros(3, dtype=np.float32))


def test_capture_status_sign_convention():
    # dense pre-activation [0.1, -0.2, 0.0] -> status [1, 0, 0]; zero is off
    model = dense_model(np.eye(3), np.array([0.1, -0.2, 0.0]))
    (rec,) = capture_activations(model, np.zeros(3, dtype=np.float32), {0})
    assert rec.status.tolist() == [1, 0, 0]
    assert rec.pre_activation.data.tolist() == pytest.approx([0.1, -0.2, 0.0])


def test_capture_two_neuron_hand_case():
    # weights [[1, -1]]: input [2] gives pre [2, -2] -> status [1, 0]
    model = dense_model(np.array([[1.0, -1.0]]))
    (rec,) = capture_activations(model, np.array([2.0], dtype=np.float32), {0})
    assert rec.status.tolist() == [1, 0]


def test_capture_repeatable():
    model = dense_model(np.eye(3), np.array([0.5, -0.5, 0.0]))
    x = np.array([1.0, 2.0, -1.0], dtype=np.float32)
    a = capture_activations(model, x, {0})
    b = capture_activations(model, x, {0})
    assert np.array_equal(a[0].status, b[0].status)
    assert np.array_equal(a[0].pre_activation.data, b[0].pre_activation.data)


def test_capture_rejects_bad_layers():
    model = dense_model(np.eye(2), extra_relu=True)
    with pytest.raises(IndexError):
        capture_activations(model, np.zeros(2, dtype=np.float32), {9})
    with pytest.raises(ValueError):
        capture_activations(model, np.zeros(2, dtype=np.float32), {1})  # relu


def test_capture_conv_layer_status(conv3_model):
    rng = np.random.default_rng(14)
    x = rng.normal(size=(8, 8, 1)).astype(np.float32)
    (rec,) = capture_activations(conv3_model, x, {0})
    w = conv3_model.layers[0].weights.array()
    b = conv3_model.layers[0].bias.array()
    kh, kw, _, oc = w.shape
    out = np.zeros((6, 6, oc))
    for i in range(6):
        for j in range(6):
            for o in range(oc):
                out[i, j, o] = np.sum(x[i : i + kh, j : j + kw, :] * w[:, :, :, o]) + b[o]
    assert rec.pre_activation.shape == (6, 6, oc)
    safe = np.abs(out.reshape(-1)) > 1e-5  # skip float32-vs-float64 knife edges
    assert np.array_equal(rec.status[safe], (out.reshape(-1) > 0)[safe])


def test_capture_multiple_layers_ordered(conv3_model):
    x = np.zeros((8, 8, 1), dtype=np.float32)
    records = capture_activations(conv3_model, x, {4, 0, 2})
    assert [r.layer_index for r in records] == [0, 2, 4]


def test_capture_status_matches_matmul_oracle():
    # values on a 0.25 grid make float32 sums exact, so statuses must agree
    rng = np.random.default_rng(7)
    for _ in range(100):
        d_in = int(rng.integers(1, 8))
        d_out = int(rng.integers(1, 8))
        w = (rng.integers(-8, 9, size=(d_in, d_out)) * 0.25).astype(np.float32)
        b = (rng.integers(-8, 9, size=d_out) * 0.25).astype(np.float32)
        x = (rng.integers(-8, 9, size=d_in) * 0.25).astype(np.float32)
        model = dense_model(w, b)
        (rec,) = capture_activations(model, x, {0})
        assert np.array_equal(rec.status, dense_status_oracle(w, b, x))


@pytest.mark.parametrize(
    "logits,expected",
    [([0.1, 0.9, 0.3], 1), ([0.5, 0.5], 0), ([-1.0, -2.0, -3.0], 0)],
)
def test_argmax_label(logits, expected):
    assert argmax_label(np.array(logits)) == expected


def test_argmax_empty():
    with pytest.raises(ValueError):
        argmax_label(np.array([]))


def test_forward_matches_loop_oracle_random_models():
    rng = np.random.default_rng(11)
    for _ in range(50):
        depth = int(rng.integers(1, 5))
        dims = [int(d) for d in rng.integers(2, 7, size=depth + 1)]
        layers = []
        for li, (a, b) in enumerate(zip(dims, dims[1:])):
            layers.append(
                Layer(
                    "dense",
                    Tensor.from_array(rng.normal(size=(a, b)).astype(np.float32)),
                    Tensor.from_array(rng.normal(size=b).astype(np.float32)),
                )
            )
            if li != depth - 1:
                layers.append(Layer("relu"))
        model = Model(layers, (dims[0],), dims[-1])
        x = rng.normal(size=dims[0]).astype(np.float32)
        got = forward(model, x).data
        want = loop_forward(model, x)
        np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-6)


def test_conv_and_pool_match_loop_oracle(conv3_model):
    rng = np.random.default_rng(3)
    x = rng.normal(size=(8, 8, 1)).astype(np.float32)
    got = forward(conv3_model, x).data
    want = loop_forward(conv3_model, x)
    np.testing.assert_allclose(got, want, rtol=1e-4, atol=1e-5)

    pooled = Model(
        [
            Layer("conv2d", conv3_model.layers[0].weights, conv3_model.layers[0].bias),
            Layer("maxpool2d"),
            Layer("flatten"),
            Layer("dense", Tensor.from_array(rng.normal(size=(36, 3)).astype(np.float32))),
        ],
        (8, 8, 1),
        3,
    )
    np.testing.assert_allclose(
        forward(pooled, x).data, loop_forward(pooled, x), rtol=1e-4, atol=1e-5
    )


def test_final_layer_must_be_dense():
    with pytest.raises(ShapeMismatchError):
        Model([Layer("relu")], (2,), 2)
    with pytest.raises(ShapeMismatchError):
        # final dense width disagrees with num_classes
        dense_model(np.eye(2), num_classes=5)


def test_save_load_roundtrip(tmp_path, conv3_model):
    path = tmp_path / "copy.json"
    save_model(conv3_model, path)
    again = load_model(path)
    assert len(again.layers) == len(conv3_model.layers)
    for a, b in zip(again.layers, conv3_model.layers):
        assert a.kind == b.kind
        if a.weights is not None:
            assert np.array_equal(a.weights.data, b.weights.data)


def test_sidecar_binary_tensor(tmp_path):
    w = np.array([[0.5, -1.5], [2.0, 0.25]], dtype=np.float32)
    (tmp_path / "w.bin").write_bytes(w.reshape(-1).astype("<f4").tobytes())
    obj = {
        "input_shape": [2],
        "num_classes": 2,
        "layers": [
            {"kind": "dense", "weights": {"shape": [2, 2], "data_file": "w.bin"}}
        ],
    }
    (tmp_path / "m.json").write_text(json.dumps(obj))
    model = load_model(tmp_path / "m.json")
    assert np.array_equal(model.layers[0].weights.array(), w)


def test_tensor_invariants():
    with pytest.raises(ShapeMismatchError):
        Tensor((3,), np.zeros(2))
    with pytest.raises(ValueError):
        Tensor((2,), np.array([1.0, np.nan]))


def test_concurrent_inference_safe(conv3_model):
    from concurrent.futures import ThreadPoolExecutor

    rng = np.random.default_rng(8)
    xs = [rng.normal(size=(8, 8, 1)).astype(np.float32) for _ in range(16)]
    expected = [forward(conv3_model, x).data for x in xs]
    with ThreadPoolExecutor(max_workers=8) as pool:
        got = list(pool.map(lambda x: forward(conv3_model, x).data, xs))
    for e, g in zip(expected, got):
        assert np.array_equal(e, g)
