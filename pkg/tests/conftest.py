from pathlib import Path

import numpy as np
import pytest

from qrepair.data import Dataset
from qrepair.model import Layer, Model, Tensor
from qrepair.quantize import QuantizedLayer, QuantizedModel, QuantizedTensor

FIXTURES = Path(__file__).parent / "fixtures"
GOLDEN = Path(__file__).parent / "golden"


def dense_model(w, b=None, extra_relu=False, num_classes=None):
    """Single dense layer model (optionally dense+relu+identity-dense)."""
    w = np.asarray(w, dtype=np.float32)
    bias = Tensor.from_array(np.asarray(b, dtype=np.float32)) if b is not None else None
    layers = [Layer("dense", Tensor.from_array(w), bias)]
    out = w.shape[1]
    if extra_relu:
        layers.append(Layer("relu"))
        layers.append(Layer("dense", Tensor.from_array(np.eye(out, dtype=np.float32))))
    return Model(layers, (w.shape[0],), num_classes or out)


def manual_qmodel(fmodel: Model, int_weights_per_layer, scales=None) -> QuantizedModel:
    """Quantized twin of `fmodel` with hand-picked int8 codes and scales."""
    qlayers = []
    di = 0
    for layer in fmodel.layers:
        if layer.kind in ("dense", "conv2d"):
            codes = np.asarray(int_weights_per_layer[di], dtype=np.int8)
            scale = 1.0 if scales is None else scales[di]
            qw = QuantizedTensor(layer.weights.shape, codes.reshape(-1), scale)
            bias = None
            if layer.bias is not None:
                bias = Tensor(layer.bias.shape, layer.bias.data.copy())
            qlayers.append(QuantizedLayer(layer.kind, qw, bias, dict(layer.hyperparams)))
            di += 1
        else:
            qlayers.append(QuantizedLayer(layer.kind, None, None, dict(layer.hyperparams)))
    return QuantizedModel(qlayers, fmodel.input_shape, fmodel.num_classes)


def make_dataset(features, labels=None, num_classes=None) -> Dataset:
    features = np.asarray(features, dtype=np.float32)
    if labels is None:
        labels = np.zeros(len(features), dtype=np.int64)
    num_classes = num_classes or int(np.max(labels)) + 1
    return Dataset(features, np.asarray(labels), num_classes)


def grid_mlp(rng: np.random.Generator, dims=(6, 5, 4)) -> Model:
    """MLP whose weights are multiples of 2^-6 with max exactly 127*2^-6.

    Such weights sit exactly on the quantization grid: int8 round-trip
    reproduces them bit for bit.
    """
    step = 2.0**-6
    layers = []
    for d_in, d_out in zip(dims, dims[1:]):
        codes = rng.integers(-127, 128, size=(d_in, d_out)).astype(np.float64)
        codes.reshape(-1)[0] = 127  # pin the per-tensor max so S = step exactly
        w = (codes * step).astype(np.float32)
        b = (rng.integers(-64, 65, size=d_out) * step).astype(np.float32)
        layers.append(Layer("dense", Tensor.from_array(w), Tensor.from_array(b)))
        if d_out != dims[-1]:
            layers.append(Layer("relu"))
    return Model(layers, (dims[0],), dims[-1])


def make_desk_parts(spec, seed=4242):
    """Trained MLP + sign-flip-damaged quantized twin + repair/val splits."""
    from qrepair.experiment import damaged_quantized_model, make_blobs, train_mlp

    root = np.random.SeedSequence(seed)
    ss_data, ss_train, ss_damage = root.spawn(3)
    n = spec.n_train + spec.n_repair + spec.n_val
    total = make_blobs(np.random.default_rng(ss_data), spec, n)
    train = total.subset(range(spec.n_train))
    repair_set = total.subset(range(spec.n_train, spec.n_train + spec.n_repair))
    val = total.subset(range(spec.n_train + spec.n_repair, n))
    fmodel = train_mlp(np.random.default_rng(ss_train), train, spec)
    qmodel, acc_f, acc_q = damaged_quantized_model(fmodel, val, repair_set, ss_damage)
    return fmodel, qmodel, repair_set, val


@pytest.fixture
def conv3_model():
    from qrepair.model import load_model

    return load_model(FIXTURES / "conv3.json")


@pytest.fixture
def conv3_val():
    from qrepair.data import load_dataset

    return load_dataset(FIXTURES / "conv3_val.csv", num_classes=10)
