"""Accuracy and model-agreement (fidelity) measurement."""

from __future__ import annotations

from dataclasses import dataclass

from .model import Model, argmax_label, forward
from .quantize import QuantizedModel, quantized_forward


@dataclass
class EvalResult:
    dataset_id: str
    n: int
    correct: int
    accuracy: float
    fidelity: float | None = None


def predict(model, x) -> int:
    """argmax label through either a float or a quantized model."""
    if isinstance(model, Model):
        return argmax_label(forward(model, x))
    if isinstance(model, QuantizedModel):
        return argmax_label(quantized_forward(model, x))
    raise TypeError(f"cannot run inference on {type(model).__name__}")


def accuracy(model, dataset, dataset_id: str = "", reference=None) -> EvalResult:
    """Fraction of dataset rows whose predicted label matches the stored label.

    When `reference` is given, the result also carries the fidelity between
    `model` and the reference on the same inputs.
    """
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    shape = model.input_shape
    correct = 0
    for i in range(len(dataset)):
        if predict(model, dataset.input_array(i, shape)) == int(dataset.labels[i]):
            correct += 1
    fid = fidelity(model, reference, dataset) if reference is not None else None
    return EvalResult(dataset_id, len(dataset), correct, correct / len(dataset), fid)


def fidelity(model_a, model_b, dataset) -> float:
    """Fraction of inputs on which the two models emit the same label.

    Computed as (n - k)/n where k counts label disagreements; symmetric in
    its model arguments and independent of dataset labels.
    """
    if len(dataset) == 0:
        raise ValueError("cannot evaluate fidelity on an empty dataset")
    shape = model_a.input_shape
    k = 0
    for i in range(len(dataset)):
        x = dataset.input_array(i, shape)
        if predict(model_a, x) != predict(model_b, x):
            k += 1
    n = len(dataset)
    return (n - k) / n
