"""End-to-end repair: spectra, ranking, per-neuron LP solve, weight patching.

The pipeline classifies the repair set, builds the activation-difference
spectra for the target dense layer once, ranks neurons by the configured
metric, then walks the top-N neurons solving each one's correction LP and
patching the solved deltas in. Constraint inputs come from the pre-repair
model by default, so neuron repairs commute; `recompute_inputs` re-derives
them from the patched model instead (sequential).
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .evaluate import accuracy, fidelity
from .localize import (
    SpectraCounters,
    accumulate_spectra,
    build_diff_matrix,
    classify_tests,
    importance_scores,
    rank_neurons,
)
from .lp import EmptyLPError, build_neuron_lp, export_lp, solve_lp
from .model import Model
from .quantize import (
    QuantizedModel,
    QuantizedTensor,
    check_same_topology,
    clone_quantized,
    dequantize,
    quantize_values,
    INT8_MAX,
)

log = logging.getLogger("qrepair")

PATCH_MODES = ("float_patch", "requantize")


@dataclass
class RepairConfig:
    target_layer: int | None = None  # default: last dense layer
    metric: str = "dstar"
    top_n: int = 10
    epsilon: float = 1e-3
    time_budget: float = 60.0
    patch_mode: str = "float_patch"
    accuracy_threshold: float | None = None
    max_constraints: int = 64
    recompute_inputs: bool = False
    dstar_exponent: int = 2
    delta_bound: float | None = None  # optional |delta| box fed to the LP
    workers: int = 1
    lp_dir: str | None = None

    def __post_init__(self):
        if self.top_n < 1:
            raise ValueError("top_n must be >= 1")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.patch_mode not in PATCH_MODES:
            raise ValueError(f"patch_mode must be one of {PATCH_MODES}")


@dataclass
class NeuronRecord:
    neuron: int
    rank: int
    importance: float
    status: str  # optimal | infeasible | timeout | skipped
    M: float | None = None
    wall_time: float = 0.0  # informational; kept out of the canonical JSON


@dataclass
class RepairReport:
    target_layer: int
    metric: str
    records: list[NeuronRecord] = field(default_factory=list)
    n_failing: int = 0
    n_passing: int = 0
    accuracy_before: float | None = None
    accuracy_after: float | None = None
    fidelity_before: float | None = None
    fidelity_after: float | None = None
    early_stopped: bool = False
    warning: str | None = None

    @property
    def attempts(self) -> int:
        return len(self.records)

    def count(self, status: str) -> int:
        return sum(1 for r in self.records if r.status == status)

    def counts(self) -> dict:
        return {s: self.count(s) for s in ("optimal", "infeasible", "timeout", "skipped")}

    def to_dict(self) -> dict:
        return {
            "target_layer": self.target_layer,
            "metric": self.metric,
            "n_failing": self.n_failing,
            "n_passing": self.n_passing,
            "attempts": self.attempts,
            "counts": self.counts(),
            "accuracy_before": round6(self.accuracy_before),
            "accuracy_after": round6(self.accuracy_after),
            "fidelity_before": round6(self.fidelity_before),
            "fidelity_after": round6(self.fidelity_after),
            "early_stopped": self.early_stopped,
            "warning": self.warning,
            "neurons": [
                {
                    "neuron": r.neuron,
                    "rank": r.rank,
                    "importance": round6(r.importance),
                    "status": r.status,
                    "M": round6(r.M),
                }
                for r in self.records
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def table(self) -> str:
        lines = [
            f"target layer {self.target_layer}  metric {self.metric}",
            f"failing {self.n_failing}  passing {self.n_passing}",
            f"{'neuron':>6} {'rank':>4} {'importance':>12} {'status':>10}"
            f" {'M':>12} {'time_s':>8}",
        ]
        for r in self.records:
            m_txt = f"{r.M:.6g}" if r.M is not None else "-"
            lines.append(
                f"{r.neuron:>6} {r.rank:>4} {r.importance:>12.6g} {r.status:>10}"
                f" {m_txt:>12} {r.wall_time:>8.3f}"
            )
        c = self.counts()
        lines.append(
            f"solved {c['optimal']}  infeasible {c['infeasible']}"
            f"  timeout {c['timeout']}  skipped {c['skipped']}"
        )
        if self.accuracy_before is not None:
            lines.append(
                f"accuracy {self.accuracy_before:.6g} -> {self.accuracy_after:.6g}"
                f"   fidelity {self.fidelity_before:.6g} -> {self.fidelity_after:.6g}"
            )
        if self.warning:
            lines.append(f"warning: {self.warning}")
        return "\n".join(lines) + "\n"


def round6(x):
    """Round to 6 significant digits for stable emitted JSON."""
    if x is None:
        return None
    return float(f"{float(x):.6g}")


def apply_deltas(qmodel: QuantizedModel, neuron: tuple[int, int], deltas,
                 patch_mode: str = "float_patch") -> None:
    """Add solved deltas onto one neuron's incoming weights, in place.

    float_patch stores the corrected column at full precision (the layer
    becomes mixed precision); requantize folds the correction in and
    re-quantizes the whole tensor with a fresh per-tensor scale.
    """
    layer_index, neuron_index = neuron
    layer = qmodel.layers[layer_index]
    if layer.kind != "dense":
        raise ValueError(f"layer {layer_index} is not dense")
    deltas = np.asarray(deltas, dtype=np.float64)
    if deltas.shape != (layer.eff_weights.shape[0],):
        raise ValueError(
            f"expected {layer.eff_weights.shape[0]} deltas, got {deltas.shape}"
        )
    base = dequantize(layer.qweights).array()[:, neuron_index]
    corrected = base + deltas
    if patch_mode == "float_patch":
        layer.eff_weights[:, neuron_index] = corrected.astype(np.float32)
        layer.patched_columns.add(neuron_index)
    elif patch_mode == "requantize":
        full = layer.eff_weights.astype(np.float64)
        full[:, neuron_index] = corrected
        peak = float(np.max(np.abs(full)))
        scale = peak / INT8_MAX if peak > 0 else 1.0
        layer.qweights = QuantizedTensor(
            layer.qweights.shape, quantize_values(full.reshape(-1), scale), scale
        )
        layer.eff_weights = dequantize(layer.qweights).array().astype(np.float32)
        layer.patched_columns.clear()
    else:
        raise ValueError(f"unknown patch_mode {patch_mode!r}")


def repair(fmodel: Model, qmodel: QuantizedModel, repair_set, validation_set,
           config: RepairConfig, neuron_order: list[int] | None = None
           ) -> tuple[QuantizedModel, RepairReport]:
    """Run the repair pipeline; returns the patched model and its report.

    `neuron_order` overrides the metric ranking (used by the random-selection
    baseline); importance values are then reported as 0.
    """
    check_same_topology(fmodel, qmodel)
    target = config.target_layer if config.target_layer is not None else fmodel.last_dense_index()
    if fmodel.layers[target].kind != "dense":
        raise ValueError(f"target layer {target} is not dense")

    patched = clone_quantized(qmodel)
    report = RepairReport(target_layer=target, metric=config.metric)

    if validation_set is not None and len(validation_set):
        report.accuracy_before = accuracy(patched, validation_set).accuracy
        report.fidelity_before = fidelity(fmodel, patched, validation_set)

    outcomes = classify_tests(fmodel, patched, repair_set)
    report.n_failing = sum(1 for o in outcomes if o.is_failing)
    report.n_passing = len(outcomes) - report.n_failing
    if report.n_failing == 0:
        report.warning = "no failing tests in the repair set; nothing to repair"
        log.warning(report.warning)
        report.accuracy_after = report.accuracy_before
        report.fidelity_after = report.fidelity_before
        return patched, report

    width = fmodel.layers[target].weights.shape[1]
    if neuron_order is not None:
        order = list(neuron_order)
        by_neuron = {n: 0.0 for n in order}
    else:
        diff = build_diff_matrix(fmodel, patched, repair_set, target)
        counters: SpectraCounters = accumulate_spectra(diff, outcomes)
        scores = importance_scores(counters, config.metric, config.dstar_exponent)
        order = rank_neurons(scores)
        by_neuron = {s.neuron_index: s.value for s in scores}
    targets = order[: min(config.top_n, width)]

    def build(neuron_index):
        # constraints come from the pre-repair model unless recompute_inputs
        # asks for the progressively patched one
        source = patched if config.recompute_inputs else qmodel
        return build_neuron_lp(
            fmodel, source, (target, neuron_index), repair_set,
            epsilon=config.epsilon, max_constraints=config.max_constraints,
            big_M_bound=config.delta_bound, outcomes=outcomes,
        )

    def solve_one(neuron_index):
        t0 = time.monotonic()
        try:
            lp = build(neuron_index)
        except EmptyLPError:
            return None, None, time.monotonic() - t0
        if config.lp_dir is not None:
            export_lp(lp, f"{config.lp_dir}/neuron_L{target}_N{neuron_index}.lp")
        sol = solve_lp(lp, config.time_budget)
        return lp, sol, time.monotonic() - t0

    sequential = (
        config.recompute_inputs
        or config.accuracy_threshold is not None
        or config.workers <= 1
    )
    if sequential:
        solved = {}
        for n in targets:
            solved[n] = solve_one(n)
            lp, sol, _ = solved[n]
            if sol is not None and sol.status == "optimal":
                apply_deltas(patched, (target, n), sol.deltas, config.patch_mode)
                if config.accuracy_threshold is not None and validation_set is not None:
                    running = accuracy(patched, validation_set).accuracy
                    if running > config.accuracy_threshold:
                        report.early_stopped = True
            _record(report, n, by_neuron[n], targets, solved[n])
            if report.early_stopped:
                break
    else:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            futures = {n: pool.submit(solve_one, n) for n in targets}
            solved = {n: futures[n].result() for n in targets}
        for n in targets:
            lp, sol, _ = solved[n]
            if sol is not None and sol.status == "optimal":
                apply_deltas(patched, (target, n), sol.deltas, config.patch_mode)
            _record(report, n, by_neuron[n], targets, solved[n])

    if validation_set is not None and len(validation_set):
        report.accuracy_after = accuracy(patched, validation_set).accuracy
        report.fidelity_after = fidelity(fmodel, patched, validation_set)
    return patched, report


def _record(report, neuron_index, importance_value, targets, solved_entry):
    lp, sol, wall = solved_entry
    rank = targets.index(neuron_index) + 1
    if sol is None:
        report.records.append(
            NeuronRecord(neuron_index, rank, importance_value, "skipped", None, wall)
        )
    else:
        report.records.append(
            NeuronRecord(neuron_index, rank, importance_value, sol.status, sol.M, wall)
        )
