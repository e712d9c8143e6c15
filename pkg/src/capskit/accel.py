"""Analytic cycle-cost model of the PE-array accelerator.

Counting rules (frozen by golden tests):

* The PE array has `pe_count` elements, each doing `mac_width` element-wise
  16-bit multiplies into an adder tree, pipelined at `pipeline_ii`. A
  MAC-dominated step therefore costs ceil(MACs / (pe_count * mac_width)) * II
  when scheduled on the array, and MACs * mac when scalar.
* Convolutions run on the PE array in both configurations; the baseline /
  optimized distinction covers only the routing algorithm's treatment.
* Baseline routing: every step sequential and scalar, exp/div at their slow
  latencies. Optimized routing: prediction, weighted sum and agreement are
  PE-parallel; softmax runs one input capsule per PE with the fast exp/div;
  squash stays on its scalar path (its divisions still speed up).
* Per full routing run: prediction (FullyConnected) executes once, softmax /
  weighted sum / squash once per iteration, agreement on all but the last
  iteration. Reported step cycles include those multiplicities, so totals
  are plain sums.
* Softmax of an n-way coupling row: n exp, n-1 adds, n div. Squash of one
  d-dim capsule: d MACs (norm), 1 add, 2 div, 1 sqrt, d muls. The sqrt
  latency is model-derived (the source material quotes none).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .capsnet import CapsNetSpec

ROUTING_STEPS = ("FullyConnected", "Softmax", "WeightedSum", "Squash", "Agreement")


@dataclass
class CostTable:
    """Per-primitive cycle latencies; optimized exp/div must beat baselines."""

    exp_baseline: int = 27
    exp_optimized: int = 14
    div_baseline: int = 49
    div_optimized: int = 36
    mul: int = 1
    add: int = 1
    mac: int = 1
    sqrt: int = 12  # model-derived, overridable

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if value < 1:
                raise ValueError(f"{name} must be >= 1, got {value}")
        if self.exp_optimized >= self.exp_baseline:
            raise ValueError("optimized exp must cost less than baseline")
        if self.div_optimized >= self.div_baseline:
            raise ValueError("optimized div must cost less than baseline")


@dataclass
class PEArraySpec:
    """PE-array geometry: element-wise multiplies per PE, pipeline interval."""

    pe_count: int = 10
    mac_width: int = 9
    pipeline_ii: int = 1

    def __post_init__(self):
        if self.pe_count < 1 or self.mac_width < 1 or self.pipeline_ii < 1:
            raise ValueError("PE array parameters must be >= 1")

    @property
    def lanes(self) -> int:
        return self.pe_count * self.mac_width

    def array_cycles(self, macs: int) -> int:
        """Cycles to stream `macs` multiply-accumulates through the array."""
        return math.ceil(macs / self.lanes) * self.pipeline_ii


@dataclass
class StepCycles:
    baseline: int
    optimized: int


@dataclass
class CycleReport:
    """Per-routing-step latency in both configurations, plus primitives."""

    steps: dict
    costs: CostTable
    iters: int
    in_caps: int

    @property
    def baseline_total(self) -> int:
        return sum(s.baseline for s in self.steps.values())

    @property
    def optimized_total(self) -> int:
        return sum(s.optimized for s in self.steps.values())

    def total(self, optimized: bool) -> int:
        return self.optimized_total if optimized else self.baseline_total

    @property
    def softmax_reduction_pct(self) -> float:
        s = self.steps["Softmax"]
        return 100.0 * (1.0 - s.optimized / s.baseline)

    def records(self) -> list[str]:
        """Machine-readable lines, one step=...;baseline=...;optimized=... each."""
        lines = [
            f"step={name};baseline={s.baseline};optimized={s.optimized}"
            for name, s in self.steps.items()
        ]
        lines.append(
            f"step=total;baseline={self.baseline_total};optimized={self.optimized_total}"
        )
        return lines

    def format_table(self) -> str:
        rows = [f"{'step':<16}{'baseline':>12}{'optimized':>12}"]
        for name, s in self.steps.items():
            rows.append(f"{name:<16}{s.baseline:>12}{s.optimized:>12}")
        rows.append(f"{'total':<16}{self.baseline_total:>12}{self.optimized_total:>12}")
        rows.append(f"exp: {self.costs.exp_baseline} -> {self.costs.exp_optimized}")
        rows.append(f"div: {self.costs.div_baseline} -> {self.costs.div_optimized}")
        rows.append(f"softmax reduction: {self.softmax_reduction_pct:.1f}%")
        return "\n".join(rows)


def routing_cycle_report(
    spec: CapsNetSpec,
    costs: CostTable | None = None,
    pe: PEArraySpec | None = None,
) -> CycleReport:
    """Cycle counts for one full routing run, baseline and optimized columns."""
    costs = costs or CostTable()
    pe = pe or PEArraySpec()
    n_in = spec.in_caps
    n_out = spec.digit_caps
    d = spec.digit_dim
    cd = spec.caps_dim
    r = spec.routing_iters

    fc_macs = n_in * n_out * d * cd
    ws_macs = n_in * n_out * d
    ag_macs = n_in * n_out * d

    softmax_row_base = n_out * costs.exp_baseline + (n_out - 1) * costs.add + n_out * costs.div_baseline
    softmax_row_opt = n_out * costs.exp_optimized + (n_out - 1) * costs.add + n_out * costs.div_optimized
    squash_base = n_out * (d * costs.mac + costs.add + 2 * costs.div_baseline + costs.sqrt + d * costs.mul)
    squash_opt = n_out * (d * costs.mac + costs.add + 2 * costs.div_optimized + costs.sqrt + d * costs.mul)

    steps = {
        "FullyConnected": StepCycles(
            baseline=fc_macs * costs.mac,
            optimized=pe.array_cycles(fc_macs),
        ),
        "Softmax": StepCycles(
            baseline=r * n_in * softmax_row_base,
            optimized=r * math.ceil(n_in / pe.pe_count) * softmax_row_opt,
        ),
        "WeightedSum": StepCycles(
            baseline=r * ws_macs * costs.mac,
            optimized=r * pe.array_cycles(ws_macs),
        ),
        "Squash": StepCycles(
            baseline=r * squash_base,
            optimized=r * squash_opt,
        ),
        "Agreement": StepCycles(
            baseline=(r - 1) * ag_macs * costs.mac,
            optimized=(r - 1) * math.ceil(n_in / pe.pe_count) * n_out * d * pe.pipeline_ii,
        ),
    }
    return CycleReport(steps=steps, costs=costs, iters=r, in_caps=n_in)


def inference_cycles(conv_macs, report: CycleReport, pe: PEArraySpec, optimized: bool) -> int:
    """Compute-only cycles for one inference: conv on the array + routing."""
    conv = sum(pe.array_cycles(m) for m in conv_macs)
    return conv + report.total(optimized)


def throughput_estimate(
    conv_macs,
    report: CycleReport,
    pe: PEArraySpec,
    clock_hz: float,
    optimized: bool,
) -> float:
    """Frames per second: clock rate over modeled cycles per inference."""
    if clock_hz <= 0:
        raise ValueError("clock_hz must be positive")
    return clock_hz / inference_cycles(conv_macs, report, pe, optimized)
