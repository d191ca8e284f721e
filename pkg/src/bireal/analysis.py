"""Memory and FLOPs accounting for a network spec.

Memory: 32 bits per real-valued parameter (stem conv, classifier, 1x1
shortcut convs, BN gamma/beta) plus 1 bit per binarized conv weight.

FLOPs: multiplications only (output elements x fan-in) for every conv and
FC layer. Real layers count in full; binarized layers count 1/64 since
XNOR + popcount handles 64 positions per instruction. BN, bias, pooling
and additions are not counted.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from fractions import Fraction

from .model import NetworkSpec, layer_plan

BINARY_LANES = 64


@dataclass(frozen=True)
class CostRow:
    name: str
    real_params: int
    binary_params: int
    memory_bits: int
    real_flops: int
    binary_ops: int

    @property
    def flops(self) -> Fraction:
        return self.real_flops + Fraction(self.binary_ops, BINARY_LANES)


@dataclass
class CostReport:
    spec_name: str
    rows: list[CostRow]
    baseline_name: str | None = None
    baseline_memory_bits: int | None = None
    baseline_flops: Fraction | None = None
    totals: dict = field(init=False)

    def __post_init__(self):
        self.totals = {
            "real_params": sum(r.real_params for r in self.rows),
            "binary_params": sum(r.binary_params for r in self.rows),
            "memory_bits": sum(r.memory_bits for r in self.rows),
            "real_flops": sum(r.real_flops for r in self.rows),
            "binary_ops": sum(r.binary_ops for r in self.rows),
        }

    @property
    def memory_bits(self) -> int:
        return self.totals["memory_bits"]

    @property
    def flops(self) -> Fraction:
        return self.totals["real_flops"] + Fraction(self.totals["binary_ops"], BINARY_LANES)

    @property
    def memory_saving_ratio(self) -> float | None:
        if self.baseline_memory_bits is None:
            return None
        return float(Fraction(self.baseline_memory_bits, self.memory_bits))

    @property
    def speedup_ratio(self) -> float | None:
        if self.baseline_flops is None:
            return None
        return float(self.baseline_flops / self.flops)

    def summary(self) -> dict:
        return {
            "spec": self.spec_name,
            **self.totals,
            "memory_mbit": self.memory_bits / 1e6,
            "flops": float(self.flops),
            "baseline": self.baseline_name,
            "baseline_memory_mbit": None if self.baseline_memory_bits is None else self.baseline_memory_bits / 1e6,
            "baseline_flops": None if self.baseline_flops is None else float(self.baseline_flops),
            "memory_saving_ratio": self.memory_saving_ratio,
            "speedup_ratio": self.speedup_ratio,
        }

    def records(self):
        """Line-delimited machine-readable records: one per layer, then totals."""
        for r in self.rows:
            yield {"type": "layer", "spec": self.spec_name, **asdict(r)}
        yield {"type": "total", **self.summary()}

    def table(self) -> str:
        head = f"{'layer':<18}{'real':>12}{'binary':>12}{'mem bits':>14}{'real FLOPs':>16}{'1-bit ops':>16}"
        lines = [f"cost report: {self.spec_name}", head, "-" * len(head)]
        for r in self.rows:
            lines.append(
                f"{r.name:<18}{r.real_params:>12,}{r.binary_params:>12,}{r.memory_bits:>14,}"
                f"{r.real_flops:>16,}{r.binary_ops:>16,}"
            )
        t = self.totals
        lines.append("-" * len(head))
        lines.append(
            f"{'total':<18}{t['real_params']:>12,}{t['binary_params']:>12,}{t['memory_bits']:>14,}"
            f"{t['real_flops']:>16,}{t['binary_ops']:>16,}"
        )
        lines.append(f"memory usage: {self.memory_bits / 1e6:.1f} Mbit")
        lines.append(f"FLOPs: {float(self.flops):.3e}")
        if self.baseline_name is not None:
            lines.append(
                f"vs {self.baseline_name}: {self.baseline_memory_bits / 1e6:.1f} Mbit, "
                f"{float(self.baseline_flops):.3e} FLOPs"
            )
            lines.append(f"memory saving: {self.memory_saving_ratio:.2f}x   speedup: {self.speedup_ratio:.2f}x")
        return "\n".join(lines)


def _rows(spec: NetworkSpec) -> list[CostRow]:
    rows = []
    for layer in layer_plan(spec):
        n = layer.n_params
        if layer.kind == "maxpool":
            continue
        if layer.binary:
            rows.append(CostRow(layer.name, 0, n, n, 0, layer.mults))
        else:
            rows.append(CostRow(layer.name, n, 0, 32 * n, layer.mults, 0))
    return rows


def memory_bits(spec: NetworkSpec) -> CostReport:
    return CostReport(spec.name, _rows(spec))


flops = memory_bits  # both columns come from the same per-layer pass


def analyze(spec: NetworkSpec, baseline: NetworkSpec | None = None, baseline_name=None) -> CostReport:
    """Cost report with savings against ``baseline`` (default: the
    full-precision twin of ``spec``)."""
    if baseline is None:
        baseline = spec.full_precision()
        baseline_name = baseline_name or f"{spec.name} full-precision"
    base = CostReport(baseline.name, _rows(baseline))
    return CostReport(
        spec.name,
        _rows(spec),
        baseline_name=baseline_name or baseline.name,
        baseline_memory_bits=base.memory_bits,
        baseline_flops=base.flops,
    )


def compare(spec_a: NetworkSpec, spec_b: NetworkSpec) -> dict:
    """Ratios a/b of the totals."""
    a, b = memory_bits(spec_a), memory_bits(spec_b)

    def ratio(x, y):
        return float(Fraction(x) / Fraction(y)) if y else (1.0 if x == y else float("inf"))

    out = {k: ratio(a.totals[k], b.totals[k]) for k in a.totals}
    out["flops"] = ratio(a.flops, b.flops)
    return out
