"""Operation counts, bit-operations (BOPs) and the budget regularizer.

``op_i`` is the multiply-accumulate count of layer ``i`` for one sample
(MACs, not 2 x MACs).  BOPs of a layer are ``op_i * weight_bits *
act_bits``; the first and last layers are fixed at 8/8 bits and contribute
``64 * op_i``.  Batch norm, pooling and elementwise ops cost nothing.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor, precision
from .mixsearch import BitAssignment, BranchSet, hard_softmax
from .quant import FIRST_LAST_BITS
from .zoo import ModelSpec, resolve_shapes


@dataclass
class LayerCost:
    name: str
    ops: int
    searched: bool
    depthwise: bool = False


@dataclass
class CostTable:
    layers: list[LayerCost]
    weight_bits: int = 4
    fixed_bits: tuple[int, int] = (FIRST_LAST_BITS, FIRST_LAST_BITS)

    def __post_init__(self):
        for lc in self.layers:
            if lc.ops <= 0:
                raise ValueError(f"layer {lc.name}: op count must be positive, got {lc.ops}")

    @property
    def searched(self) -> list[LayerCost]:
        return [lc for lc in self.layers if lc.searched]

    def ops(self, name: str) -> int:
        for lc in self.layers:
            if lc.name == name:
                return lc.ops
        raise KeyError(f"cost table has no layer {name!r}")

    def fixed_bops(self) -> int:
        a, w = self.fixed_bits
        return sum(lc.ops * a * w for lc in self.layers if not lc.searched)

    def total_ops(self) -> int:
        return sum(lc.ops for lc in self.layers)


@dataclass
class RegularizerCfg:
    """Budget penalty settings.

    ``unit`` divides the absolute deviation so that ``lambda_r`` can be
    expressed relative to a convenient scale (e.g. ``unit = t_bops``).
    """

    t_bops: float
    lambda_r: float = 1.0
    unit: float = 1.0

    def __post_init__(self):
        if not self.t_bops > 0:
            raise ValueError(f"t_bops must be positive, got {self.t_bops}")
        if self.lambda_r < 0:
            raise ValueError(f"lambda_r must be non-negative, got {self.lambda_r}")
        if not self.unit > 0:
            raise ValueError(f"unit must be positive, got {self.unit}")


def layer_ops(d, in_shape: tuple[int, ...], out_shape: tuple[int, ...]) -> int:
    if d.kind == "linear":
        return int(d.in_ch) * int(d.out_ch)
    out_elements = int(np.prod(out_shape))
    return out_elements * d.k * d.k * (d.in_ch // d.g)


def count_ops(spec: ModelSpec, weight_bits: int = 4) -> CostTable:
    """Exact per-sample MAC counts of every conv/linear layer in ``spec``."""
    shapes = resolve_shapes(spec)
    layers = []
    for d in spec.layer_defs():
        if d.name not in shapes:
            raise ValueError(f"layer {d.name}: shape could not be resolved")
        sh = shapes[d.name]
        layers.append(LayerCost(d.name, layer_ops(d, sh.in_shape, sh.out_shape),
                                d.role == "searched", d.depthwise))
    return CostTable(layers, weight_bits)


def _entry_bits(assignment, name: str) -> tuple[int, int | None]:
    entries = getattr(assignment, "entries", assignment)
    if name not in entries:
        raise KeyError(f"assignment has no entry for layer {name!r}")
    e = entries[name]
    if isinstance(e, (int, np.integer)):
        return int(e), None
    if isinstance(e, (tuple, list)):
        return int(e[0]), int(e[1])
    return int(e.bits), e.weight_bits


def layer_bops(ct: CostTable, lc: LayerCost, assignment) -> int:
    if not lc.searched:
        a, w = ct.fixed_bits
        return lc.ops * a * w
    a, w = _entry_bits(assignment, lc.name)
    return lc.ops * (ct.weight_bits if w is None else w) * a


def bops(ct: CostTable, assignment) -> int:
    """Total BOPs of an assignment (``{name: bits}``, pairs or BitAssignment)."""
    return sum(layer_bops(ct, lc, assignment) for lc in ct.layers)


def uniform_bops(ct: CostTable, bits: int) -> int:
    return bops(ct, {lc.name: bits for lc in ct.searched})


def resolve_budget(ct: CostTable, t_bops, candidates) -> float:
    """Accept an absolute budget or ``"ratio:<r>"`` relative to all-max-bits BOPs."""
    if isinstance(t_bops, str):
        if t_bops.startswith("ratio:"):
            top = max(c[0] if isinstance(c, (tuple, list)) else c for c in candidates)
            return float(t_bops.split(":", 1)[1]) * uniform_bops(ct, top)
        return float(t_bops)
    return float(t_bops)


def expected_cost(ct: CostTable, branch_sets: dict[str, BranchSet], hard: bool = True) -> Tensor:
    """Searched-layer cost ``sum_i op_i * b_w * sum_j hs(alpha_i)_j * b_j`` plus fixed layers.

    ``hard=True`` uses the straight-through one-hot (forward equals the
    argmax assignment); ``hard=False`` uses plain softmax weights.  Computed
    in float64 whatever the storage width, so integer costs stay exact.
    """
    from .functional import softmax

    with precision("float64"):
        return _expected_cost(ct, branch_sets, hard, softmax)


def _expected_cost(ct, branch_sets, hard, softmax) -> Tensor:
    total = Tensor(float(ct.fixed_bops()))
    for lc in ct.searched:
        if lc.name not in branch_sets:
            raise KeyError(f"no branch set for searched layer {lc.name!r}")
        bs = branch_sets[lc.name]
        w = hard_softmax(bs.alphas) if hard else softmax(bs.alphas)
        per_branch = np.array([
            lc.ops * bs.act_bits(j) * (ct.weight_bits if bs.weight_bits(j) is None else bs.weight_bits(j))
            for j in range(bs.B)
        ], dtype=np.float64)
        total = total + (w * per_branch).sum()
    return total


def regularizer(ct: CostTable, branch_sets: dict[str, BranchSet], cfg: RegularizerCfg) -> Tensor:
    """``|hard expected cost - t_bops| / unit``; gradient reaches every alpha."""
    from .functional import absolute

    cost = expected_cost(ct, branch_sets, hard=True)
    with precision("float64"):
        return absolute(cost - cfg.t_bops) * (1.0 / cfg.unit)


def soft_expected_bops(ct: CostTable, branch_sets: dict[str, BranchSet]) -> float:
    """Softmax-weighted BOPs (monitoring only)."""
    total = float(ct.fixed_bops())
    for lc in ct.searched:
        bs = branch_sets[lc.name]
        p = bs.probabilities()
        for j in range(bs.B):
            wb = ct.weight_bits if bs.weight_bits(j) is None else bs.weight_bits(j)
            total += p[j] * lc.ops * wb * bs.act_bits(j)
    return total


def cost_report(ct: CostTable, assignment) -> dict:
    """Per-layer ``{name, op_i, bits, bops}`` rows plus totals (JSON-ready)."""
    rows = []
    for lc in ct.layers:
        if lc.searched:
            a, w = _entry_bits(assignment, lc.name)
            w = ct.weight_bits if w is None else w
        else:
            a, w = ct.fixed_bits
        rows.append({"name": lc.name, "op_i": lc.ops, "bits": a, "weight_bits": w,
                     "bops": layer_bops(ct, lc, assignment)})
    searched = [r for r in rows if r["name"] in {lc.name for lc in ct.searched}]
    avg_bits = (sum(r["bits"] * r["op_i"] for r in searched) / sum(r["op_i"] for r in searched)
                if searched else 0.0)
    return {
        "layers": rows,
        "total_ops": ct.total_ops(),
        "total_bops": sum(r["bops"] for r in rows),
        "weight_bits": ct.weight_bits,
        "ops_weighted_act_bits": avg_bits,
    }


def cost_report_json(ct: CostTable, assignment) -> str:
    return json.dumps(cost_report(ct, assignment), indent=2)
