"""Multi-branch activation quantizers for differentiable bit selection.

A searched layer owns one :class:`BranchSet`: B candidate bit-widths, one
step size per branch and a vector of architectural parameters (alphas).
Weights are never duplicated across branches.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .autograd import Tensor, custom_grad
from .functional import softmax, softmax_array
from .quant import QuantSpec, quantize

DEFAULT_MOBILENET_CANDIDATES = (8, 4, 3)
DEFAULT_RESNET_CANDIDATES = (8, 4, 2)


class BranchSet:
    """Candidate bit-widths, per-branch quantizers and alphas of one layer.

    ``candidates`` holds activation bit-widths, or ``(act_bits, weight_bits)``
    pairs in pair mode, in which case each branch also owns a signed weight
    quantizer over the shared full-precision weight.
    """

    def __init__(self, candidates: Sequence, signed: bool = False, name: str | None = None):
        candidates = list(candidates)
        if not candidates:
            raise ValueError("a branch set needs at least one candidate")
        self.pair_mode = isinstance(candidates[0], (tuple, list))
        if self.pair_mode:
            candidates = [(int(a), int(w)) for a, w in candidates]
        else:
            candidates = [int(b) for b in candidates]
        self.candidates = candidates
        self.name = name
        self.alphas = Tensor(np.zeros(len(candidates)), requires_grad=True, name=f"{name}.alphas")
        self.branch_specs = [QuantSpec(self.act_bits(i), signed=signed) for i in range(self.B)]
        self.weight_specs = (
            [QuantSpec(self.weight_bits(i), signed=True) for i in range(self.B)]
            if self.pair_mode else None
        )

    @property
    def B(self) -> int:
        return len(self.candidates)

    def act_bits(self, i: int) -> int:
        c = self.candidates[i]
        return c[0] if self.pair_mode else c

    def weight_bits(self, i: int) -> int | None:
        return self.candidates[i][1] if self.pair_mode else None

    def probabilities(self) -> np.ndarray:
        return softmax_array(np.asarray(self.alphas.data, dtype=np.float64))

    def steps(self) -> list[Tensor]:
        specs = list(self.branch_specs) + list(self.weight_specs or [])
        return [s.step for s in specs]

    def __repr__(self) -> str:
        return f"BranchSet(name={self.name!r}, candidates={self.candidates})"


def mix_forward(x, bs: BranchSet, n_features: int | None = None) -> Tensor:
    """Softmax(alpha)-weighted sum of the branch-quantized activations."""
    p = softmax(bs.alphas)
    out = None
    for i, spec in enumerate(bs.branch_specs):
        term = p[i] * quantize(x, spec, n_features)
        out = term if out is None else out + term
    return out


def meta_forward(x, bs: BranchSet, i: int, n_features: int | None = None) -> Tensor:
    """Quantize with branch ``i`` alone; alphas are not touched."""
    if not 0 <= i < bs.B:
        raise IndexError(f"branch index {i} out of range for {bs.B} branches")
    return quantize(x, bs.branch_specs[i], n_features)


def _onehot_argmax(a: np.ndarray) -> np.ndarray:
    out = np.zeros_like(a)
    out[np.argmax(a)] = 1.0
    return out


def _softmax_vjp(g: np.ndarray, a: np.ndarray):
    p = softmax_array(a)
    return (p * (g - np.dot(g, p)),)


_hard_softmax = custom_grad(_onehot_argmax, _softmax_vjp)


def hard_softmax(alphas) -> Tensor:
    """One-hot argmax forward (ties to the lowest index), softmax backward."""
    return _hard_softmax(alphas)


@dataclass
class AssignmentEntry:
    layer_name: str
    bits: int
    alpha_softmax: list[float]
    weight_bits: int | None = None

    def to_dict(self) -> dict:
        d = {"layer_name": self.layer_name, "bits": self.bits, "alpha_softmax": list(self.alpha_softmax)}
        if self.weight_bits is not None:
            d["weight_bits"] = self.weight_bits
        return d


def finalize(bs: BranchSet, layer_name: str | None = None) -> AssignmentEntry:
    """Pick the branch with the top softmax score (ties: lowest index)."""
    i = int(np.argmax(bs.alphas.data))
    return AssignmentEntry(
        layer_name=layer_name or bs.name,
        bits=bs.act_bits(i),
        alpha_softmax=[float(v) for v in bs.probabilities()],
        weight_bits=bs.weight_bits(i),
    )


@dataclass
class BitAssignment:
    """Chosen activation (and optionally weight) bit-width per searched layer."""

    entries: dict[str, AssignmentEntry] = field(default_factory=dict)

    @classmethod
    def from_branch_sets(cls, branch_sets: dict[str, BranchSet]) -> "BitAssignment":
        return cls({name: finalize(bs, name) for name, bs in branch_sets.items()})

    @classmethod
    def uniform(cls, layer_names: Iterable[str], bits: int, weight_bits: int | None = None):
        return cls({n: AssignmentEntry(n, int(bits), [], weight_bits) for n in layer_names})

    @classmethod
    def from_bits(cls, bits: dict[str, int]) -> "BitAssignment":
        return cls({n: AssignmentEntry(n, int(b), []) for n, b in bits.items()})

    def __getitem__(self, name: str) -> AssignmentEntry:
        try:
            return self.entries[name]
        except KeyError:
            raise KeyError(f"assignment has no entry for layer {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def bits(self) -> dict[str, int]:
        return {n: e.bits for n, e in self.entries.items()}

    def to_json(self) -> str:
        return json.dumps([e.to_dict() for e in self.entries.values()], indent=2)

    @classmethod
    def from_json(cls, text: str) -> "BitAssignment":
        rows = json.loads(text)
        if not isinstance(rows, list):
            raise ValueError("assignment JSON must be a list of layer entries")
        entries = {}
        for row in rows:
            missing = {"layer_name", "bits", "alpha_softmax"} - set(row)
            if missing:
                raise ValueError(f"assignment entry missing keys {sorted(missing)}: {row}")
            entries[row["layer_name"]] = AssignmentEntry(
                row["layer_name"], int(row["bits"]), [float(v) for v in row["alpha_softmax"]],
                row.get("weight_bits"),
            )
        return cls(entries)
