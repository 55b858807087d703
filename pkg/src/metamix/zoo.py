"""Toy networks: declarative :class:`ModelSpec` plus a runtime :class:`Model`.

Each conv/linear layer quantizes its *input* activation (the tensor that
leaves the previous nonlinearity) and, when weight quantization is on, its
weight.  The first and last layers use fixed 8-bit quantizers; every other
layer is searched through a :class:`~metamix.mixsearch.BranchSet`.

ModelSpec text format (one record per line, ``key=value`` fields)::

    modelspec 1
    name toy_mobilenet
    input 3 32 32
    classes 10
    candidates 8 4 3
    param width=16
    block b1 residual=1 post_act=none
    layer b1.expand kind=conv in=16 out=48 k=1 s=1 p=0 g=1 bn=1 act=relu6 role=searched signed=0 pool=0
    shortcut b2.down kind=conv ...
    end
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import functional as F
from .autograd import Tensor
from .functional import BNState, conv_output_size
from .mixsearch import (
    DEFAULT_MOBILENET_CANDIDATES,
    DEFAULT_RESNET_CANDIDATES,
    BranchSet,
    meta_forward,
    mix_forward,
)
from .quant import FIRST_LAST_BITS, QuantSpec, first_last_spec, init_step, quantize

SPEC_VERSION = 1
ROLES = ("first", "searched", "last")
ACTS = ("none", "relu", "relu6")


@dataclass
class LayerDef:
    name: str
    kind: str  # "conv" or "linear"
    in_ch: int
    out_ch: int
    k: int = 1
    s: int = 1
    p: int = 0
    g: int = 1
    bn: bool = True
    act: str = "none"
    role: str = "searched"
    signed: bool = False  # signedness of the input-activation quantizer
    pool: bool = False  # global average pool before this layer

    @property
    def depthwise(self) -> bool:
        return self.kind == "conv" and self.g > 1 and self.g == self.in_ch

    def to_line(self, tag: str = "layer") -> str:
        parts = [tag, self.name]
        for f in fields(self):
            if f.name == "name":
                continue
            v = getattr(self, f.name)
            parts.append(f"{f.name}={int(v) if isinstance(v, bool) else v}")
        return " ".join(parts)

    @classmethod
    def from_tokens(cls, name: str, tokens: list[str]) -> "LayerDef":
        kw = _parse_kv(tokens)
        types = {f.name: f.type for f in fields(cls)}
        args = {}
        for key, raw in kw.items():
            if key not in types or key == "name":
                raise ValueError(f"unknown layer field {key!r} in layer {name!r}")
            t = types[key]
            if t in ("int", int):
                args[key] = int(raw)
            elif t in ("bool", bool):
                args[key] = bool(int(raw))
            else:
                args[key] = raw
        d = cls(name=name, **args)
        d.validate()
        return d

    def validate(self) -> None:
        if self.kind not in ("conv", "linear"):
            raise ValueError(f"layer {self.name}: unknown kind {self.kind!r}")
        if self.act not in ACTS:
            raise ValueError(f"layer {self.name}: unknown activation {self.act!r}")
        if self.role not in ROLES:
            raise ValueError(f"layer {self.name}: unknown role {self.role!r}")
        if min(self.in_ch, self.out_ch, self.k, self.s, self.g) < 1 or self.p < 0:
            raise ValueError(f"layer {self.name}: non-positive dimension")


@dataclass
class BlockDef:
    name: str
    layers: list[LayerDef]
    shortcut: list[LayerDef] = field(default_factory=list)
    residual: bool = False
    post_act: str = "none"


@dataclass
class ModelSpec:
    """Named layer list grouped into (optionally residual) blocks."""

    name: str
    input_shape: tuple[int, int, int]
    num_classes: int
    blocks: list[BlockDef]
    candidates: tuple = DEFAULT_MOBILENET_CANDIDATES
    params: dict = field(default_factory=dict)

    def layer_defs(self) -> list[LayerDef]:
        out = []
        for b in self.blocks:
            out.extend(b.layers)
            out.extend(b.shortcut)
        return out

    def layer(self, name: str) -> LayerDef:
        for d in self.layer_defs():
            if d.name == name:
                return d
        raise KeyError(f"no layer named {name!r}")

    def searched_layers(self) -> list[str]:
        return [d.name for d in self.layer_defs() if d.role == "searched"]

    def validate(self) -> None:
        names = [d.name for d in self.layer_defs()]
        if len(set(names)) != len(names):
            raise ValueError("duplicate layer names in model spec")
        roles = [d.role for d in self.layer_defs()]
        if roles.count("first") != 1 or roles.count("last") != 1:
            raise ValueError("model spec needs exactly one first and one last layer")
        resolve_shapes(self)

    # -- text round trip --------------------------------------------------------

    def to_text(self) -> str:
        lines = [f"modelspec {SPEC_VERSION}", f"name {self.name}",
                 "input " + " ".join(str(v) for v in self.input_shape),
                 f"classes {self.num_classes}",
                 "candidates " + " ".join(_fmt_candidate(c) for c in self.candidates)]
        if self.params:
            lines.append("param " + " ".join(f"{k}={v}" for k, v in sorted(self.params.items())))
        for b in self.blocks:
            lines.append(f"block {b.name} residual={int(b.residual)} post_act={b.post_act}")
            lines.extend(d.to_line("layer") for d in b.layers)
            lines.extend(d.to_line("shortcut") for d in b.shortcut)
        lines.append("end")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelSpec":
        lines = [ln.split("#", 1)[0].strip() for ln in text.splitlines()]
        lines = [ln for ln in lines if ln]
        if not lines or lines[0].split()[:1] != ["modelspec"]:
            raise ValueError("model spec text must start with 'modelspec <version>'")
        version = int(lines[0].split()[1])
        if version != SPEC_VERSION:
            raise ValueError(f"unsupported model spec version {version}")
        name, input_shape, classes, candidates, params = None, None, None, None, {}
        blocks: list[BlockDef] = []
        ended = False
        for ln in lines[1:]:
            tok = ln.split()
            head = tok[0]
            if ended:
                raise ValueError(f"content after 'end': {ln!r}")
            if head == "name":
                name = tok[1]
            elif head == "input":
                input_shape = tuple(int(v) for v in tok[1:4])
            elif head == "classes":
                classes = int(tok[1])
            elif head == "candidates":
                candidates = tuple(_parse_candidate(c) for c in tok[1:])
            elif head == "param":
                params = {k: _auto(v) for k, v in _parse_kv(tok[1:]).items()}
            elif head == "block":
                kv = _parse_kv(tok[2:])
                blocks.append(BlockDef(tok[1], [], [], bool(int(kv.get("residual", 0))),
                                       kv.get("post_act", "none")))
            elif head in ("layer", "shortcut"):
                if not blocks:
                    raise ValueError(f"{head} line outside a block: {ln!r}")
                d = LayerDef.from_tokens(tok[1], tok[2:])
                (blocks[-1].layers if head == "layer" else blocks[-1].shortcut).append(d)
            elif head == "end":
                ended = True
            else:
                raise ValueError(f"unknown model spec record {head!r}")
        if None in (name, input_shape, classes, candidates) or not ended:
            raise ValueError("model spec text is incomplete")
        spec = cls(name, input_shape, classes, blocks, candidates, params)
        spec.validate()
        return spec


def _fmt_candidate(c) -> str:
    return f"{c[0]}/{c[1]}" if isinstance(c, (tuple, list)) else str(c)


def _parse_candidate(tok: str):
    if "/" in tok:
        a, w = tok.split("/")
        return (int(a), int(w))
    return int(tok)


def _parse_kv(tokens: list[str]) -> dict[str, str]:
    out = {}
    for t in tokens:
        if "=" not in t:
            raise ValueError(f"expected key=value, got {t!r}")
        k, v = t.split("=", 1)
        out[k] = v
    return out


def _auto(v: str):
    for conv in (int, float):
        try:
            return conv(v)
        except ValueError:
            pass
    return v


# -- shape resolution -----------------------------------------------------------


@dataclass(frozen=True)
class LayerShape:
    in_shape: tuple[int, ...]  # per-sample (C, H, W) or (features,)
    out_shape: tuple[int, ...]


def _layer_shape(d: LayerDef, shape: tuple[int, ...]) -> tuple[tuple[int, ...], tuple[int, ...]]:
    if d.pool:
        if len(shape) != 3:
            raise ValueError(f"layer {d.name}: pooling needs a CHW input, got {shape}")
        shape = (shape[0],)
    if d.kind == "linear":
        if len(shape) != 1 or shape[0] != d.in_ch:
            raise ValueError(f"layer {d.name}: expects {d.in_ch} features, got {shape}")
        return shape, (d.out_ch,)
    if len(shape) != 3 or shape[0] != d.in_ch:
        raise ValueError(f"layer {d.name}: expects {d.in_ch} channels, got input {shape}")
    if d.in_ch % d.g or d.out_ch % d.g:
        raise ValueError(f"layer {d.name}: channels not divisible by groups={d.g}")
    h = conv_output_size(shape[1], d.k, d.s, d.p)
    w = conv_output_size(shape[2], d.k, d.s, d.p)
    if h < 1 or w < 1:
        raise ValueError(f"layer {d.name}: kernel does not fit input {shape}")
    return shape, (d.out_ch, h, w)


def resolve_shapes(spec: ModelSpec) -> dict[str, LayerShape]:
    """Per-sample input/output shape of every layer; raises on any mismatch."""
    shape: tuple[int, ...] = tuple(spec.input_shape)
    out: dict[str, LayerShape] = {}
    for b in spec.blocks:
        block_in = shape
        for d in b.layers:
            ins, shape = _layer_shape(d, shape)
            out[d.name] = LayerShape(ins, shape)
        if b.residual:
            sc = block_in
            for d in b.shortcut:
                ins, sc = _layer_shape(d, sc)
                out[d.name] = LayerShape(ins, sc)
            if sc != shape:
                raise ValueError(f"block {b.name}: residual shapes differ ({sc} vs {shape})")
        elif b.shortcut:
            raise ValueError(f"block {b.name}: shortcut layers on a non-residual block")
    if shape != (spec.num_classes,):
        raise ValueError(f"network output {shape} does not match {spec.num_classes} classes")
    return out


# -- builders -------------------------------------------------------------------


def build_toy_mobilenet(width: int = 16, num_classes: int = 10, expand: int = 3,
                        candidates=DEFAULT_MOBILENET_CANDIDATES) -> ModelSpec:
    """Stem, five inverted-residual blocks, a 1x1 head conv and a classifier.

    Input is 3x32x32; the stem has stride 2.  Each block is pointwise expand,
    depthwise 3x3, pointwise project (linear bottleneck), with an identity
    residual when shapes allow.
    """
    if int(width) != width or width < 8:
        raise ValueError(f"width must be an integer >= 8, got {width}")
    w = int(width)
    blocks = [BlockDef("stem", [LayerDef("stem.conv", "conv", 3, w, k=3, s=2, p=1, act="relu6",
                                         role="first", signed=True)])]
    # (out_ch, stride)
    config = [(w, 1), (2 * w, 2), (2 * w, 1), (4 * w, 2), (4 * w, 1)]
    cin, signed_in = w, False
    for i, (cout, stride) in enumerate(config, start=1):
        hid = cin * expand
        name = f"b{i}"
        layers = [
            LayerDef(f"{name}.expand", "conv", cin, hid, k=1, act="relu6", signed=signed_in),
            LayerDef(f"{name}.dw", "conv", hid, hid, k=3, s=stride, p=1, g=hid, act="relu6"),
            LayerDef(f"{name}.project", "conv", hid, cout, k=1, act="none"),
        ]
        residual = stride == 1 and cin == cout
        blocks.append(BlockDef(name, layers, residual=residual))
        cin, signed_in = cout, True
    head = 8 * w
    blocks.append(BlockDef("head", [
        LayerDef("head.conv", "conv", cin, head, k=1, act="relu6", signed=True),
        LayerDef("head.fc", "linear", head, num_classes, bn=False, role="last", pool=True),
    ]))
    spec = ModelSpec("toy_mobilenet", (3, 32, 32), num_classes, blocks, tuple(candidates),
                     {"width": w, "expand": expand})
    spec.validate()
    return spec


def build_toy_resnet(depth: int = 8, num_classes: int = 10, width: int = 16,
                     candidates=DEFAULT_RESNET_CANDIDATES) -> ModelSpec:
    """CIFAR-style ResNet with basic blocks; ``depth = 6n + 2``."""
    if depth < 8 or (depth - 2) % 6:
        raise ValueError(f"depth must be 6n+2 with n >= 1, got {depth}")
    if width < 4:
        raise ValueError(f"width must be >= 4, got {width}")
    n = (depth - 2) // 6
    blocks = [BlockDef("stem", [LayerDef("stem.conv", "conv", 3, width, k=3, p=1, act="relu",
                                         role="first", signed=True)])]
    cin = width
    idx = 0
    for stage, mult in enumerate((1, 2, 4)):
        cout = width * mult
        for j in range(n):
            idx += 1
            stride = 2 if stage > 0 and j == 0 else 1
            name = f"r{idx}"
            layers = [
                LayerDef(f"{name}.conv1", "conv", cin, cout, k=3, s=stride, p=1, act="relu"),
                LayerDef(f"{name}.conv2", "conv", cout, cout, k=3, p=1, act="none"),
            ]
            shortcut = []
            if stride != 1 or cin != cout:
                shortcut = [LayerDef(f"{name}.down", "conv", cin, cout, k=1, s=stride)]
            blocks.append(BlockDef(name, layers, shortcut, residual=True, post_act="relu"))
            cin = cout
    blocks.append(BlockDef("head", [LayerDef("head.fc", "linear", cin, num_classes, bn=False,
                                             role="last", pool=True)]))
    spec = ModelSpec("toy_resnet", (3, 32, 32), num_classes, blocks, tuple(candidates),
                     {"depth": depth, "width": width})
    spec.validate()
    return spec


def build_plain_net(channels=(8, 8, 8, 8), num_classes: int = 4, input_hw: int = 8,
                    candidates=(8, 4, 2)) -> ModelSpec:
    """Small sequential conv net (first conv, searched convs, classifier)."""
    blocks = [BlockDef("stem", [LayerDef("stem.conv", "conv", 3, channels[0], k=3, p=1,
                                         act="relu", role="first", signed=True)])]
    cin = channels[0]
    for i, c in enumerate(channels, start=1):
        blocks.append(BlockDef(f"c{i}", [LayerDef(f"c{i}.conv", "conv", cin, c, k=3, p=1,
                                                  act="relu")]))
        cin = c
    blocks.append(BlockDef("head", [LayerDef("head.fc", "linear", cin, num_classes, bn=False,
                                             role="last", pool=True)]))
    spec = ModelSpec("plain", (3, input_hw, input_hw), num_classes, blocks, tuple(candidates),
                     {"channels": _auto("-".join(map(str, channels)))})
    spec.validate()
    return spec


BUILDERS = {
    "toy_mobilenet": build_toy_mobilenet,
    "toy_resnet": build_toy_resnet,
    "plain": build_plain_net,
}


# -- runtime ----------------------------------------------------------------------


@dataclass
class QuantMode:
    """How activations and weights are quantized in a forward pass.

    kind: ``fp`` (no activation quantization), ``meta`` (single branch
    ``branch`` everywhere), ``mix`` (softmax mixing) or ``fixed`` (per-layer
    bits from ``assignment``).
    """

    kind: str = "fp"
    branch: int = 0
    assignment: dict | None = None
    quantize_weights: bool = False


class QLayer:
    """Conv or linear layer with input/weight quantizers, BN and activation."""

    def __init__(self, d: LayerDef, shape: LayerShape, candidates, weight_bits: int,
                 rng: np.random.Generator):
        self.d = d
        self.name = d.name
        self.shape = shape
        self.n_features = int(np.prod(shape.in_shape))
        if d.kind == "conv":
            fan_in = d.in_ch // d.g * d.k * d.k
            wshape = (d.out_ch, d.in_ch // d.g, d.k, d.k)
        else:
            fan_in = d.in_ch
            wshape = (d.out_ch, d.in_ch)
        std = math.sqrt(2.0 / fan_in)
        self.weight = Tensor(rng.standard_normal(wshape) * std, requires_grad=True,
                             name=f"{d.name}.weight")
        self.bias = None
        if d.kind == "linear":
            self.bias = Tensor(np.zeros(d.out_ch), requires_grad=True, name=f"{d.name}.bias")
        self.gamma = self.beta = self.bn_state = None
        if d.bn:
            self.gamma = Tensor(np.ones(d.out_ch), requires_grad=True, name=f"{d.name}.gamma")
            self.beta = Tensor(np.zeros(d.out_ch), requires_grad=True, name=f"{d.name}.beta")
            self.bn_state = BNState.create(d.out_ch)
        if d.role == "searched":
            self.branch_set = BranchSet(candidates, signed=d.signed, name=d.name)
            self.act_spec = None
            self.weight_spec = QuantSpec(weight_bits, signed=True)
        else:
            self.branch_set = None
            self.act_spec = first_last_spec(signed=d.signed)
            self.weight_spec = QuantSpec(FIRST_LAST_BITS, signed=True)

    # -- quantizer selection ----------------------------------------------------

    def branch_index(self, bits: int, weight_bits: int | None = None) -> int:
        bs = self.branch_set
        for i in range(bs.B):
            if bs.act_bits(i) == bits and (weight_bits is None or bs.weight_bits(i) == weight_bits):
                return i
        raise ValueError(f"layer {self.name}: {bits}-bit is not a candidate {bs.candidates}")

    def _selected(self, mode: QuantMode) -> int | None:
        if mode.kind == "meta":
            return mode.branch
        if mode.kind == "fixed":
            if mode.assignment is None or self.name not in mode.assignment:
                raise KeyError(f"assignment has no entry for layer {self.name!r}")
            entry = mode.assignment[self.name]
            return self.branch_index(entry.bits, entry.weight_bits)
        return None

    def quant_input(self, x: Tensor, mode: QuantMode) -> Tensor:
        if mode.kind == "fp":
            return x
        if self.branch_set is None:
            return quantize(x, self.act_spec, self.n_features)
        if mode.kind == "mix":
            return mix_forward(x, self.branch_set, self.n_features)
        return meta_forward(x, self.branch_set, self._selected(mode), self.n_features)

    def quant_weight(self, mode: QuantMode) -> Tensor:
        bs = self.branch_set
        if bs is not None and bs.pair_mode and mode.kind in ("meta", "fixed"):
            return quantize(self.weight, bs.weight_specs[self._selected(mode)])
        if not mode.quantize_weights:
            return self.weight
        return quantize(self.weight, self.weight_spec)

    def _apply(self, x: Tensor, w: Tensor) -> Tensor:
        d = self.d
        if d.kind == "conv":
            return F.conv2d(x, w, stride=d.s, padding=d.p, groups=d.g)
        return F.linear(x, w, self.bias)

    def __call__(self, x: Tensor, mode: QuantMode, training: bool, momentum: float,
                 capture: dict | None = None) -> Tensor:
        if self.d.pool:
            x = F.global_avg_pool(x)
        if capture is not None:
            capture[self.name] = x.data
        xq = self.quant_input(x, mode)
        bs = self.branch_set
        if bs is not None and bs.pair_mode and mode.kind == "mix":
            # one product per (act, weight) pair, weighted by the branch softmax
            p = F.softmax(bs.alphas)
            out = None
            for i in range(bs.B):
                term = p[i] * self._apply(
                    quantize(x, bs.branch_specs[i], self.n_features),
                    quantize(self.weight, bs.weight_specs[i]),
                )
                out = term if out is None else out + term
        else:
            out = self._apply(xq, self.quant_weight(mode))
        if self.bn_state is not None:
            out = F.batch_norm(out, self.gamma, self.beta, self.bn_state, momentum, training)
        if self.d.act == "relu":
            out = F.relu(out)
        elif self.d.act == "relu6":
            out = F.relu6(out)
        return out

    # -- parameters ---------------------------------------------------------------

    def weight_params(self) -> list[Tensor]:
        return [t for t in (self.weight, self.bias, self.gamma, self.beta) if t is not None]

    def act_specs(self) -> list[QuantSpec]:
        return list(self.branch_set.branch_specs) if self.branch_set else [self.act_spec]

    def weight_specs(self) -> list[QuantSpec]:
        specs = [self.weight_spec]
        if self.branch_set is not None and self.branch_set.pair_mode:
            specs += self.branch_set.weight_specs
        return specs


class Model:
    """Runtime network built from a :class:`ModelSpec`."""

    def __init__(self, spec: ModelSpec, seed: int = 0, weight_bits: int = 4,
                 bn_momentum: float = 0.1):
        spec.validate()
        self.spec = spec
        self.weight_bits = weight_bits
        self.bn_momentum = bn_momentum
        self.shapes = resolve_shapes(spec)
        rng = np.random.default_rng(seed)
        self.layers: dict[str, QLayer] = {
            d.name: QLayer(d, self.shapes[d.name], spec.candidates, weight_bits, rng)
            for d in spec.layer_defs()
        }
        self.mode = QuantMode()
        self.capture: dict | None = None

    # -- forward --------------------------------------------------------------------

    def set_mode(self, kind: str, branch: int = 0, assignment=None,
                 quantize_weights: bool | None = None) -> None:
        if kind not in ("fp", "meta", "mix", "fixed"):
            raise ValueError(f"unknown quantization mode {kind!r}")
        if kind == "fixed" and assignment is None:
            raise ValueError("fixed mode needs an assignment")
        entries = getattr(assignment, "entries", assignment)
        if kind == "fixed":
            missing = [n for n in self.spec.searched_layers() if n not in entries]
            if missing:
                raise KeyError(f"assignment is missing layers {missing}")
        qw = self.mode.quantize_weights if quantize_weights is None else quantize_weights
        self.mode = QuantMode(kind, branch, entries, qw)

    def forward(self, x, training: bool = False) -> Tensor:
        h = x if isinstance(x, Tensor) else Tensor(x)
        mode, mom, cap = self.mode, self.bn_momentum, self.capture
        for b in self.spec.blocks:
            inp = h
            for d in b.layers:
                h = self.layers[d.name](h, mode, training, mom, cap)
            if b.residual:
                sc = inp
                for d in b.shortcut:
                    sc = self.layers[d.name](sc, mode, training, mom, cap)
                h = h + sc
            if b.post_act == "relu":
                h = F.relu(h)
            elif b.post_act == "relu6":
                h = F.relu6(h)
        return h

    __call__ = forward

    # -- parameter groups ---------------------------------------------------------

    @property
    def branch_sets(self) -> dict[str, BranchSet]:
        return {n: l.branch_set for n, l in self.layers.items() if l.branch_set is not None}

    def weights(self) -> list[Tensor]:
        return [t for l in self.layers.values() for t in l.weight_params()]

    def act_steps(self) -> list[Tensor]:
        return [s.step for l in self.layers.values() for s in l.act_specs()]

    def weight_steps(self) -> list[Tensor]:
        return [s.step for l in self.layers.values() for s in l.weight_specs()]

    def alphas(self) -> list[Tensor]:
        return [bs.alphas for bs in self.branch_sets.values()]

    def all_specs(self) -> list[QuantSpec]:
        return [s for l in self.layers.values() for s in l.act_specs() + l.weight_specs()]

    def clamp_steps(self) -> None:
        for s in self.all_specs():
            s.clamp_step()

    # -- initialisation -----------------------------------------------------------

    def calibrate(self, x) -> None:
        """Initialise every activation step from FP activations of ``x``."""
        from .autograd import no_grad

        old, self.capture = self.mode, {}
        self.mode = QuantMode("fp", quantize_weights=False)
        try:
            with no_grad():
                self.forward(x, training=False)
            for name, layer in self.layers.items():
                for spec in layer.act_specs():
                    spec.initialize(self.capture[name])
        finally:
            self.capture, self.mode = None, old

    def init_weight_steps(self) -> None:
        for layer in self.layers.values():
            for spec in layer.weight_specs():
                spec.step.data[...] = init_step(layer.weight.data, spec.bits, signed=True)

    # -- state --------------------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self._state_targets().items()}

    def _state_targets(self) -> dict[str, np.ndarray]:
        out = {}
        for name, l in self.layers.items():
            for t in l.weight_params():
                out[t.name] = t.data
            if l.bn_state is not None:
                out[f"{name}.running_mean"] = l.bn_state.running_mean
                out[f"{name}.running_var"] = l.bn_state.running_var
            if l.branch_set is not None:
                out[f"{name}.alphas"] = l.branch_set.alphas.data
                for i, s in enumerate(l.branch_set.branch_specs):
                    out[f"{name}.act_step.{i}"] = s.step.data
                for i, s in enumerate(l.branch_set.weight_specs or []):
                    out[f"{name}.pair_weight_step.{i}"] = s.step.data
            else:
                out[f"{name}.act_step"] = l.act_spec.step.data
            out[f"{name}.weight_step"] = l.weight_spec.step.data
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        targets = self._state_targets()
        missing = sorted(set(targets) - set(state))
        unexpected = sorted(set(state) - set(targets))
        if missing or unexpected:
            raise ValueError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for key, arr in targets.items():
            src = np.asarray(state[key])
            if src.shape != arr.shape:
                raise ValueError(f"state {key}: shape {src.shape} != {arr.shape}")
            arr[...] = src

    def num_parameters(self) -> int:
        return sum(t.size for t in self.weights())

DEFAULT_CANDIDATES_BY_MODEL = {
    "mobilenet": DEFAULT_MOBILENET_CANDIDATES,
    "resnet": DEFAULT_RESNET_CANDIDATES,
    "plain": DEFAULT_RESNET_CANDIDATES,
}
