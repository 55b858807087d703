"""Diagnostics for activation instability.

* :func:`trace_bn` follows BN running statistics while training under one
  of several regimes (random bit per epoch with FP or 4-bit weights,
  bit-meta training, or a frozen model).
* :func:`act_histogram` bins the tensor feeding a quantizer under
  different bit configurations.
* :func:`quantized_gaussian_variance` is the Monte-Carlo study of how
  low-precision quantization inflates the variance of a Gaussian.
* :func:`hessian_trace_per_op` estimates per-layer Hessian traces with
  Hutchinson probes and finite-difference Hessian-vector products.

Everything here leaves model parameters untouched except ``trace_bn`` in
its training regimes, which trains the model it is given on purpose.
"""

from __future__ import annotations

import csv
import fnmatch
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import stats as sps

from . import functional as F
from .autograd import Tensor, no_grad, precision
from .costmodel import CostTable
from .quant import QuantSpec, init_step, quantize
from .zoo import Model

TRACE_STATS = ("bn_running_var", "bn_running_mean", "act_var", "act_hist")
BN_REGIMES = ("frozen", "random_fp", "random_w4", "bit_meta")
HIST_BINS = 128


def _write_csv(path, header: Sequence[str], rows: Sequence[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    tmp.replace(path)
    return path


# -- BN traces ---------------------------------------------------------------------


@dataclass
class StatTrace:
    """Rows of ``(iteration, layer, statistic, value)``."""

    rows: list[tuple[int, str, str, float]] = field(default_factory=list)
    regime: str = ""
    _last: dict = field(default_factory=dict, repr=False, compare=False)

    def add(self, iteration: int, layer: str, stat: str, value: float) -> None:
        if stat not in TRACE_STATS:
            raise ValueError(f"unknown statistic {stat!r}")
        last = self._last.get((layer, stat))
        if last is not None and iteration <= last:
            raise ValueError(f"iterations must increase for ({layer}, {stat}): {iteration} after {last}")
        self._last[(layer, stat)] = iteration
        self.rows.append((int(iteration), layer, stat, float(value)))

    def series(self, layer: str, stat: str = "bn_running_var") -> tuple[np.ndarray, np.ndarray]:
        pts = [(i, v) for i, l, s, v in self.rows if l == layer and s == stat]
        if not pts:
            raise KeyError(f"no {stat} samples for layer {layer!r}")
        it, val = zip(*pts)
        return np.array(it), np.array(val)

    def to_csv(self, path) -> Path:
        rows = [(self.regime, *r) for r in self.rows]
        return _write_csv(path, ("regime", "iteration", "layer", "statistic", "value"), rows)


def select_layers(model: Model, selector) -> list[str]:
    """Resolve ``selector`` to BN-carrying layer names.

    ``selector`` may be ``"depthwise"``, a glob such as ``"b*.dw"``, a list
    of names or a predicate on the layer definition.
    """
    names = []
    for name, layer in model.layers.items():
        if layer.bn_state is None:
            continue
        if selector == "depthwise":
            ok = layer.d.depthwise
        elif callable(selector):
            ok = selector(layer.d)
        elif isinstance(selector, str):
            ok = fnmatch.fnmatchcase(name, selector)
        else:
            ok = name in selector
        if ok:
            names.append(name)
    if not names:
        raise ValueError(f"layer selector {selector!r} matches no batch-norm layer")
    return names


def _bn_value(model: Model, layer: str, stat: str, channel: int | None) -> float:
    st = model.layers[layer].bn_state
    arr = st.running_var if stat == "bn_running_var" else st.running_mean
    return float(arr.mean() if channel is None else arr[channel])


def trace_bn(model: Model, data, selector, regime: str, iterations: int, every: int = 1,
             trainer=None, seed: int = 0, epoch_len: int = 25, lr: float = 0.01,
             stats: Sequence[str] = ("bn_running_var",), channel: int | None = None,
             batch_size: int = 64) -> StatTrace:
    """Record BN running statistics every ``every`` iterations under ``regime``.

    Regimes:
      ``frozen``     eval-mode forwards, nothing updates (flat trace).
      ``random_fp``  each "epoch" of ``epoch_len`` iterations trains one
                     randomly drawn candidate bit-width, FP weights.
      ``random_w4``  same, with weights fake-quantized to ``b_w`` bits.
      ``bit_meta``   bit-meta steps (all candidates, averaged loss).

    ``trainer`` must wrap ``model`` for the training regimes.  Statistics
    are channel means unless ``channel`` is given.
    """
    if regime not in BN_REGIMES:
        raise ValueError(f"regime must be one of {BN_REGIMES}, got {regime!r}")
    if every < 1 or iterations < 0:
        raise ValueError("every must be >= 1 and iterations >= 0")
    for s in stats:
        if s not in ("bn_running_var", "bn_running_mean"):
            raise ValueError(f"trace_bn records BN statistics only, got {s!r}")
    layers = select_layers(model, selector)
    if regime != "frozen" and (trainer is None or trainer.model is not model):
        raise ValueError(f"regime {regime!r} needs a trainer wrapping the model")

    rng = np.random.default_rng(seed)
    n_branches = min(bs.B for bs in model.branch_sets.values())
    if regime == "random_w4":
        model.init_weight_steps()
    trace = StatTrace(regime=regime)
    it = 0
    epoch = 0
    while it < iterations:
        branch = int(rng.integers(n_branches))
        if regime in ("random_fp", "random_w4"):
            model.set_mode("meta", branch=branch, quantize_weights=regime == "random_w4")
        taken = 0
        for xb, yb in data.batches(batch_size, shuffle=True, seed=seed, epoch=epoch, drop_last=True):
            if it >= iterations or taken >= epoch_len:
                break
            if regime == "frozen":
                with no_grad():
                    model(xb, training=False)
            elif regime == "bit_meta":
                trainer.bit_meta_step(xb, yb, lr=lr)
            else:
                trainer.fixed_step(xb, yb, lr)
            if it % every == 0:
                for name in layers:
                    for s in stats:
                        trace.add(it, name, s, _bn_value(model, name, s, channel))
            it += 1
            taken += 1
        epoch += 1
    return trace


def relative_fluctuation(values, window: int = 20) -> float:
    """Mean over sliding windows of ``std / |mean|``."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < window:
        raise ValueError(f"need at least {window} samples, got {v.size}")
    win = np.lib.stride_tricks.sliding_window_view(v, window)
    return float(np.mean(win.std(axis=1) / np.abs(win.mean(axis=1))))


# -- activation histograms -------------------------------------------------------------


@dataclass
class Histogram:
    layer: str
    config: str
    edges: np.ndarray
    counts: np.ndarray
    variance: float

    def to_csv(self, path) -> Path:
        rows = [(self.edges[i], self.edges[i + 1], int(c)) for i, c in enumerate(self.counts)]
        return _write_csv(path, ("bin_lo", "bin_hi", "count"), rows)


def histogram(values, bins: int = HIST_BINS) -> tuple[np.ndarray, np.ndarray]:
    """Fixed-bin histogram over ``[min, max]`` of ``values``."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("cannot histogram an empty tensor")
    lo, hi = float(v.min()), float(v.max())
    if hi == lo:
        hi = lo + 1.0
    counts, edges = np.histogram(v, bins=bins, range=(lo, hi))
    return edges, counts


def act_histogram(model: Model, layer: str, configs: Sequence, x, bins: int = HIST_BINS,
                  out_dir=None) -> dict:
    """Histogram the input of ``layer``'s quantizer once per configuration.

    ``configs`` entries are candidate bit-widths (every searched layer runs
    that bit-width, the ``meta`` mode) or ``"fp"``.  Eval mode throughout,
    so BN statistics and parameters are untouched.
    """
    if layer not in model.layers:
        raise KeyError(f"model has no layer {layer!r}")
    x = np.asarray(x)
    if x.size == 0:
        raise ValueError("act_histogram needs a non-empty data sample")
    any_layer = next(l for l in model.layers.values() if l.branch_set is not None)
    old = model.mode
    out = {}
    try:
        for cfg in configs:
            if cfg == "fp":
                model.set_mode("fp", quantize_weights=old.quantize_weights)
            else:
                model.set_mode("meta", branch=any_layer.branch_index(int(cfg)),
                               quantize_weights=old.quantize_weights)
            model.capture = {}
            with no_grad():
                model(x, training=False)
            values = model.capture[layer]
            edges, counts = histogram(values, bins)
            h = Histogram(layer, str(cfg), edges, counts, float(np.var(values, dtype=np.float64)))
            out[cfg] = h
            if out_dir is not None:
                h.to_csv(Path(out_dir) / f"act_hist_{layer}_{cfg}.csv")
    finally:
        model.capture = None
        model.mode = old
    return out


def variance_spread(hists: dict) -> float:
    """max/min of per-configuration activation variances."""
    v = [h.variance for h in hists.values()]
    return max(v) / min(v)


# -- quantized Gaussian -----------------------------------------------------------------


def quantized_gaussian_variance(bits_list: Sequence[int] = (2, 3, 4, 8), n: int = 10**6,
                                seed: int = 0, out_path=None) -> list[tuple[str, float]]:
    """Variance of standard-normal samples after signed LSQ-initialised quantization.

    The first row is the unquantized (``"fp"``) variance.
    """
    if n < 10**5:
        raise ValueError(f"n must be at least 1e5 for a stable estimate, got {n}")
    x = np.random.default_rng(seed).standard_normal(n)
    rows = [("fp", float(x.var()))]
    with precision("float64"):
        for b in bits_list:
            spec = QuantSpec(b, signed=True, step=init_step(x, b, signed=True), trainable=False)
            q = quantize(Tensor(x), spec).data
            rows.append((str(b), float(q.var())))
    if out_path is not None:
        _write_csv(out_path, ("bits", "variance"), rows)
    return rows


# -- Hessian trace ------------------------------------------------------------------------


def hutchinson_trace(grad_fn: Callable[[list[np.ndarray]], list[np.ndarray]],
                     params: list[np.ndarray], probes: int = 10, seed: int = 0,
                     eps_rel: float = 1e-3) -> np.ndarray:
    """Per-group Hutchinson estimates ``E[v_i . (Hv)_i]`` with Rademacher ``v``.

    ``grad_fn(theta)`` returns the gradient list at ``theta``.  Hv is the
    central difference ``(g(theta + eps v) - g(theta - eps v)) / (2 eps)``
    with ``eps = eps_rel * max(||theta||, 1) / ||v||``.
    """
    if probes < 1:
        raise ValueError("probes must be >= 1")
    rng = np.random.default_rng(seed)
    theta = [np.asarray(p, dtype=np.float64) for p in params]
    norm = math.sqrt(sum(float((p ** 2).sum()) for p in theta))
    acc = np.zeros(len(theta))
    for _ in range(probes):
        v = [rng.choice((-1.0, 1.0), size=p.shape) for p in theta]
        vnorm = math.sqrt(sum(u.size for u in v))
        eps = eps_rel * max(norm, 1.0) / vnorm
        gp = grad_fn([p + eps * u for p, u in zip(theta, v)])
        gm = grad_fn([p - eps * u for p, u in zip(theta, v)])
        for i, u in enumerate(v):
            hv = (np.asarray(gp[i], np.float64) - np.asarray(gm[i], np.float64)) / (2 * eps)
            acc[i] += float((u * hv).sum())
    est = acc / probes
    bad = [i for i, e in enumerate(est) if not np.isfinite(e)]
    if bad:
        raise FloatingPointError(f"non-finite trace estimate for parameter groups {bad} "
                                 f"(eps_rel={eps_rel}, |theta|={norm:.3g})")
    return est


def hessian_trace_per_op(model: Model, x, y, cost: CostTable, probes: int = 10, seed: int = 0,
                         eps_rel: float = 1e-3, loss_fn: Callable | None = None,
                         layers: Sequence[str] | None = None, assignment=None,
                         out_path=None) -> list[dict]:
    """Hutchinson trace of the loss Hessian w.r.t. each layer's weights, divided by op_i.

    Runs in eval mode at float64 in the model's current quantization mode;
    parameters are restored bit-identically afterwards.  ``assignment``
    only adds a ``bits`` column to the rows.
    """
    if probes < 10:
        raise ValueError(f"probes must be >= 10, got {probes}")
    names = list(layers) if layers is not None else [c.name for c in cost.searched]
    tensors = [model.layers[n].weight for n in names]
    loss_fn = loss_fn or (lambda logits, labels: F.cross_entropy(logits, labels))
    saved = [(t.data, t.grad, t.requires_grad) for t in tensors]
    all_w = model.weights()
    saved_rg = [t.requires_grad for t in all_w]

    def grad_fn(theta):
        for t, th in zip(tensors, theta):
            t.data = th
            t.grad = None
        with precision("float64"):
            loss = loss_fn(model(x, training=False), y)
            loss.backward()
        return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    try:
        for t in all_w:
            t.requires_grad = False
        for t in tensors:
            t.requires_grad = True
        est = hutchinson_trace(grad_fn, [t.data for t in tensors], probes, seed, eps_rel)
    finally:
        for t, (data, grad, rg) in zip(tensors, saved):
            t.data, t.grad, t.requires_grad = data, grad, rg
        for t, rg in zip(all_w, saved_rg):
            t.requires_grad = rg
    rows = []
    for name, tr in zip(names, est):
        ops = cost.ops(name)
        row = {"layer": name, "ops": ops, "trace": float(tr), "trace_per_op": float(tr) / ops}
        if assignment is not None:
            row["bits"] = assignment[name].bits
        rows.append(row)
    if out_path is not None:
        keys = list(rows[0].keys())
        _write_csv(out_path, keys, [[r[k] for k in keys] for r in rows])
    return rows


def rank_correlation(rows: list[dict], key: str = "trace_per_op") -> float:
    """Spearman correlation between ``key`` and the selected bit-width."""
    a = [r[key] for r in rows]
    b = [r["bits"] for r in rows]
    if len(set(b)) < 2:
        return float("nan")
    return float(sps.spearmanr(a, b).statistic)
