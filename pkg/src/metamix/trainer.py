"""Two-phase mixed-precision training.

Bit selection: bit-meta epochs (weights and activation steps trained on the
average loss of the B single-precision networks, alphas frozen), then an
alternating epoch where one bit-meta iteration is followed by one
bit-search iteration (alphas trained on task loss plus budget penalty, all
weights and steps frozen).  Weight training: per-layer activation bits
fixed, weights fake-quantized, weights and both step families fine-tuned.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import functional as F
from .autograd import Tensor, no_grad
from .costmodel import CostTable, RegularizerCfg, bops, count_ops, regularizer, soft_expected_bops
from .mixsearch import BitAssignment
from .zoo import Model, ModelSpec

CHECKPOINT_VERSION = 1
METRIC_FIELDS = ("epoch", "iter", "phase", "loss", "reg_value", "expected_bops", "lr")


# -- optimizers ---------------------------------------------------------------------


class SGD:
    """SGD with momentum and decoupled-from-nothing L2 weight decay."""

    def __init__(self, params: list[Tensor], lr: float, momentum: float = 0.9,
                 weight_decay: float = 0.0, decay_mask: list[bool] | None = None):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.decay_mask = decay_mask or [True] * len(self.params)
        self.buffers: list[np.ndarray | None] = [None] * len(self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay and self.decay_mask[i]:
                g = g + self.weight_decay * p.data
            if self.momentum:
                buf = self.buffers[i]
                buf = g.copy() if buf is None else buf * self.momentum + g
                self.buffers[i] = buf
                g = buf
            p.data -= (lr * g).astype(p.data.dtype, copy=False)

    def state_dict(self) -> dict:
        return {"buffers": [None if b is None else b.copy() for b in self.buffers]}

    def load_state_dict(self, state: dict) -> None:
        self.buffers = [None if b is None else np.array(b) for b in state["buffers"]]


class Adam:
    def __init__(self, params: list[Tensor], lr: float, betas=(0.5, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data, dtype=np.float64) for p in self.params]
        self.v = [np.zeros_like(p.data, dtype=np.float64) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64) + self.weight_decay * p.data
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            upd = lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            p.data -= upd.astype(p.data.dtype)

    def state_dict(self) -> dict:
        return {"t": self.t, "m": [a.copy() for a in self.m], "v": [a.copy() for a in self.v]}

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        self.m = [np.array(a) for a in state["m"]]
        self.v = [np.array(a) for a in state["v"]]


def cosine_lr(base: float, step: int, total: int, floor: float = 0.0) -> float:
    if total <= 0:
        return base
    return floor + 0.5 * (base - floor) * (1 + math.cos(math.pi * min(step, total) / total))


# -- configuration and state --------------------------------------------------------


@dataclass
class PhasePlan:
    """Epoch counts, alternation pattern and optimizer settings of all phases."""

    pretrain_epochs: int = 10
    bit_meta_epochs: int = 1
    alternate_epochs: int = 1
    finetune_epochs: int = 20
    meta_iters: int = 1
    search_iters: int = 1
    batch_size: int = 64
    lr_pretrain: float = 0.05
    lr_meta: float = 0.01
    lr_finetune: float = 0.01
    lr_alpha: float = 0.01
    alpha_optimizer: str = "adam"
    momentum: float = 0.9
    weight_decay: float = 5e-4
    augment: bool = False
    check_frozen: bool = True

    def validate(self) -> None:
        for name in ("pretrain_epochs", "bit_meta_epochs", "alternate_epochs", "finetune_epochs"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.meta_iters < 1 or self.search_iters < 0:
            raise ValueError("meta_iters must be >= 1 and search_iters >= 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch norm needs two samples)")
        if self.alpha_optimizer not in ("adam", "sgd"):
            raise ValueError(f"alpha_optimizer must be 'adam' or 'sgd', got {self.alpha_optimizer!r}")


@dataclass
class TrainState:
    epoch: int = 0
    iteration: int = 0
    seed: int = 0
    phase: str = "init"
    history: list = field(default_factory=list)


class FrozenGroupError(AssertionError):
    """A tensor of a frozen parameter group changed during an optimizer step."""


class FrozenGuard:
    """Snapshot frozen tensors and verify they are bit-identical afterwards."""

    def __init__(self, tensors: Iterable[Tensor], label: str, enabled: bool = True):
        self.label = label
        self.enabled = enabled
        self.items = [(t, t.data.copy()) for t in tensors] if enabled else []

    def verify(self) -> None:
        for t, before in self.items:
            if not np.array_equal(t.data, before):
                raise FrozenGroupError(f"{self.label}: frozen tensor {t.name!r} was modified")


class MetricsLog:
    """Per-iteration metrics; optionally mirrored to a CSV file."""

    def __init__(self, path: str | os.PathLike | None = None):
        self.rows: list[dict] = []
        self.path = Path(path) if path else None
        self._fh = None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            new = not self.path.exists()
            self._fh = open(self.path, "a", newline="")
            self._writer = csv.DictWriter(self._fh, fieldnames=METRIC_FIELDS)
            if new:
                self._writer.writeheader()

    def log(self, **row) -> None:
        row = {k: row.get(k, "") for k in METRIC_FIELDS}
        self.rows.append(row)
        if self._fh:
            self._writer.writerow(row)

    def close(self) -> None:
        if self._fh:
            self._fh.close()
            self._fh = None


def set_requires_grad(tensors: Iterable[Tensor], flag: bool) -> None:
    for t in tensors:
        t.requires_grad = flag


def evaluate(model: Model, data, batch_size: int = 256) -> dict:
    """Top-1 accuracy and mean loss in eval mode (running BN statistics)."""
    correct, total, loss_sum = 0, 0, 0.0
    with no_grad():
        for xb, yb in data.batches(batch_size, shuffle=False):
            logits = model(xb, training=False)
            loss_sum += F.cross_entropy(logits, yb).item() * len(yb)
            correct += int((logits.data.argmax(axis=1) == yb).sum())
            total += len(yb)
    return {"accuracy": correct / total, "loss": loss_sum / total}


# -- the trainer ----------------------------------------------------------------------


class MetaMixTrainer:
    """Owns a model, its cost table and the optimizers of every phase."""

    def __init__(self, model: Model, plan: PhasePlan | None = None,
                 reg: RegularizerCfg | None = None, seed: int = 0,
                 metrics: MetricsLog | None = None):
        self.model = model
        self.plan = plan or PhasePlan()
        self.plan.validate()
        self.cost = count_ops(model.spec, model.weight_bits)
        self.reg = reg
        self.state = TrainState(seed=seed)
        self.metrics = metrics or MetricsLog()
        self.alpha_trace: list[dict] = []
        self.timings: dict[str, float] = {}
        self._make_optimizers()

    def _make_optimizers(self) -> None:
        p, m = self.plan, self.model
        weights = m.weights()
        mask = [t.name.endswith(".weight") for t in weights]
        self.opt_weights = SGD(weights, p.lr_meta, p.momentum, p.weight_decay, mask)
        self.opt_act_steps = SGD(m.act_steps(), p.lr_meta, p.momentum)
        self.opt_weight_steps = SGD(m.weight_steps(), p.lr_finetune, p.momentum)
        if p.alpha_optimizer == "adam":
            self.opt_alpha = Adam(m.alphas(), p.lr_alpha)
        else:
            self.opt_alpha = SGD(m.alphas(), p.lr_alpha, p.momentum)

    def _fresh_phase(self) -> None:
        # Momentum from an earlier phase would make an in-process pipeline differ from one
        # resumed from a checkpoint, so every phase starts with empty optimizer buffers.
        self._make_optimizers()

    def _zero_all(self) -> None:
        for opt in (self.opt_weights, self.opt_act_steps, self.opt_weight_steps, self.opt_alpha):
            opt.zero_grad()

    def _trainable(self, weights: bool, act_steps: bool, weight_steps: bool, alphas: bool):
        m = self.model
        set_requires_grad(m.weights(), weights)
        set_requires_grad(m.act_steps(), act_steps)
        set_requires_grad(m.weight_steps(), weight_steps)
        set_requires_grad(m.alphas(), alphas)

    # -- single steps -------------------------------------------------------------

    def bit_meta_step(self, xb, yb, lr: float | None = None) -> float:
        """Average the B single-precision losses, backprop once, update weights and s_a."""
        m = self.model
        n_branches = {bs.B for bs in m.branch_sets.values()}
        if not n_branches or 0 in n_branches:
            raise ValueError("bit-meta training needs at least one branch per searched layer")
        if len(n_branches) != 1:
            raise ValueError(f"searched layers disagree on the branch count: {n_branches}")
        B = n_branches.pop()
        self._trainable(weights=True, act_steps=True, weight_steps=False, alphas=False)
        guard = FrozenGuard(m.alphas() + m.weight_steps(), "bit-meta", self.plan.check_frozen)
        self._zero_all()
        total = None
        for i in range(B):
            m.set_mode("meta", branch=i, quantize_weights=False)
            loss = F.cross_entropy(m(xb, training=True), yb)
            total = loss if total is None else total + loss
        total = total * (1.0 / B)
        total.backward()
        lr = self.plan.lr_meta if lr is None else lr
        self.opt_weights.step(lr)
        self.opt_act_steps.step(lr)
        m.clamp_steps()
        guard.verify()
        return total.item()

    def bit_search_step(self, xb, yb) -> tuple[float, float]:
        """Train alphas on task loss + lambda_r * r(alpha); returns (loss, r)."""
        m = self.model
        if self.reg is None:
            raise ValueError("bit-search training needs a RegularizerCfg")
        self._trainable(weights=False, act_steps=False, weight_steps=False, alphas=True)
        guard = FrozenGuard(m.weights() + m.act_steps() + m.weight_steps(), "bit-search",
                            self.plan.check_frozen)
        self._zero_all()
        m.set_mode("mix", quantize_weights=False)
        task = F.cross_entropy(m(xb, training=True), yb)
        task.backward()
        r = regularizer(self.cost, m.branch_sets, self.reg)
        if self.reg.lambda_r > 0:
            (r * self.reg.lambda_r).backward()
        self.opt_alpha.step()
        guard.verify()
        return task.item() + self.reg.lambda_r * r.item(), r.item()

    def fixed_step(self, xb, yb, lr: float, train_weight_steps: bool = True) -> float:
        """One SGD step of the current (fp / fixed / meta) mode, alphas frozen."""
        m = self.model
        quant = m.mode.kind != "fp"
        self._trainable(weights=True, act_steps=quant, weight_steps=quant and train_weight_steps
                        and m.mode.quantize_weights, alphas=False)
        guard = FrozenGuard(m.alphas(), "weight-training", self.plan.check_frozen)
        self._zero_all()
        loss = F.cross_entropy(m(xb, training=True), yb)
        loss.backward()
        self.opt_weights.step(lr)
        if quant:
            self.opt_act_steps.step(lr)
            self.opt_weight_steps.step(lr)
            m.clamp_steps()
        guard.verify()
        return loss.item()

    # -- phases ---------------------------------------------------------------------

    def _batches(self, data, epoch: int):
        return data.batches(self.plan.batch_size, shuffle=True, seed=self.state.seed, epoch=epoch,
                            drop_last=True, augment=self.plan.augment)

    def pretrain(self, train, test=None, epochs: int | None = None) -> dict:
        """Full-precision training that produces the starting checkpoint."""
        p, m = self.plan, self.model
        epochs = p.pretrain_epochs if epochs is None else epochs
        self._fresh_phase()
        m.set_mode("fp", quantize_weights=False)
        steps_per_epoch = len(train) // p.batch_size
        total = epochs * steps_per_epoch
        step = 0
        t0 = time.perf_counter()
        for ep in range(epochs):
            for xb, yb in self._batches(train, ep):
                lr = cosine_lr(p.lr_pretrain, step, total)
                loss = self.fixed_step(xb, yb, lr)
                step += 1
                self.metrics.log(epoch=ep, iter=step, phase="pretrain", loss=loss, lr=lr)
        self.timings["pretrain"] = time.perf_counter() - t0
        # activation steps start from FP statistics
        m.calibrate(train.x[: min(len(train), 256)])
        self.state.phase = "pretrained"
        return evaluate(m, test) if test is not None else {}

    def run_bit_selection(self, train) -> BitAssignment:
        """Bit-meta epochs, then alternating bit-meta / bit-search epochs."""
        p, m = self.plan, self.model
        self._fresh_phase()
        t0 = time.perf_counter()
        it = 0
        for ep in range(p.bit_meta_epochs):
            for xb, yb in self._batches(train, 1000 + ep):
                it += 1
                loss = self.bit_meta_step(xb, yb)
                self.metrics.log(epoch=ep, iter=it, phase="bit_meta", loss=loss, lr=p.lr_meta)
        cycle = p.meta_iters + p.search_iters
        for k in range(p.alternate_epochs):
            ep = p.bit_meta_epochs + k
            for j, (xb, yb) in enumerate(self._batches(train, 1000 + ep)):
                it += 1
                if j % cycle < p.meta_iters:
                    loss = self.bit_meta_step(xb, yb)
                    self.metrics.log(epoch=ep, iter=it, phase="bit_meta", loss=loss, lr=p.lr_meta)
                else:
                    loss, r = self.bit_search_step(xb, yb)
                    expb = soft_expected_bops(self.cost, m.branch_sets)
                    self.metrics.log(epoch=ep, iter=it, phase="bit_search", loss=loss,
                                     reg_value=r, expected_bops=expb, lr=p.lr_alpha)
                    self._record_alphas(it)
        self.timings["bit_selection"] = time.perf_counter() - t0
        self.state.phase = "selected"
        return BitAssignment.from_branch_sets(m.branch_sets)

    def _record_alphas(self, iteration: int) -> None:
        for name, bs in self.model.branch_sets.items():
            self.alpha_trace.append({"iter": iteration, "layer": name,
                                     "softmax": [float(v) for v in bs.probabilities()]})

    def run_weight_training(self, train, test, assignment: BitAssignment,
                            epochs: int | None = None, init_weight_steps: bool = True,
                            eval_every: int = 1, on_epoch: Callable | None = None) -> dict:
        """Fine-tune weights, s_a and s_w with per-layer activation bits fixed."""
        p, m = self.plan, self.model
        epochs = p.finetune_epochs if epochs is None else epochs
        missing = [n for n in m.spec.searched_layers() if n not in assignment]
        if missing:
            raise KeyError(f"assignment is missing layers {missing}")
        self._fresh_phase()
        m.set_mode("fixed", assignment=assignment, quantize_weights=True)
        if init_weight_steps:
            m.init_weight_steps()
        steps_per_epoch = len(train) // p.batch_size
        total = epochs * steps_per_epoch
        history = []
        step = 0
        t0 = time.perf_counter()
        for ep in range(epochs):
            for xb, yb in self._batches(train, 2000 + ep):
                lr = cosine_lr(p.lr_finetune, step, total)
                loss = self.fixed_step(xb, yb, lr)
                step += 1
                self.metrics.log(epoch=ep, iter=step, phase="finetune", loss=loss, lr=lr)
            if test is not None and eval_every and ((ep + 1) % eval_every == 0 or ep + 1 == epochs):
                t_eval = time.perf_counter()
                res = evaluate(m, test)
                t0 += time.perf_counter() - t_eval  # evaluation is not training time
                history.append({"epoch": ep + 1, **res})
                if on_epoch is not None:
                    on_epoch(ep + 1, res)
        self.timings["finetune"] = time.perf_counter() - t0
        self.state.phase = "finetuned"
        final = evaluate(m, test) if test is not None else {}
        return {**final, "bops": bops(self.cost, assignment), "history": history}

    # -- persistence ------------------------------------------------------------------

    def optimizer_state(self) -> dict:
        return {
            "weights": self.opt_weights.state_dict(),
            "act_steps": self.opt_act_steps.state_dict(),
            "weight_steps": self.opt_weight_steps.state_dict(),
            "alpha": self.opt_alpha.state_dict(),
        }

    def load_optimizer_state(self, state: dict) -> None:
        self.opt_weights.load_state_dict(state["weights"])
        self.opt_act_steps.load_state_dict(state["act_steps"])
        self.opt_weight_steps.load_state_dict(state["weight_steps"])
        self.opt_alpha.load_state_dict(state["alpha"])


# -- checkpoints ------------------------------------------------------------------------
#
# A checkpoint is a NumPy .npz archive.  Entry "__header__" is a UTF-8 JSON
# document {"format": "metamix-checkpoint", "version": 1, "model_spec": <text>,
# "weight_bits": int, "bn_momentum": float, "extra": {...}} plus, when a trainer
# is saved, "optimizer_layout" and "train_state";
# every other entry is one named array of the model state ("param/<name>") or
# of the optimizer state ("opt/<group>/<slot>/<index>").


def _flatten_opt(state: dict, prefix: str = "opt") -> tuple[dict, dict]:
    arrays, layout = {}, {}
    for group, st in state.items():
        layout[group] = {}
        for slot, value in st.items():
            if isinstance(value, list):
                layout[group][slot] = [None if v is None else f"{prefix}/{group}/{slot}/{i}"
                                       for i, v in enumerate(value)]
                for i, v in enumerate(value):
                    if v is not None:
                        arrays[f"{prefix}/{group}/{slot}/{i}"] = v
            else:
                layout[group][slot] = value
    return arrays, layout


def _unflatten_opt(layout: dict, arrays) -> dict:
    out = {}
    for group, st in layout.items():
        out[group] = {}
        for slot, value in st.items():
            if isinstance(value, list):
                out[group][slot] = [None if k is None else arrays[k] for k in value]
            else:
                out[group][slot] = value
    return out


def save_checkpoint(path, model: Model, trainer: MetaMixTrainer | None = None,
                    extra: dict | None = None) -> None:
    """Write the model (and optionally optimizer/train state) atomically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"param/{k}": v for k, v in model.state_dict().items()}
    header = {
        "format": "metamix-checkpoint",
        "version": CHECKPOINT_VERSION,
        "model_spec": model.spec.to_text(),
        "weight_bits": model.weight_bits,
        "bn_momentum": model.bn_momentum,
        "extra": extra or {},
    }
    if trainer is not None:
        opt_arrays, layout = _flatten_opt(trainer.optimizer_state())
        arrays.update(opt_arrays)
        header["optimizer_layout"] = layout
        header["train_state"] = asdict(trainer.state)
    arrays["__header__"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(tmp, **arrays)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[Model, dict, dict]:
    """Return ``(model, header, arrays)``; arrays include optimizer slots."""
    with np.load(path) as z:
        arrays = {k: z[k] for k in z.files}
    if "__header__" not in arrays:
        raise ValueError(f"{path}: not a metamix checkpoint (no header)")
    header = json.loads(arrays.pop("__header__").tobytes().decode())
    if header.get("format") != "metamix-checkpoint":
        raise ValueError(f"{path}: unknown checkpoint format {header.get('format')!r}")
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
    spec = ModelSpec.from_text(header["model_spec"])
    model = Model(spec, weight_bits=header["weight_bits"], bn_momentum=header["bn_momentum"])
    model.load_state_dict({k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")})
    return model, header, arrays


def restore_trainer(trainer: MetaMixTrainer, header: dict, arrays: dict) -> None:
    if "optimizer_layout" in header:
        trainer.load_optimizer_state(_unflatten_opt(header["optimizer_layout"], arrays))
    if "train_state" in header:
        trainer.state = TrainState(**header["train_state"])
