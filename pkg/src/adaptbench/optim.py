"""Optimizers, learning-rate schedules, and parameter averaging.

SGD uses coupled L2 regularization; Adam and Adamax apply decoupled weight
decay directly to the weights after the moment update. Moment state lives in
plain Tensors so the memory ledger sees it, and is created lazily the first
time a parameter actually steps, so frozen parameters never accrue state.
"""
from __future__ import annotations

import numpy as np

from .nn import Module, Parameter
from .tensor import Tensor


class Optimizer:
    """Base: owns a parameter list, learning rate, and lazily-built state."""

    def __init__(self, params, lr: float, weight_decay: float = 0.0):
        self.params: list[Parameter] = list(params)
        if lr <= 0:
            raise ValueError(f"lr must be positive, got {lr}")
        if weight_decay < 0:
            raise ValueError(f"weight_decay must be non-negative, got {weight_decay}")
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.state: dict[int, dict] = {}

    def zero_grad(self) -> None:
        for p in self.params:
            p.clear_grad()

    def step(self) -> None:
        for p in self.params:
            if not p.requires_grad or p.grad is None:
                continue
            slots = self.state.get(id(p))
            if slots is None:
                slots = self.state[id(p)] = self._init_slots(p)
            self._update(p, p.grad, slots)

    def init_state(self) -> None:
        """Preallocate state for every currently-trainable parameter."""
        for p in self.params:
            if p.requires_grad and id(p) not in self.state:
                self.state[id(p)] = self._init_slots(p)

    def state_bytes(self) -> int:
        total = 0
        for slots in self.state.values():
            for v in slots.values():
                if isinstance(v, Tensor):
                    total += v.data.nbytes
        return total

    def _init_slots(self, p: Parameter) -> dict:
        return {}

    def _update(self, p: Parameter, grad: np.ndarray, slots: dict) -> None:
        raise NotImplementedError


def _zeros_like(p: Parameter) -> Tensor:
    return Tensor(np.zeros_like(p.data), requires_grad=False)


class SGD(Optimizer):
    def __init__(self, params, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        super().__init__(params, lr, weight_decay)
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        self.momentum = float(momentum)

    def _init_slots(self, p: Parameter) -> dict:
        if self.momentum == 0.0:
            return {}
        return {"velocity": _zeros_like(p)}

    def _update(self, p: Parameter, grad: np.ndarray, slots: dict) -> None:
        g = grad
        if self.weight_decay:
            g = g + np.float32(self.weight_decay) * p.data
        if self.momentum:
            v = slots["velocity"].data
            v *= np.float32(self.momentum)
            v += g
            g = v
        p.data -= np.float32(self.lr) * g


class Adam(Optimizer):
    def __init__(self, params, lr: float, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        super().__init__(params, lr, weight_decay)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)

    def _init_slots(self, p: Parameter) -> dict:
        return {"m": _zeros_like(p), "v": _zeros_like(p), "t": 0}

    def _update(self, p: Parameter, grad: np.ndarray, slots: dict) -> None:
        slots["t"] += 1
        t = slots["t"]
        m, v = slots["m"].data, slots["v"].data
        b1, b2 = np.float32(self.beta1), np.float32(self.beta2)
        m *= b1
        m += (np.float32(1.0) - b1) * grad
        v *= b2
        v += (np.float32(1.0) - b2) * grad * grad
        mhat = m / np.float32(1.0 - self.beta1 ** t)
        vhat = v / np.float32(1.0 - self.beta2 ** t)
        p.data -= np.float32(self.lr) * mhat / (np.sqrt(vhat) + np.float32(self.eps))
        if self.weight_decay:
            p.data -= np.float32(self.lr * self.weight_decay) * p.data


class Adamax(Optimizer):
    """Adam variant whose second moment is the gradient infinity norm."""

    def __init__(self, params, lr: float, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        super().__init__(params, lr, weight_decay)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)

    def _init_slots(self, p: Parameter) -> dict:
        return {"m": _zeros_like(p), "u": _zeros_like(p), "t": 0}

    def _update(self, p: Parameter, grad: np.ndarray, slots: dict) -> None:
        slots["t"] += 1
        t = slots["t"]
        m, u = slots["m"].data, slots["u"].data
        b1 = np.float32(self.beta1)
        m *= b1
        m += (np.float32(1.0) - b1) * grad
        np.maximum(np.float32(self.beta2) * u, np.abs(grad), out=u)
        step_size = np.float32(self.lr / (1.0 - self.beta1 ** t))
        p.data -= step_size * m / (u + np.float32(self.eps))
        if self.weight_decay:
            p.data -= np.float32(self.lr * self.weight_decay) * p.data


OPTIMIZERS = {"sgd": SGD, "adam": Adam, "adamax": Adamax}


def make_optimizer(kind: str, params, lr: float, weight_decay: float = 0.0, **kwargs) -> Optimizer:
    cls = OPTIMIZERS.get(kind)
    if cls is None:
        raise ValueError(f"optimizer {kind!r} is not supported (choose sgd, adam, adamax)")
    return cls(params, lr=lr, weight_decay=weight_decay, **kwargs)


TASKS = ("sst", "para", "sts")


def build_task_optimizers(model: Module, base_lr: float, multipliers: dict[str, float],
                          weight_decays: dict[str, float], optim_kind: str = "adamax",
                          **kwargs) -> dict[str, Optimizer]:
    """One optimizer per task over that task's backbone path plus head."""
    opts = {}
    for task in TASKS:
        mult = multipliers.get(task, 1.0)
        if mult <= 0:
            raise ValueError(f"{task} lr multiplier must be positive, got {mult}")
        params = [p for _, p in model.task_parameters(task)]
        opts[task] = make_optimizer(optim_kind, params, lr=base_lr * mult,
                                    weight_decay=weight_decays.get(task, 0.0), **kwargs)
    return opts


# ---------------------------------------------------------------------------
# learning-rate schedules
# ---------------------------------------------------------------------------

class MultiplicativeLR:
    """lr(epoch) = lr0 * gamma^epoch."""

    def __init__(self, base_lr: float, gamma: float):
        if not 0.0 < gamma <= 1.0:
            raise ValueError(f"gamma must be in (0, 1], got {gamma}")
        self.base_lr = float(base_lr)
        self.gamma = float(gamma)

    def lr_at(self, epoch: int) -> float:
        return self.base_lr * self.gamma ** epoch


class TriangularLR:
    """Triangular wave from lo to hi over `period` epochs; the amplitude above
    lo shrinks by cycle_decay each full cycle."""

    def __init__(self, lo: float, hi: float, period: int, cycle_decay: float = 1.0):
        if lo > hi:
            raise ValueError(f"lo {lo} > hi {hi}")
        if period < 1:
            raise ValueError(f"period must be >= 1, got {period}")
        if cycle_decay < 1.0:
            raise ValueError(f"cycle_decay must be >= 1, got {cycle_decay}")
        self.lo, self.hi = float(lo), float(hi)
        self.period = int(period)
        self.cycle_decay = float(cycle_decay)

    def lr_at(self, epoch: int) -> float:
        cycle, frac = divmod(epoch, self.period)
        amp = (self.hi - self.lo) / self.cycle_decay ** cycle
        return self.lo + amp * (1.0 - abs(2.0 * frac / self.period - 1.0))


def schedule_lr(schedule, epoch: int) -> float:
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return schedule.lr_at(epoch)


def apply_schedule(optimizer: Optimizer, schedule, epoch: int) -> float:
    lr = schedule_lr(schedule, epoch)
    optimizer.lr = lr
    return lr


# ---------------------------------------------------------------------------
# exponential moving average of parameters
# ---------------------------------------------------------------------------

class EMA:
    """Shadow copy of a model's parameters, decayed toward the live values."""

    def __init__(self, model: Module, decay: float = 0.999):
        if not 0.0 <= decay <= 1.0:
            raise ValueError(f"decay must be in [0, 1], got {decay}")
        self.model = model
        self.decay = float(decay)
        self.shadow = {name: p.data.copy() for name, p in model.named_parameters()}

    def update(self) -> None:
        d = np.float32(self.decay)
        for name, p in self.model.named_parameters():
            s = self.shadow[name]
            if s.shape != p.data.shape:
                raise ValueError(f"shadow shape drift for {name}: {s.shape} vs {p.data.shape}")
            s *= d
            s += (np.float32(1.0) - d) * p.data

    def apply_to(self, clone: Module) -> Module:
        """Load the live model's full state into `clone`, then overwrite its
        parameters with the shadow values. The live model is untouched."""
        state = self.model.state_dict()
        state.update(self.shadow)
        clone.load_state_dict(state)
        return clone
