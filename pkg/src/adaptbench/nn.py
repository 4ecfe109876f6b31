"""Module system: parameter registration, common layers, state round-tripping.

Registration is attribute-driven: assigning a Parameter, a Module, or a list of
Modules onto a module wires it into named_parameters / state_dict traversal.
Buffers (running statistics) are plain float32 ndarrays registered explicitly so
they ship in checkpoints without entering the autograd graph.
"""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import F32, Tensor


class Parameter(Tensor):
    """A Tensor that a Module registers as trainable state.

    `pinned` marks parameters that must stay frozen no matter what the
    unfreezing schedule says (adapter base weights, *-only mode backbones).
    """

    __slots__ = ("pinned",)

    def __init__(self, data, requires_grad: bool = True) -> None:
        super().__init__(data, dtype=F32, requires_grad=requires_grad)
        self.pinned = False


class Module:
    def __init__(self) -> None:
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "training", True)

    # -- registration --------------------------------------------------------

    def __setattr__(self, name: str, value) -> None:
        params = self.__dict__.get("_params")
        children = self.__dict__.get("_children")
        if params is not None:
            params.pop(name, None)
            children.pop(name, None)
            if isinstance(value, Parameter):
                params[name] = value
            elif isinstance(value, Module):
                children[name] = value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                children[name] = ModuleList(value)
                object.__setattr__(self, name, children[name])
                return
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = np.asarray(value, dtype=np.float32)
        object.__setattr__(self, name, self._buffers[name])

    # -- traversal -----------------------------------------------------------

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, child in self._children.items():
            yield from child.named_buffers(prefix + name + ".")

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self._children.items():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def children(self) -> Iterator["Module"]:
        return iter(self._children.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    # -- modes ----------------------------------------------------------------

    def train(self, mode: bool = True) -> "Module":
        object.__setattr__(self, "training", mode)
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    # -- state ----------------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {name: p.data.copy() for name, p in self.named_parameters()}
        out.update({name: b.copy() for name, b in self.named_buffers()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own: dict[str, np.ndarray] = {name: p.data for name, p in self.named_parameters()}
        own.update(dict(self.named_buffers()))
        missing = own.keys() - state.keys()
        extra = state.keys() - own.keys()
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, arr in own.items():
            value = np.asarray(state[name], dtype=np.float32)
            if value.shape != arr.shape:
                raise ValueError(f"{name}: shape {value.shape} != expected {arr.shape}")
            arr[...] = value

    def clear_grads(self) -> None:
        for p in self.parameters():
            p.clear_grad()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class ModuleList(Module):
    def __init__(self, modules=()) -> None:
        super().__init__()
        self._order: list[str] = []
        for m in modules:
            self.append(m)

    def append(self, module: Module) -> None:
        key = str(len(self._order))
        self._children[key] = module
        self._order.append(key)
        object.__setattr__(self, key, module)

    def __iter__(self) -> Iterator[Module]:
        return (self._children[k] for k in self._order)

    def __len__(self) -> int:
        return len(self._order)

    def __getitem__(self, i: int) -> Module:
        return self._children[self._order[i]]


class Sequential(Module):
    def __init__(self, *modules: Module) -> None:
        super().__init__()
        self._order = []
        for i, m in enumerate(modules):
            key = str(i)
            self._children[key] = m
            self._order.append(key)
            object.__setattr__(self, key, m)

    def __iter__(self) -> Iterator[Module]:
        return (self._children[k] for k in self._order)

    def __getitem__(self, i: int) -> Module:
        return self._children[self._order[i]]

    def forward(self, x: Tensor) -> Tensor:
        for key in self._order:
            x = self._children[key](x)
        return x


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class Linear(Module):
    def __init__(self, in_features: int, out_features: int, bias: bool = True,
                 rng: np.random.Generator | None = None, init: str = "uniform") -> None:
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        if init == "zeros":
            # np.zeros is lazy-allocated, so even huge layers build instantly
            self.weight = Parameter(np.zeros((out_features, in_features), dtype=np.float32))
            self.bias = Parameter(np.zeros(out_features, dtype=np.float32)) if bias else None
            return
        r = rng if rng is not None else np.random.default_rng()
        bound = 1.0 / np.sqrt(in_features)
        self.weight = Parameter(r.uniform(-bound, bound, size=(out_features, in_features)).astype(np.float32))
        if bias:
            self.bias = Parameter(r.uniform(-bound, bound, size=out_features).astype(np.float32))
        else:
            self.bias = None

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class Embedding(Module):
    def __init__(self, num_embeddings: int, dim: int, rng: np.random.Generator | None = None,
                 init_std: float = 0.02) -> None:
        super().__init__()
        r = rng if rng is not None else np.random.default_rng()
        self.weight = Parameter(r.normal(0.0, init_std, size=(num_embeddings, dim)).astype(np.float32))

    def forward(self, ids: np.ndarray) -> Tensor:
        return T.embedding_lookup(self.weight, ids)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-12) -> None:
        super().__init__()
        self.eps = eps
        self.weight = Parameter(np.ones(dim, dtype=np.float32))
        self.bias = Parameter(np.zeros(dim, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.weight, self.bias, self.eps)


class BatchNorm1d(Module):
    def __init__(self, num_features: int, momentum: float = 0.1, eps: float = 1e-5) -> None:
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.weight = Parameter(np.ones(num_features, dtype=np.float32))
        self.bias = Parameter(np.zeros(num_features, dtype=np.float32))
        self.register_buffer("running_mean", np.zeros(num_features, dtype=np.float32))
        self.register_buffer("running_var", np.ones(num_features, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return T.batchnorm_1d(
            x, self.weight, self.bias, self.running_mean, self.running_var,
            training=self.training, momentum=self.momentum, eps=self.eps,
        )


class Conv1d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: np.random.Generator | None = None) -> None:
        super().__init__()
        r = rng if rng is not None else np.random.default_rng()
        bound = 1.0 / np.sqrt(in_channels * kernel_size)
        self.weight = Parameter(
            r.uniform(-bound, bound, size=(out_channels, in_channels, kernel_size)).astype(np.float32))
        self.bias = Parameter(r.uniform(-bound, bound, size=out_channels).astype(np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return T.conv1d(x, self.weight, self.bias)


class Dropout(Module):
    def __init__(self, p: float, rng: np.random.Generator | None = None) -> None:
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout probability must be in [0, 1), got {p}")
        self.p = p
        self.rng = rng if rng is not None else np.random.default_rng()

    def forward(self, x: Tensor) -> Tensor:
        if not self.training or self.p == 0.0:
            return x
        keep = (self.rng.random(x.shape) >= self.p).astype(np.float32) / np.float32(1.0 - self.p)
        return x * Tensor(keep, dtype=x.dtype)


class ReLU(Module):
    def forward(self, x: Tensor) -> Tensor:
        return T.relu(x)


class Tanh(Module):
    def forward(self, x: Tensor) -> Tensor:
        return T.tanh(x)


class Flatten(Module):
    def forward(self, x: Tensor) -> Tensor:
        return T.reshape(x, (x.shape[0], -1))
