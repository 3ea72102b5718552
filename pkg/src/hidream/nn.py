"""Parameter containers, initializers and the AdamW optimizer."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Tensor


class Module:
    """Registers Tensor attributes as parameters and Module attributes as children."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False

    def unfreeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = True

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters(prefix)}

    def load_state_dict(self, state: dict, prefix: str = "", strict: bool = True) -> None:
        own = dict(self.named_parameters(prefix))
        if strict:
            missing = sorted(set(own) - set(state))
            if missing:
                raise KeyError(f"missing parameters: {missing[:5]}")
        for k, p in own.items():
            if k in state:
                arr = np.asarray(state[k])
                if arr.shape != p.shape:
                    raise ValueError(f"{k}: shape {arr.shape} != {p.shape}")
                p.data = np.ascontiguousarray(arr, dtype=p.data.dtype)


class ModuleList(Module):
    def __init__(self, items=()):
        super().__init__()
        self._items = []
        for m in items:
            self.append(m)

    def append(self, m: Module) -> None:
        setattr(self, str(len(self._items)), m)
        self._items.append(m)

    def __getitem__(self, i):
        return self._items[i]

    def __len__(self):
        return len(self._items)

    def __iter__(self):
        return iter(self._items)


def normal(rng: np.random.Generator, shape, std: float, dtype: str) -> Tensor:
    return Tensor(rng.standard_normal(shape) * std, requires_grad=True, dtype=dtype)


def zeros(shape, dtype: str) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, dtype=dtype)


def full(shape, value: float, dtype: str) -> Tensor:
    return Tensor(np.full(shape, value), requires_grad=True, dtype=dtype)


def conv_weight(rng, out_ch: int, in_ch: int, k: int, dtype: str, zero: bool = False) -> Tensor:
    shape = (out_ch, in_ch, k, k) if k == 3 else (out_ch, in_ch)
    if zero:
        return zeros(shape, dtype)
    return normal(rng, shape, np.sqrt(1.0 / (in_ch * k * k)), dtype)


class AdamW:
    """Adam with decoupled weight decay, one learning rate per parameter group.

    ``groups`` is a list of dicts with keys ``params`` (list of (name, Tensor))
    and optionally ``lr`` and ``weight_decay``.
    """

    def __init__(self, groups, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 1e-2):
        self.betas = betas
        self.eps = eps
        self.groups = []
        for g in groups:
            self.groups.append({
                "params": list(g["params"]),
                "lr": g.get("lr", lr),
                "weight_decay": g.get("weight_decay", weight_decay),
            })
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def named_params(self):
        for g in self.groups:
            yield from g["params"]

    def zero_grad(self) -> None:
        for _, p in self.named_params():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for g in self.groups:
            lr, wd = g["lr"], g["weight_decay"]
            for name, p in g["params"]:
                if p.grad is None:
                    continue
                grad = p.grad
                m = self.m.get(name)
                if m is None:
                    m = self.m[name] = np.zeros_like(p.data)
                    self.v[name] = np.zeros_like(p.data)
                v = self.v[name]
                m *= b1
                m += (1 - b1) * grad
                v *= b2
                v += (1 - b2) * grad * grad
                if lr == 0:
                    continue
                upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
                if wd:
                    p.data -= p.data.dtype.type(lr * wd) * p.data
                p.data -= p.data.dtype.type(lr) * upd.astype(p.data.dtype)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {"__t__": np.array([self.t], dtype=np.float64)}
        for k, m in self.m.items():
            out[f"m.{k}"] = m
            out[f"v.{k}"] = self.v[k]
        return out

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["__t__"][0])
        for k, arr in state.items():
            if k.startswith("m."):
                self.m[k[2:]] = np.array(arr, copy=True)
            elif k.startswith("v."):
                self.v[k[2:]] = np.array(arr, copy=True)
