"""
Parameter containers built on ``tensor``.

A ``Module`` owns its parameters as plain ``Tensor`` attributes; every Tensor
attribute of a module is a parameter (constants are kept as numpy arrays).
Sub-modules may be attributes or lists of modules.
"""
import copy
from typing import Dict, Iterator, List, Tuple

import numpy as np

from . import tensor as T
from .exceptions import ShapeError
from .tensor import Tensor


class Module:

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{full}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        T.zero_grads(self.parameters())

    def requires_grad_(self, flag: bool = True) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
            if not flag:
                p.grad = None
        return self

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            unexpected = sorted(set(state) - set(own))
            if missing or unexpected:
                raise ShapeError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, value in state.items():
            if name not in own:
                continue
            if own[name].shape != tuple(np.shape(value)):
                raise ShapeError(f"{name}: expected {own[name].shape}, got {np.shape(value)}")
            own[name].data = np.array(value, dtype=own[name].data.dtype)

    def clone(self) -> "Module":
        twin = copy.deepcopy(self)
        twin.zero_grad()
        return twin

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Linear(Module):
    """y = x @ weight + bias, weight stored [in, out]."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 bias: bool = True, zero_init: bool = False):
        std = 0.0 if zero_init else 1.0 / np.sqrt(in_features)
        self.weight = T.parameter(rng.normal(0.0, 1.0, (in_features, out_features)) * std)
        if bias:
            self.bias = T.parameter(np.zeros(out_features))
        self.in_features = in_features
        self.out_features = out_features

    def __call__(self, x) -> Tensor:
        x = T.as_tensor(x)
        if x.shape[-1] != self.in_features:
            raise ShapeError(f"Linear expects last dim {self.in_features}, got {x.shape}")
        out = T.matmul(x, self.weight) if x.ndim >= 2 else T.matmul(T.reshape(x, (1, -1)), self.weight)[0]
        return out + self.bias if hasattr(self, "bias") else out


class RMSNorm(Module):

    def __init__(self, dim: int, eps: float = 1e-8, affine: bool = True):
        if affine:
            self.weight = T.parameter(np.ones(dim))
        self.eps = eps

    def __call__(self, x) -> Tensor:
        return T.rmsnorm(x, getattr(self, "weight", None), self.eps)


class FeedForward(Module):

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, zero_out: bool = False):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng, zero_init=zero_out)

    def __call__(self, x) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


def perturb_parameters(module: Module, rng: np.random.Generator, std: float = 0.05) -> None:
    """Add seeded noise to every parameter (moves zero-initialised branches off zero)."""
    for p in module.parameters():
        p.data = p.data + rng.normal(0.0, std, p.shape)
