"""Parameter containers: a small Module base class and the layers built on it."""

from __future__ import annotations

import numpy as np

from . import ops
from .tensor import Tensor, default_dtype


def parameter(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=default_dtype()), requires_grad=True)


class Module:
    """Collects trainable tensors from attributes, recursing into sub-modules.

    Names are dotted attribute paths in definition order, which is also the
    order used by checkpoints.
    """

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            key = f"{prefix}{name}"
            if isinstance(value, Tensor):
                out[key] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(key + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{key}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for k, p in params.items():
            if state[k].shape != p.shape:
                raise ValueError(f"{k}: stored shape {state[k].shape} vs model {p.shape}")
            p.data = np.array(state[k], dtype=p.dtype)

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True,
                 scale: float = 1.0):
        self.weight = parameter(rng.normal(0.0, scale / np.sqrt(n_in), size=(n_in, n_out)))
        self.bias = parameter(np.zeros(n_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gamma = parameter(np.ones(dim))
        self.beta = parameter(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta)


class Conv2d(Module):
    """Stride-1 'same' convolution on NHWC tensors."""

    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 scale: float = 1.0):
        fan_in = kernel * kernel * c_in
        self.weight = parameter(rng.normal(0.0, scale / np.sqrt(fan_in),
                                           size=(kernel, kernel, c_in, c_out)))
        self.bias = parameter(np.zeros(c_out))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias)
