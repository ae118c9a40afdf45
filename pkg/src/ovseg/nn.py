"""Parameter containers and the handful of layers the models use."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype=np.float32) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    """Minimal parameter tree: attributes that are Tensors or Modules (or lists of them)."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Tensor):
                        yield f"{name}.{i}", item
                    elif isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag
            if not flag:
                p.grad = None

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True, zero: bool = False):
        w = np.zeros((d_in, d_out), np.float32) if zero else he_uniform(rng, (d_in, d_out), d_in)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(d_out, np.float32), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class Conv2d(Module):
    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, k: int, stride: int = 1, padding: int = 0):
        self.weight = Tensor(he_uniform(rng, (k, k, c_in, c_out), k * k * c_in), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out, np.float32), requires_grad=True)
        self._stride = stride
        self._padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self._stride, padding=self._padding)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gain = Tensor(np.ones(dim, np.float32), requires_grad=True)
        self.bias = Tensor(np.zeros(dim, np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias)


class CrossAttention(Module):
    """Multi-head attention of queries ``a`` (B, n, d) over keys/values ``b`` (B, m, d)."""

    def __init__(self, rng: np.random.Generator, dim: int, heads: int = 4, zero_out: bool = False):
        if dim % heads:
            raise ValueError(f"width {dim} not divisible by {heads} heads")
        self.que = Linear(rng, dim, dim)
        self.key = Linear(rng, dim, dim)
        self.val = Linear(rng, dim, dim)
        self.out = Linear(rng, dim, dim, zero=zero_out)
        self._heads = heads

    def _split(self, x: Tensor) -> Tensor:
        B, n, d = x.shape
        h = self._heads
        return T.transpose(T.reshape(x, (B, n, h, d // h)), (0, 2, 1, 3))

    def __call__(self, a: Tensor, b: Tensor) -> Tensor:
        B, n, d = a.shape
        q, k, v = self._split(self.que(a)), self._split(self.key(b)), self._split(self.val(b))
        scale = 1.0 / np.sqrt(d // self._heads)
        attn = T.softmax((q @ T.transpose(k, (0, 1, 3, 2))) * scale, axis=-1)
        ctx = T.reshape(T.transpose(attn @ v, (0, 2, 1, 3)), (B, n, d))
        return self.out(ctx)
