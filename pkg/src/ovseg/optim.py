"""AdamW with decoupled weight decay and named parameter groups."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class ParamGroup:
    name: str
    params: list[tuple[str, Tensor]]
    lr: float


@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


class AdamW:
    def __init__(
        self,
        groups: list[ParamGroup],
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.05,
    ):
        names = [n for g in groups for n, _ in g.params]
        if len(names) != len(set(names)):
            raise ValueError("a parameter appears in more than one group")
        self.groups = groups
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = AdamWState()
        for name, p in self.named_params():
            self.state.m[name] = np.zeros_like(p.data)
            self.state.v[name] = np.zeros_like(p.data)

    def named_params(self):
        for g in self.groups:
            yield from g.params

    def zero_grad(self) -> None:
        for _, p in self.named_params():
            p.grad = None

    def step(self) -> None:
        self.state.t += 1
        t = self.state.t
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**t
        c2 = 1.0 - b2**t
        for g in self.groups:
            for name, p in g.params:
                if not p.requires_grad:
                    continue
                if p.grad is None:
                    raise ValueError(f"missing gradient for trainable parameter {name}")
                dt = p.data.dtype
                grad = p.grad.astype(dt, copy=False)
                m = self.state.m[name]
                v = self.state.v[name]
                m *= dt.type(b1)
                m += dt.type(1.0 - b1) * grad
                v *= dt.type(b2)
                v += dt.type(1.0 - b2) * grad * grad
                mhat = m / dt.type(c1)
                vhat = v / dt.type(c2)
                update = mhat / (np.sqrt(vhat) + dt.type(self.eps))
                p.data = p.data - dt.type(g.lr) * update - dt.type(g.lr * self.weight_decay) * p.data


def adamw_step(params: list[Tensor], grads: list[np.ndarray], opt: AdamW) -> None:
    """Functional form: install ``grads`` on ``params`` and take one step."""
    for p, g in zip(params, grads):
        p.grad = g
    opt.step()
