from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import Tensor


class AdamW:
    """Adam with decoupled weight decay.

    Moments live on the optimizer and persist between steps, so a resumed
    run needs ``state_dict``/``load_state_dict`` alongside the parameters.
    """

    def __init__(
        self,
        params: Sequence[tuple[str, Tensor]] | Sequence[Tensor],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        named = []
        for i, p in enumerate(params):
            named.append(p if isinstance(p, tuple) else (f"p{i}", p))
        names = [n for n, _ in named]
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique")
        self.named = named
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in named}
        self.v = {n: np.zeros_like(p.data) for n, p in named}

    def step(self) -> None:
        for name, p in self.named:
            if p.grad is None:
                raise RuntimeError(f"parameter {name!r} has no gradient")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in self.named:
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay:
                p.data = p.data * (1.0 - self.lr * self.weight_decay)
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for _, p in self.named:
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {"adam.step": np.array([float(self.t)])}
        for name, _ in self.named:
            state[f"adam.m.{name}"] = self.m[name].copy()
            state[f"adam.v.{name}"] = self.v[name].copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.t = int(state["adam.step"][0])
        for name, p in self.named:
            self.m[name] = np.array(state[f"adam.m.{name}"], dtype=np.float64).reshape(p.shape)
            self.v[name] = np.array(state[f"adam.v.{name}"], dtype=np.float64).reshape(p.shape)


def adamw_step(opt: AdamW, lr: float | None = None, weight_decay: float | None = None) -> None:
    """One AdamW update with optional per-call lr/decay overrides."""
    if lr is not None:
        opt.lr = lr
    if weight_decay is not None:
        opt.weight_decay = weight_decay
    opt.step()
