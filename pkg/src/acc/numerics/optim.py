"""First/second-moment adaptive optimizer over named parameter dicts."""

from __future__ import annotations

import numpy as np

from ..errors import UsageError
from .tensor import Tensor


class Adam:
    """Adaptive-moment update. Params are an ordered {name: Tensor} dict;
    names key the moment entries persisted into checkpoints."""

    def __init__(self, params: dict[str, Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if not params:
            raise UsageError("optimizer needs at least one parameter")
        self.params = dict(params)
        self.lr = float(lr)
        self.beta1, self.beta2, self.eps = float(beta1), float(beta2), float(eps)
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                raise UsageError(f"missing grad for parameter {name!r}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_entries(self, prefix: str = "opt") -> dict[str, np.ndarray]:
        """Moments + step count as checkpoint entries."""
        out: dict[str, np.ndarray] = {
            f"{prefix}.step": np.asarray(float(self.step_count), dtype=np.float64)}
        for k in self.params:
            out[f"{prefix}.m.{k}"] = self.m[k]
            out[f"{prefix}.v.{k}"] = self.v[k]
        return out

    def load_state_entries(self, entries: dict[str, np.ndarray],
                           prefix: str = "opt") -> None:
        self.step_count = int(entries[f"{prefix}.step"])
        for k in self.params:
            self.m[k] = np.array(entries[f"{prefix}.m.{k}"])
            self.v[k] = np.array(entries[f"{prefix}.v.{k}"])
