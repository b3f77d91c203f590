"""Adam with per-group learning rates and exponential decay.

State (first/second moments, step count) round-trips bit-exactly through
checkpoints, which the exact-resume guarantee depends on.
"""

from __future__ import annotations

import numpy as np

from dgsplat.autodiff import DTensor


class Adam:
    def __init__(self, groups: list[tuple[str, DTensor, float]],
                 betas: tuple = (0.9, 0.999), eps: float = 1e-15,
                 decay: float = 0.1, decay_steps: int | None = None):
        """``groups``: (name, parameter, base learning rate) triples.

        The effective rate at step t is base * decay**(t / decay_steps),
        reaching base*decay at the end of the run.
        """
        names = [n for n, _, _ in groups]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names in optimizer groups")
        self.groups = list(groups)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.decay = decay
        self.decay_steps = decay_steps
        self.step_count = 0
        self.m = {n: np.zeros_like(p.data) for n, p, _ in groups}
        self.v = {n: np.zeros_like(p.data) for n, p, _ in groups}

    def zero_grad(self) -> None:
        for _, p, _ in self.groups:
            p.grad = None

    def lr_factor(self) -> float:
        if not self.decay_steps:
            return 1.0
        frac = min(1.0, self.step_count / self.decay_steps)
        return float(self.decay ** frac)

    def step(self) -> None:
        """One update on every parameter that received a gradient."""
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        factor = self.lr_factor()
        for name, p, base_lr in self.groups:
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= (base_lr * factor) * update

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        for name in self.m:
            self.m[name] = arrays[f"adam.m.{name}"].astype(self.m[name].dtype, copy=True)
            self.v[name] = arrays[f"adam.v.{name}"].astype(self.v[name].dtype, copy=True)
        self.step_count = int(step_count)
