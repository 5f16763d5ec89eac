from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Parameter


@dataclass
class ParamGroup:
    params: list[Parameter]
    lr: float
    name: str = ""


@dataclass
class Adam:
    """Adam with bias-corrected moments and per-group learning rates.

    Gradients are read but never cleared; call :meth:`zero_grad` yourself.
    """

    groups: list[ParamGroup]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        seen = set()
        for g in self.groups:
            for p in g.params:
                if not p.name or p.name in seen:
                    raise ValueError(f"parameters need unique names, got {p.name!r}")
                seen.add(p.name)
                self.m.setdefault(p.name, np.zeros_like(p.data))
                self.v.setdefault(p.name, np.zeros_like(p.data))

    @classmethod
    def from_params(cls, params: list[Parameter], lr: float, **kw) -> "Adam":
        return cls([ParamGroup(list(params), lr)], **kw)

    def parameters(self) -> list[Parameter]:
        return [p for g in self.groups for p in g.params]

    def group(self, name: str) -> ParamGroup:
        for g in self.groups:
            if g.name == name:
                return g
        raise KeyError(name)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad.fill(0.0)

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for g in self.groups:
            for p in g.params:
                grad = p.grad
                if grad.shape != p.data.shape:
                    raise ValueError(f"gradient shape {grad.shape} != parameter shape {p.data.shape} for {p.name}")
                m = self.m[p.name]
                v = self.v[p.name]
                m *= b1
                m += (1.0 - b1) * grad
                v *= b2
                v += (1.0 - b2) * grad * grad
                if g.lr == 0.0:
                    continue
                p.data -= g.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"adam.step": np.array([float(self.step_count)])}
        for name in self.m:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.step_count = int(arrays["adam.step"][0])
        for name in self.m:
            self.m[name][...] = arrays[f"adam.m.{name}"]
            self.v[name][...] = arrays[f"adam.v.{name}"]
