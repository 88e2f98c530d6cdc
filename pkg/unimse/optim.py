"""
Per-group optimizers over numcore parameters
"""

from typing import Dict, Mapping

import numpy as np

from unimse.errors import ConfigError
from unimse.models import OptimConfig
from unimse.numcore import Tensor


class Optimizer:
    """Owns disjoint parameter groups, each with its own learning rate"""

    def __init__(self, groups: Mapping[str, Mapping[str, Tensor]], lrs: Mapping[str, float]):
        seen: Dict[int, str] = {}
        for group, params in groups.items():
            if group not in lrs:
                raise ConfigError(f"No learning rate for parameter group '{group}'")
            for name, p in params.items():
                if id(p) in seen:
                    raise ConfigError(f"Parameter {name} is in groups {seen[id(p)]} and {group}")
                seen[id(p)] = group
        self.groups = {g: dict(params) for g, params in groups.items()}
        self.lrs = dict(lrs)
        self.steps = 0

    def parameters(self):
        for params in self.groups.values():
            yield from params.items()

    def zero_grad(self) -> None:
        for _, p in self.parameters():
            p.zero_grad()

    def step(self) -> None:
        self.steps += 1
        for group, params in self.groups.items():
            for name, p in params.items():
                if p.grad is not None:
                    self._update(name, p, self.lrs[group])

    def _update(self, name: str, p: Tensor, lr: float) -> None:
        raise NotImplementedError


class SGD(Optimizer):
    def _update(self, name: str, p: Tensor, lr: float) -> None:
        p.data -= lr * p.grad


class Adam(Optimizer):
    """Adam with bias-corrected moment estimates"""

    def __init__(self, groups, lrs, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        super().__init__(groups, lrs)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def _update(self, name: str, p: Tensor, lr: float) -> None:
        m = self.m.setdefault(name, np.zeros_like(p.data))
        v = self.v.setdefault(name, np.zeros_like(p.data))
        m *= self.beta1
        m += (1.0 - self.beta1) * p.grad
        v *= self.beta2
        v += (1.0 - self.beta2) * p.grad ** 2
        m_hat = m / (1.0 - self.beta1 ** self.steps)
        v_hat = v / (1.0 - self.beta2 ** self.steps)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


def build_optimizer(groups: Mapping[str, Mapping[str, Tensor]], config: OptimConfig) -> Optimizer:
    lrs = {"backbone": config.lr_backbone, "main": config.lr_main, "pmf": config.lr_pmf}
    if config.name == "sgd":
        return SGD(groups, lrs)
    return Adam(groups, lrs, beta1=config.beta1, beta2=config.beta2, eps=config.eps)
