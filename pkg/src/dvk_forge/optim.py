"""Parameter update rules and weight regularisation.

Each optimizer keeps per-parameter buffers keyed by parameter name and a
single step counter shared by all parameters, so ``step(net)`` advances the
whole network by one iteration. All arithmetic is elementwise.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DegenerateInputError, NumericalError


@dataclass(frozen=True)
class RegSpec:
    kind: str = "none"  # none | l1 | l2
    strength: float = 0.0

    def __post_init__(self):
        if self.kind not in ("none", "l1", "l2"):
            raise ValueError(f"unknown regularisation {self.kind!r}")
        if self.strength < 0:
            raise DegenerateInputError("regularisation strength must be >= 0")

    def penalty(self, theta: np.ndarray) -> float:
        if self.kind == "l1":
            return self.strength * float(np.abs(theta).sum())
        if self.kind == "l2":
            return self.strength * float((theta * theta).sum())
        return 0.0


# parameter names that regularisation applies to; biases and BN scales are exempt
WEIGHT_NAMES = ("weights", "W")


def regularize_grad(g, theta, reg: RegSpec | None) -> np.ndarray:
    """L2 adds 2*gamma*theta, L1 adds gamma*sign(theta) with sign(0) = 0."""
    if reg is None or reg.kind == "none" or reg.strength == 0.0:
        return g
    if reg.kind == "l2":
        return g + 2.0 * reg.strength * theta
    return g + reg.strength * np.sign(theta)


def apply_regularization(net) -> None:
    """Add each layer's penalty gradient to its weight gradients in place."""
    for layer in net.layers:
        if layer.reg is None:
            continue
        for name in WEIGHT_NAMES:
            if name in layer.grads:
                layer.grads[name] = regularize_grad(layer.grads[name], layer.params[name], layer.reg)


def regularization_penalty(net) -> float:
    total = 0.0
    for layer in net.layers:
        if layer.reg is not None:
            for name in WEIGHT_NAMES:
                if name in layer.params:
                    total += layer.reg.penalty(layer.params[name])
    return total


def _finite(g, key):
    if not np.all(np.isfinite(g)):
        raise NumericalError(f"non-finite gradient for {key}")


class Optimizer:
    name = "base"

    def __init__(self, lr: float):
        if not lr >= 0:
            raise ValueError("learning rate must be >= 0")
        self.lr = float(lr)
        self.t = 0
        self.state: dict[str, dict[str, np.ndarray]] = {}

    def _buf(self, key, name, like):
        slot = self.state.setdefault(key, {})
        if name not in slot:
            slot[name] = np.zeros_like(like, dtype=np.float64)
        return slot[name]

    def begin_step(self):
        self.t += 1

    def update(self, key: str, theta: np.ndarray, g: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def step(self, net) -> None:
        """Advance every trainable parameter of ``net`` by one iteration."""
        self.begin_step()
        for key, layer, pname in net.named_params():
            layer.params[pname] = self.update(key, layer.params[pname], layer.grads[pname])

    def scalars(self) -> dict:
        return {"t": self.t, "lr": self.lr}

    def load_scalars(self, d: dict):
        self.t = int(d["t"])
        self.lr = float(d["lr"])


class SGD(Optimizer):
    """theta <- theta - lr * g (descent direction)."""

    name = "sgd"

    def update(self, key, theta, g):
        _finite(g, key)
        return theta - self.lr * g


class Momentum(Optimizer):
    """Classical momentum: m <- mu m + g; theta <- theta - lr m."""

    name = "momentum"

    def __init__(self, lr: float, mu: float = 0.9):
        super().__init__(lr)
        self.mu = mu

    def update(self, key, theta, g):
        _finite(g, key)
        m = self._buf(key, "m", theta)
        m = self.mu * m + g
        self.state[key]["m"] = m
        return theta - self.lr * m


class Nesterov(Optimizer):
    """Nesterov momentum with a single gradient evaluation per step.

    g is taken at the current parameters; then
    m <- mu_t m + lr g and theta <- theta - (mu_{t+1} m + lr g).
    """

    name = "nesterov"

    def __init__(self, lr: float, mu: float = 0.9, mu_schedule: Callable[[int], float] | None = None):
        super().__init__(lr)
        self.mu = mu
        self.mu_schedule = mu_schedule or (lambda t: mu)

    def update(self, key, theta, g):
        _finite(g, key)
        mu_t, mu_next = self.mu_schedule(self.t), self.mu_schedule(self.t + 1)
        m = self._buf(key, "m", theta)
        m = mu_t * m + self.lr * g
        self.state[key]["m"] = m
        return theta - (mu_next * m + self.lr * g)


class Adam(Optimizer):
    name = "adam"

    def __init__(self, lr: float = 0.001, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        super().__init__(lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def update(self, key, theta, g):
        _finite(g, key)
        t = self.t
        m = self.beta1 * self._buf(key, "m", theta) + (1 - self.beta1) * g
        v = self.beta2 * self._buf(key, "v", theta) + (1 - self.beta2) * (g * g)
        self.state[key]["m"], self.state[key]["v"] = m, v
        m_hat = m / (1 - self.beta1 ** t)
        v_hat = v / (1 - self.beta2 ** t)
        return theta - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def constant_mu(mu: float) -> Callable[[int], float]:
    return lambda t: mu


def warmup_mu(mu: float, decay: float = 0.96, period: float = 250.0) -> Callable[[int], float]:
    """mu_t = mu (1 - 0.5 decay^(t / period)), rising towards ``mu``."""
    return lambda t: mu * (1.0 - 0.5 * decay ** (t / period))


class Nadam(Optimizer):
    """Adam with Nesterov momentum.

    m_t   = mu_t m + (1 - mu_t) g
    n_t   = nu n + (1 - nu) g^2
    m_hat = mu_{t+1} m_t / (1 - prod_{i<=t+1} mu_i) + (1 - mu_t) g / (1 - prod_{i<=t} mu_i)
    n_hat = nu n_t / (1 - nu^t)
    theta = theta - lr m_hat / (sqrt(n_hat) + eps)

    The momentum product is kept incrementally across steps.
    """

    name = "nadam"

    def __init__(self, lr: float = 0.001, mu: float = 0.9, nu: float = 0.999, eps: float = 1e-8,
                 mu_schedule: Callable[[int], float] | None = None):
        super().__init__(lr)
        self.mu, self.nu, self.eps = mu, nu, eps
        self.mu_schedule = mu_schedule or constant_mu(mu)
        self.mu_prod = 1.0  # prod_{i<=t} mu_i
        self._cur = None

    def begin_step(self):
        super().begin_step()
        mu_t, mu_next = self.mu_schedule(self.t), self.mu_schedule(self.t + 1)
        if not (mu_t < 1 and mu_next < 1):
            raise DegenerateInputError(f"momentum schedule reached {max(mu_t, mu_next)} >= 1")
        self.mu_prod = self.mu_prod * mu_t
        self._cur = (mu_t, mu_next, self.mu_prod, self.mu_prod * mu_next)

    def update(self, key, theta, g):
        _finite(g, key)
        if self._cur is None:
            raise RuntimeError("call begin_step() before update()")
        mu_t, mu_next, prod_t, prod_next = self._cur
        nu, t = self.nu, self.t
        m = mu_t * self._buf(key, "m", theta) + (1 - mu_t) * g
        n = nu * self._buf(key, "n", theta) + (g * g) * (1 - nu)
        self.state[key]["m"], self.state[key]["n"] = m, n
        m_hat = mu_next * m / (1 - prod_next) + (1 - mu_t) * g / (1 - prod_t)
        n_hat = nu * n / (1 - nu ** t)
        return theta - self.lr * m_hat / (np.sqrt(n_hat) + self.eps)

    def scalars(self):
        return {**super().scalars(), "mu_prod": self.mu_prod}

    def load_scalars(self, d):
        super().load_scalars(d)
        self.mu_prod = float(d.get("mu_prod", 1.0))


def make_optimizer(name: str, lr: float, *, beta1=0.9, beta2=0.999, mu=0.9, nu=0.999, eps=1e-8,
                   mu_warmup: bool = False) -> Optimizer:
    name = name.lower()
    if name == "sgd":
        return SGD(lr)
    if name == "momentum":
        return Momentum(lr, mu)
    if name == "nesterov":
        return Nesterov(lr, mu)
    if name == "adam":
        return Adam(lr, beta1, beta2, eps)
    if name == "nadam":
        return Nadam(lr, mu, nu, eps, warmup_mu(mu) if mu_warmup else None)
    raise ValueError(f"unknown optimizer {name!r}")


def sgd_step(theta, g, lr: float) -> np.ndarray:
    if not lr > 0:
        raise ValueError("learning rate must be > 0")
    _finite(np.asarray(g), "sgd")
    return np.asarray(theta, dtype=np.float64) - lr * np.asarray(g, dtype=np.float64)
