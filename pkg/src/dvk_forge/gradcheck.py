"""Central finite-difference checks for every layer backward and training loss.

The scalar probe for a layer is ``sum(forward(x) * R)`` with a fixed random
``R``, so the analytic input gradient is ``backward(R)``. Inputs are drawn
away from kinks (LeakyReLU at 0, pool ties, IoU and MAE at pred == target).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import layers as L
from .losses import TRAINING_LOSSES

STEP = 1e-5
TOLERANCE = 1e-5


def rel_error(analytic, numeric) -> float:
    """||a - n|| / (||a|| + ||n||), zero when both vanish."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = np.linalg.norm(a) + np.linalg.norm(n)
    return 0.0 if denom == 0 else float(np.linalg.norm(a - n) / denom)


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = STEP) -> np.ndarray:
    """Central differences of ``f`` w.r.t. every entry of ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


@dataclass
class GradResult:
    name: str
    errors: list[dict[str, float]] = field(default_factory=list)  # one dict per instance

    @property
    def max_error(self) -> float:
        return max((max(e.values()) for e in self.errors if e), default=0.0)

    @property
    def instances(self) -> int:
        return len(self.errors)

    def ok(self, tol: float = TOLERANCE) -> bool:
        return self.max_error <= tol


def check_layer(layer: L.Layer, x: np.ndarray, rng: np.random.Generator, train: bool = True) -> dict[str, float]:
    layer.build(x.shape[1:], rng)
    return check_built_layer(layer, x, rng, train)


def check_built_layer(layer: L.Layer, x: np.ndarray, rng: np.random.Generator, train: bool = True) -> dict[str, float]:
    y = layer.forward(x, train, rng)
    r = rng.standard_normal(y.shape)
    gx = layer.backward(r)
    grads = {k: v.copy() for k, v in layer.grads.items()}

    def probe():
        return float(np.sum(layer.forward(x, train, rng) * r))

    errs = {"input": rel_error(gx, numeric_grad(probe, x))}
    for name, p in layer.params.items():
        errs[name] = rel_error(grads[name], numeric_grad(probe, p))
    return errs


def check_network(net: L.Network, x: np.ndarray, rng: np.random.Generator) -> dict[str, float]:
    y, trace = net.forward(x)
    r = rng.standard_normal(y.shape)
    gx = net.backward(trace, r)
    grads = {k: layer.grads[p].copy() for k, layer, p in net.named_params()}

    def probe():
        return float(np.sum(net.forward(x)[0] * r))

    errs = {"input": rel_error(gx, numeric_grad(probe, x))}
    for key, layer, p in net.named_params():
        errs[key] = rel_error(grads[key], numeric_grad(probe, layer.params[p]))
    return errs


def check_loss(loss_fn, pred: np.ndarray, target: np.ndarray) -> dict[str, float]:
    analytic = loss_fn(pred, target).grad
    return {"pred": rel_error(analytic, numeric_grad(lambda: loss_fn(pred, target).value, pred))}


def _away_from_zero(rng, shape, gap=0.05):
    x = rng.uniform(gap, 1.5, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _distinct(rng, shape):
    # a shuffled grid keeps pool candidates separated by far more than the FD step
    n = int(np.prod(shape))
    return (rng.permutation(n).reshape(shape) - n / 2) * 0.01


def _off_target(rng, target, gap=0.02):
    """Prediction that differs from ``target`` by at least ``gap`` everywhere, staying in (0, 1)."""
    delta = rng.uniform(gap, 0.08, size=target.shape)
    up = target + delta < 0.99
    return np.where(up, target + delta, target - delta)


def _layer_cases() -> list[tuple[str, Callable[[np.random.Generator], dict[str, float]]]]:
    def conv(rng):
        k = rng.choice([1, 3])
        return check_layer(L.Conv2D(int(rng.integers(1, 4)), (k, k)),
                           rng.standard_normal((2, int(rng.integers(3, 6)), int(rng.integers(3, 6)),
                                                int(rng.integers(1, 4)))), rng)

    def dense(rng):
        return check_layer(L.Dense(int(rng.integers(1, 5))), rng.standard_normal((3, int(rng.integers(1, 6)))), rng)

    def leaky(rng):
        return check_layer(L.LeakyReLU(float(rng.choice([0.2, 5.5]))), _away_from_zero(rng, (2, 3, 3, 2)), rng)

    def sig(rng):
        return check_layer(L.Sigmoid(), 2 * rng.standard_normal((2, 3, 3, 2)), rng)

    def soft(rng):
        return check_layer(L.Softmax(), rng.standard_normal((3, int(rng.integers(2, 6)))), rng)

    def bn(rng):
        layer = L.BatchNorm()
        x = rng.standard_normal((3, 3, 3, 2)) * rng.uniform(0.5, 2.0) + rng.normal()
        layer.build(x.shape[1:], rng)
        layer.params["gamma"] = rng.uniform(0.5, 1.5, size=2)
        layer.params["beta"] = rng.normal(size=2)
        return check_built_layer(layer, x, rng)

    def dropout(rng):
        layer = L.Dropout(float(rng.choice([0.2, 0.5])))
        x = rng.standard_normal((2, 4, 4, 2))
        layer.frozen_mask = (rng.random(x.shape) >= layer.rate).astype(np.float64)
        return check_layer(layer, x, rng)

    def avg(rng):
        return check_layer(L.AvgPool(), rng.standard_normal((2, 4, 6, 2)), rng)

    def mx(rng):
        return check_layer(L.MaxPool(), _distinct(rng, (2, 4, 6, 2)), rng)

    def up(rng):
        f = int(rng.integers(1, 4))
        return check_layer(L.Upsample((f, f)), rng.standard_normal((2, 3, 2, 2)), rng)

    def add(rng):
        net = L.Network([L.Conv2D(2, (1, 1)), L.Conv2D(2, (3, 3)), L.Conv2D(2, (1, 1)),
                         L.AddSkip(1)], (5, 5, 1), seed=int(rng.integers(2**31)))
        # source 1 and the merge input share (3,3,2)
        return check_network(net, rng.standard_normal((2, 5, 5, 1)), rng)

    def concat(rng):
        net = L.Network([L.Conv2D(2, (1, 1)), L.Conv2D(3, (3, 3)), L.ConcatSkip(0, crop=True)],
                        (6, 7, 1), seed=int(rng.integers(2**31)))
        return check_network(net, rng.standard_normal((2, 6, 7, 1)), rng)

    return [("conv2d", conv), ("dense", dense), ("leaky_relu", leaky), ("sigmoid", sig), ("softmax", soft),
            ("batchnorm", bn), ("dropout", dropout), ("avgpool", avg), ("maxpool", mx), ("upsample", up),
            ("add_skip", add), ("concat_skip", concat)]


def _loss_cases():
    def make(name):
        fn = TRAINING_LOSSES[name]

        def case(rng):
            target = rng.uniform(0.1, 0.9, size=(2, 3, 3))
            return check_loss(fn, _off_target(rng, target), target)
        return case

    return [(f"loss:{n}", make(n)) for n in TRAINING_LOSSES]


def gradient_suite(instances: int = 20, seed: int = 0, only: Iterable[str] | None = None) -> list[GradResult]:
    """Run every case ``instances`` times with independent random draws."""
    cases = _layer_cases() + _loss_cases()
    if only is not None:
        wanted = set(only)
        cases = [c for c in cases if c[0] in wanted]
    results = []
    for i, (name, case) in enumerate(cases):
        res = GradResult(name)
        for rng in (np.random.default_rng(s) for s in np.random.SeedSequence([seed, i]).spawn(instances)):
            res.errors.append(case(rng))
        results.append(res)
    return results


def directional_check(net: L.Network, x: np.ndarray, grad_out: np.ndarray, rng: np.random.Generator,
                      h: float = 1e-7) -> float:
    """Compare the analytic directional derivative along a random parameter
    direction with a central difference; cheap enough for whole networks.

    The step is smaller than ``STEP`` because a whole-network perturbation
    moves thousands of pre-activations at once and larger steps push some
    across the LeakyReLU kink.
    """
    net.train()
    seed = int(rng.integers(2**31))
    y, trace = net.forward(x, np.random.default_rng(seed))
    net.backward(trace, grad_out)
    dirs = {k: rng.standard_normal(layer.params[p].shape) for k, layer, p in net.named_params()}
    analytic = sum(float(np.sum(layer.grads[p] * dirs[k])) for k, layer, p in net.named_params())

    base = {k: layer.params[p] for k, layer, p in net.named_params()}

    def shifted(sign):
        for k, layer, p in net.named_params():
            layer.params[p] = base[k] + sign * h * dirs[k]
        out = float(np.sum(net.forward(x, np.random.default_rng(seed))[0] * grad_out))
        for k, layer, p in net.named_params():
            layer.params[p] = base[k]
        return out

    numeric = (shifted(1.0) - shifted(-1.0)) / (2 * h)
    return abs(analytic - numeric) / max(abs(analytic) + abs(numeric), 1e-300)
