"""Registry of gradient checks: every differentiable primitive plus composite losses.

Each entry builds a scalar function and a random point from a seeded rng.
Primitive inputs are drawn with a margin from the kinks of relu, abs, max
and min so that central differences are meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import ModelConfig, ProtoPNet
from .training import TrainConfig, total_loss

PRIMITIVE_TOL = 1e-5
COMPOSITE_TOL = 1e-3

Builder = Callable[[np.random.Generator], tuple[Callable[..., Tensor], list[np.ndarray]]]


@dataclass(frozen=True)
class Check:
    name: str
    build: Builder
    tolerance: float
    step: float = 1e-4
    ops: tuple[str, ...] = ()  # primitives exercised, used to aim fault injection


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float
    passed: bool
    instances: int


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    return ad.sum(out * Tensor(w))


def _away_from_zero(rng, shape, margin=0.1):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(margin, 1.0, size=shape)


def _distinct(rng, shape, gap=0.01):
    # a random permutation of evenly spaced values: every max/min is unique by `gap`
    n = int(np.prod(shape))
    return (rng.permutation(n) * gap - n * gap / 2).reshape(shape)


def _unary(op, sampler):
    def build(rng):
        x = sampler(rng)
        w = rng.normal(size=np.shape(op(Tensor(x)).data))
        return (lambda t: _weighted(op(t), w)), [x]

    return build


def _binary(op, shape_a, shape_b):
    def build(rng):
        a, b = rng.normal(size=shape_a), rng.normal(size=shape_b)
        w = rng.normal(size=np.shape(op(Tensor(a), Tensor(b)).data))
        return (lambda s, t: _weighted(op(s, t), w)), [a, b]

    return build


def _conv(rng):
    x, k = rng.normal(size=(2, 2, 6, 5)), rng.normal(size=(3, 2, 3, 3))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    w = rng.normal(size=ad.conv2d(Tensor(x), Tensor(k), stride, pad).shape)
    return (lambda s, t: _weighted(ad.conv2d(s, t, stride, pad), w)), [x, k]


def _dense(rng):
    x, wt, b = rng.normal(size=(3, 4)), rng.normal(size=(5, 4)), rng.normal(size=5)
    w = rng.normal(size=(3, 5))
    return (lambda s, t, u: _weighted(ad.dense(s, t, u), w)), [x, wt, b]


def _cross_entropy(rng):
    logits = rng.normal(size=(4, 5)) * 3
    labels = rng.integers(0, 5, size=4)
    return (lambda t: ad.softmax_cross_entropy(t, labels)), [logits]


def _distances(rng):
    z, p = rng.random((2, 4, 3, 3)), rng.random((5, 4))
    w = rng.normal(size=(2, 5, 3, 3))
    return (lambda s, t: _weighted(ad.squared_distances(s, t), w)), [z, p]


def _log_similarity(rng):
    d = rng.uniform(0.01, 3.0, size=(4, 3))
    w = rng.normal(size=d.shape)
    return (lambda t: _weighted(ad.log_similarity(t, 1e-4), w)), [d]


def _similarity_of_latent(mode):
    def build(rng):
        from .model import distance_term

        z, p = rng.random((4, 3, 3)), rng.random((5, 4))
        w = rng.normal(size=(5, 3, 3))
        return (lambda t: _weighted(ad.log_similarity(distance_term(t, Tensor(p), mode), 1e-4), w)), [z]

    return build


TOY_CONFIG = ModelConfig(image_height=16, image_width=16, num_classes=3, prototypes_per_class=2,
                         latent_dim=4, channels=(3, 4, 4))


def _model_from(names, tensors, class_of) -> ProtoPNet:
    store = ad.ParameterStore()
    store._params = dict(zip(names, tensors))
    return ProtoPNet(TOY_CONFIG, store, class_of)


def _composite(rng):
    """Full training loss of a small model, differentiated w.r.t. every parameter."""
    model = ProtoPNet.initialize(TOY_CONFIG, rng)
    for name, t in model.params.items():
        if name.endswith("bias"):
            t.data[...] = rng.normal(0.0, 0.1, t.shape)
    model.last_layer.data[...] += rng.normal(0.0, 0.1, model.last_layer.shape)
    images = rng.random((2, 3, 16, 16))
    labels = rng.integers(0, TOY_CONFIG.num_classes, size=2)
    names = model.params.names()
    cfg = TrainConfig()
    class_of = model.bank.class_of

    def fn(*tensors):
        return total_loss(_model_from(names, tensors, class_of), images, labels, cfg)[0]

    return fn, [model.params[n].data.copy() for n in names]


REGISTRY: dict[str, Check] = {c.name: c for c in [
    Check("add", _binary(ad.add, (3, 4), (4,)), PRIMITIVE_TOL, ops=("add",)),
    Check("mul", _binary(ad.mul, (3, 1), (3, 4)), PRIMITIVE_TOL, ops=("mul",)),
    Check("sum", _unary(lambda t: ad.sum(t, axis=1), lambda r: r.normal(size=(3, 4, 2))), PRIMITIVE_TOL, ops=("sum",)),
    Check("mean", _unary(lambda t: ad.mean(t, axis=(0, 2)), lambda r: r.normal(size=(3, 4, 2))), PRIMITIVE_TOL,
          ops=("sum",)),
    Check("amax", _unary(lambda t: ad.amax(t, axis=(1, 2)), lambda r: _distinct(r, (3, 4, 2))), PRIMITIVE_TOL,
          ops=("amax",)),
    Check("amin", _unary(lambda t: ad.amin(t, axis=0), lambda r: _distinct(r, (3, 4))), PRIMITIVE_TOL, ops=("amin",)),
    Check("abs", _unary(ad.abs, lambda r: _away_from_zero(r, (3, 4))), PRIMITIVE_TOL, ops=("abs",)),
    Check("log", _unary(ad.log, lambda r: r.uniform(0.5, 3.0, (3, 4))), PRIMITIVE_TOL, ops=("log",)),
    Check("sqrt", _unary(ad.sqrt, lambda r: r.uniform(0.5, 3.0, (3, 4))), PRIMITIVE_TOL, ops=("sqrt",)),
    Check("reshape", _unary(lambda t: ad.reshape(t, (4, 3)), lambda r: r.normal(size=(3, 4))), PRIMITIVE_TOL,
          ops=("reshape",)),
    Check("transpose", _unary(lambda t: ad.transpose(t, (2, 0, 1)), lambda r: r.normal(size=(2, 3, 4))),
          PRIMITIVE_TOL, ops=("transpose",)),
    Check("getitem", _unary(lambda t: t[1:, ::2], lambda r: r.normal(size=(3, 5))), PRIMITIVE_TOL, ops=("getitem",)),
    Check("relu", _unary(ad.relu, lambda r: _away_from_zero(r, (3, 4))), PRIMITIVE_TOL, ops=("relu",)),
    Check("sigmoid", _unary(ad.sigmoid, lambda r: r.normal(size=(3, 4)) * 3), PRIMITIVE_TOL, ops=("sigmoid",)),
    Check("conv2d", _conv, PRIMITIVE_TOL, ops=("conv2d",)),
    Check("maxpool2d", _unary(lambda t: ad.maxpool2d(t, 2, 2), lambda r: _distinct(r, (2, 2, 6, 4))), PRIMITIVE_TOL,
          ops=("maxpool2d",)),
    Check("maxpool2d_overlap", _unary(lambda t: ad.maxpool2d(t, 3, 1), lambda r: _distinct(r, (2, 5, 5))),
          PRIMITIVE_TOL, ops=("maxpool2d",)),
    Check("dense", _dense, PRIMITIVE_TOL, ops=("dense",)),
    Check("softmax_cross_entropy", _cross_entropy, PRIMITIVE_TOL, ops=("softmax_cross_entropy",)),
    Check("squared_distances", _distances, PRIMITIVE_TOL, ops=("squared_distances",)),
    Check("log_similarity", _log_similarity, PRIMITIVE_TOL, ops=("log_similarity",)),
    Check("similarity_map[squared]", _similarity_of_latent("squared"), PRIMITIVE_TOL,
          ops=("squared_distances", "log_similarity")),
    Check("similarity_map[euclidean]", _similarity_of_latent("euclidean"), PRIMITIVE_TOL,
          ops=("squared_distances", "sqrt", "log_similarity")),
    Check("total_loss", _composite, COMPOSITE_TOL, step=1e-6, ops=("conv2d", "relu", "maxpool2d", "sigmoid",
                                                                  "squared_distances", "amin", "dense")),
]}


def run_check(check: Check, seed: int = 0, instances: int = 10) -> CheckResult:
    worst = 0.0
    passed = True
    for i in range(instances):
        rng = np.random.default_rng([seed, i, sum(check.name.encode())])
        fn, point = check.build(rng)
        report = ad.finite_difference_check(fn, point, step=check.step, tolerance=check.tolerance)
        worst = max(worst, max(report.max_rel_error, default=0.0))
        passed = passed and report.passed
    return CheckResult(check.name, worst, check.tolerance, passed, instances)


def run_gradcheck(seed: int = 0, instances: int = 10, inject_fault: str | None = None,
                  names=None) -> list[CheckResult]:
    """Run every registered check (or ``names``); ``inject_fault`` names a primitive
    whose backward output is scaled by 1.01 during the run."""
    checks = [REGISTRY[n] for n in (names or REGISTRY)]
    if inject_fault is None:
        return [run_check(c, seed, instances) for c in checks]
    with ad.inject_fault(inject_fault):
        return [run_check(c, seed, instances) for c in checks]
