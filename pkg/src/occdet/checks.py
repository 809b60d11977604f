"""Seeded random loss batches and the finite-difference gradient suite."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .geometry import AggregationGroup, AggregationGroups
from .losses import (
    DiffScalar, LossBatch, LossConfig, agg_loss, batch_closure, cls_loss, com_loss, frc_loss,
    grad_check, occ_loss, reg_loss, rpn_loss,
)
from .poroi import OcclusionUnitParams, _forward, occlusion_unit_backward, occlusion_unit_forward

LOSS_NAMES = ("cls_loss", "reg_loss", "com_loss", "agg_loss", "rpn_loss", "occ_loss", "frc_loss",
              "occlusion_unit")
GRAD_TOLERANCE = 1e-4
# ReLUs make the occlusion unit piecewise smooth: probe it with a small step
# and only at points whose pre-activations sit clear of zero
_UNIT_STEP = 1e-6
_KINK_MARGIN = 1e-3


def random_groups(rng: np.random.Generator, positives: np.ndarray, t_star: np.ndarray,
                  max_gts: int = 4) -> AggregationGroups:
    """Assign positives to random ground truths; every gt with two or more
    members becomes a group whose target is the mean member target."""
    if len(positives) == 0:
        return AggregationGroups()
    owner = rng.integers(0, max_gts, size=len(positives))
    groups = []
    for gt in range(max_gts):
        members = positives[owner == gt]
        if len(members) >= 2:
            groups.append(AggregationGroup(gt, t_star[members].mean(axis=0), tuple(int(j) for j in members)))
    return AggregationGroups(tuple(groups))


def random_batch(rng: np.random.Generator, n_min: int = 4, n_max: int = 12) -> LossBatch:
    n = int(rng.integers(n_min, n_max + 1))
    p_star = (rng.random(n) < 0.5).astype(float)
    p_star[rng.integers(n)] = 1.0
    t_star = rng.normal(0.0, 1.0, size=(n, 4))
    t = t_star + rng.normal(0.0, 1.5, size=(n, 4))
    p = rng.uniform(0.05, 0.95, size=n)
    groups = random_groups(rng, np.flatnonzero(p_star == 1), t_star)
    return LossBatch(p, t, p_star, t_star, groups)


def _corrupted(fn: Callable[[np.ndarray], DiffScalar]) -> Callable[[np.ndarray], DiffScalar]:
    def wrapped(x):
        out = fn(x)
        grad = out.grad.copy()
        grad[0] += 1e-2 * (1.0 + abs(grad[0]))
        return DiffScalar(out.value, grad)
    return wrapped


def _closures(rng: np.random.Generator, cfg: LossConfig):
    """(name, loss function of a flat vector, point) for one random draw of every loss."""
    batch = random_batch(rng)
    x = batch.params()
    m = int(rng.integers(1, 4))
    scores = rng.uniform(0.05, 0.95, size=(m, 5))
    targets = (rng.random((m, 5)) < 0.5).astype(float)
    n_b = batch.num_params

    def frc(v):
        return frc_loss(batch.with_params(v[:n_b]), v[n_b:].reshape(m, 5), targets, cfg)

    params = OcclusionUnitParams.init(2, 3, 3, widths=(3, 2), seed=int(rng.integers(2**31)))
    while True:
        feature = rng.normal(size=(2, 3, 3))
        _, (_, a1, _, _, a2, _, _) = _forward(feature, params)
        if min(np.abs(a1).min(), np.abs(a2).min()) > _KINK_MARGIN:
            break

    def unit(v):
        p = params.from_flat(v)
        return DiffScalar(occlusion_unit_forward(feature, p), occlusion_unit_backward(feature, p, 1.0).flat())

    return [
        ("cls_loss", batch_closure(cls_loss, batch), x),
        ("reg_loss", batch_closure(reg_loss, batch), x),
        ("com_loss", batch_closure(com_loss, batch), x),
        ("agg_loss", batch_closure(agg_loss, batch, cfg), x),
        ("rpn_loss", batch_closure(rpn_loss, batch, cfg), x),
        ("occ_loss", lambda v: occ_loss(v.reshape(m, 5), targets, cfg.occ_normalize), scores.ravel()),
        ("frc_loss", frc, np.concatenate([x, scores.ravel()])),
        ("occlusion_unit", unit, params.flat()),
    ]


def gradient_suite(seed: int = 0, batches: int = 100, cfg: LossConfig = LossConfig(),
                   corrupt: str | None = None, step: float = 1e-4) -> dict[str, float]:
    """Largest relative gradient error per loss over ``batches`` random draws.

    ``corrupt`` names a loss whose analytic gradient is deliberately perturbed
    (a negative control for the checker).  The default step balances
    truncation against round-off for losses of order one.
    """
    if corrupt is not None and corrupt not in LOSS_NAMES:
        raise ValueError(f"unknown loss {corrupt!r}")
    rng = np.random.default_rng(seed)
    worst = dict.fromkeys(LOSS_NAMES, 0.0)
    for _ in range(batches):
        for name, fn, x in _closures(rng, cfg):
            if name == corrupt:
                fn = _corrupted(fn)
            h = _UNIT_STEP if name == "occlusion_unit" else step
            worst[name] = max(worst[name], grad_check(fn, x, step=h))
    return worst
