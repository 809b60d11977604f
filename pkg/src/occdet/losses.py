"""Detection losses with analytic gradients.

Every loss returns a :class:`DiffScalar` whose gradient is taken with respect
to the batch's free prediction parameters, laid out as
``[p_0 .. p_{N-1}, t_0x, t_0y, t_0w, t_0h, t_1x, ...]``.  The Fast R-CNN loss
appends the occlusion scores (row-major, five per proposal) after those.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .geometry import AggregationGroups

EPS = 1e-7


class NonFiniteLossError(ArithmeticError):
    pass


class GradientCheckError(AssertionError):
    pass


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.0
    beta: float = 1.0
    lam: float = 1.0
    theta: float = 0.5
    occ_normalize: bool = False

    def __post_init__(self):
        for name in ("alpha", "beta", "lam"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0 < self.theta < 1:
            raise ValueError("theta must lie strictly between 0 and 1")


@dataclass(frozen=True)
class DiffScalar:
    value: float
    grad: np.ndarray

    def __add__(self, other: "DiffScalar") -> "DiffScalar":
        return DiffScalar(self.value + other.value, self.grad + other.grad)

    def scaled(self, w: float) -> "DiffScalar":
        return DiffScalar(w * self.value, w * self.grad)


@dataclass(frozen=True)
class LossBatch:
    """Predictions, labels and normalisers for one mini-batch of anchors.

    ``cls_mask`` marks the anchors that take part in classification (ignored
    anchors are left out of every term).  ``n_cls`` and ``n_reg`` default to
    the number of classified anchors and the number of positives.
    """

    p: np.ndarray
    t: np.ndarray
    p_star: np.ndarray
    t_star: np.ndarray
    groups: AggregationGroups = field(default_factory=AggregationGroups)
    cls_mask: np.ndarray | None = None
    n_cls: float | None = None
    n_reg: float | None = None

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float).ravel()
        n = len(p)
        t = np.asarray(self.t, dtype=float).reshape(n, 4)
        p_star = np.asarray(self.p_star, dtype=float).ravel()
        t_star = np.asarray(self.t_star, dtype=float).reshape(n, 4)
        if len(p_star) != n:
            raise ValueError("p and p_star differ in length")
        if not np.isin(p_star, (0.0, 1.0)).all():
            raise ValueError("labels p_star must be 0 or 1")
        mask = np.ones(n, bool) if self.cls_mask is None else np.asarray(self.cls_mask, bool).ravel()
        if np.any((p_star == 1) & ~mask):
            raise ValueError("a positive anchor is excluded from classification")
        members = self.groups.flat[0]
        if members.size and (members.min() < 0 or members.max() >= n):
            raise ValueError(f"group member index out of range for batch of {n}")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "p_star", p_star)
        object.__setattr__(self, "t_star", t_star)
        object.__setattr__(self, "cls_mask", mask)
        if self.n_cls is None:
            object.__setattr__(self, "n_cls", float(mask.sum()))
        if self.n_reg is None:
            object.__setattr__(self, "n_reg", float((p_star == 1).sum()))

    @property
    def size(self) -> int:
        return len(self.p)

    @property
    def n_com(self) -> int:
        return self.groups.rho

    @property
    def num_params(self) -> int:
        return 5 * self.size

    def params(self) -> np.ndarray:
        return np.concatenate([self.p, self.t.ravel()])

    def with_params(self, x: np.ndarray) -> "LossBatch":
        n = self.size
        return replace(self, p=x[:n], t=x[n:].reshape(n, 4))


def _smooth_l1_parts(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ax = np.abs(x)
    small = ax < 1.0
    value = np.where(small, 0.5 * x * x, ax - 0.5)
    deriv = np.where(small, x, np.sign(x))
    return value, deriv


def smooth_l1(x) -> DiffScalar:
    """Sum of per-coordinate smooth L1 with the quadratic/linear switch at 1."""
    x = np.asarray(x, dtype=float)
    value, deriv = _smooth_l1_parts(x)
    return DiffScalar(float(value.sum()), deriv.ravel())


def _check_open_unit(x: np.ndarray, what: str) -> None:
    if np.any(~((x > 0) & (x < 1))):
        raise ValueError(f"{what} must lie strictly inside (0, 1) before the log")


def _log_loss(prob: np.ndarray, label: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-element binary log loss and its derivative w.r.t. ``prob``."""
    q = np.clip(prob, EPS, 1.0 - EPS)
    value = -(label * np.log(q) + (1.0 - label) * np.log1p(-q))
    deriv = -(label / q) + (1.0 - label) / (1.0 - q)
    return value, deriv


def cls_loss(batch: LossBatch) -> DiffScalar:
    n = batch.size
    grad = np.zeros(5 * n)
    mask = batch.cls_mask
    if batch.n_cls == 0 or not mask.any():
        return DiffScalar(0.0, grad)
    _check_open_unit(batch.p[mask], "classification scores")
    value, deriv = _log_loss(batch.p[mask], batch.p_star[mask])
    grad[:n][mask] = deriv / batch.n_cls
    return DiffScalar(float(value.sum() / batch.n_cls), grad)


def reg_loss(batch: LossBatch) -> DiffScalar:
    n = batch.size
    grad = np.zeros(5 * n)
    pos = batch.p_star == 1
    if not pos.any():
        return DiffScalar(0.0, grad)
    if np.isnan(batch.t_star[pos]).any():
        raise ValueError("positive anchor without a regression target")
    value, deriv = _smooth_l1_parts(batch.t[pos] - batch.t_star[pos])
    g_t = np.zeros((n, 4))
    g_t[pos] = deriv / batch.n_reg
    grad[n:] = g_t.ravel()
    return DiffScalar(float(value.sum() / batch.n_reg), grad)


def com_loss(batch: LossBatch) -> DiffScalar:
    """Compactness: smooth L1 between each group target and the mean member prediction."""
    n = batch.size
    grad = np.zeros(5 * n)
    rho = batch.n_com
    if rho == 0:
        return DiffScalar(0.0, grad)
    members, gid, targets, sizes = batch.groups.flat
    sums = np.zeros((rho, 4))
    np.add.at(sums, gid, batch.t[members])
    resid = targets - sums / sizes[:, None]
    value, deriv = _smooth_l1_parts(resid)
    # d resid / d t_j = -1/|members|
    g_t = np.zeros((n, 4))
    np.add.at(g_t, members, -(deriv / (sizes[:, None] * rho))[gid])
    grad[n:] = g_t.ravel()
    return DiffScalar(float(value.sum() / rho), grad)


def agg_loss(batch: LossBatch, cfg: LossConfig) -> DiffScalar:
    out = reg_loss(batch)
    if cfg.beta != 0:
        out = out + com_loss(batch).scaled(cfg.beta)
    return out


def rpn_loss(batch: LossBatch, cfg: LossConfig) -> DiffScalar:
    out = cls_loss(batch)
    if cfg.alpha != 0:
        out = out + agg_loss(batch, cfg).scaled(cfg.alpha)
    return out


def occ_loss(scores, targets, normalize: bool = False) -> DiffScalar:
    """Log loss of the part visibility scores, summed over the five parts and
    over proposals (divided by the proposal count when ``normalize``)."""
    o = np.asarray(scores, dtype=float)
    o_star = np.asarray(targets, dtype=float)
    if o.ndim == 1:
        o, o_star = o[None, :], o_star.reshape(1, -1)
    if o.shape != o_star.shape or o.shape[-1] != 5:
        raise ValueError(f"expected (M, 5) scores and targets, got {o.shape} and {o_star.shape}")
    if o.size == 0:
        return DiffScalar(0.0, np.zeros(0))
    _check_open_unit(o, "visibility scores")
    value, deriv = _log_loss(o, o_star)
    scale = 1.0 / len(o) if normalize else 1.0
    return DiffScalar(float(value.sum() * scale), deriv.ravel() * scale)


def frc_loss(batch: LossBatch, occ_scores, occ_targets, cfg: LossConfig) -> DiffScalar:
    """Second-stage loss; gradient covers the batch parameters then the occlusion scores."""
    head = rpn_loss(batch, cfg)
    occ = occ_loss(occ_scores, occ_targets, cfg.occ_normalize)
    return DiffScalar(head.value + cfg.lam * occ.value,
                      np.concatenate([head.grad, cfg.lam * occ.grad]))


def grad_check(loss_fn: Callable[[np.ndarray], DiffScalar], x: np.ndarray,
               step: float = 1e-5, tolerance: float | None = None,
               floor: float = 1e-6) -> float:
    """Max relative error between the analytic gradient and central differences.

    ``loss_fn`` maps a parameter vector to a DiffScalar.  The relative error
    of each coordinate is ``|a - n| / max(|a|, |n|, floor)``.  When
    ``tolerance`` is given a larger error raises GradientCheckError.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.array(x, dtype=float)
    analytic = np.asarray(loss_fn(x).grad, dtype=float)
    if analytic.shape != x.shape:
        raise ValueError(f"gradient has {analytic.size} entries for {x.size} parameters")
    numeric = np.empty_like(x)
    for i in range(x.size):
        orig = x[i]
        x[i] = orig + step
        hi = loss_fn(x).value
        x[i] = orig - step
        lo = loss_fn(x).value
        x[i] = orig
        if not (math.isfinite(hi) and math.isfinite(lo)):
            raise NonFiniteLossError(f"non-finite loss while probing parameter {i}")
        numeric[i] = (hi - lo) / (2 * step)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    err = float(np.max(np.abs(analytic - numeric) / denom)) if x.size else 0.0
    if tolerance is not None and err > tolerance:
        raise GradientCheckError(f"max relative gradient error {err:.3e} exceeds {tolerance:.1e}")
    return err


def batch_closure(loss: Callable[..., DiffScalar], batch: LossBatch, *args) -> Callable[[np.ndarray], DiffScalar]:
    """Wrap ``loss(batch, *args)`` as a function of the flat parameter vector."""
    return lambda x: loss(batch.with_params(x), *args)
