"""Baseline hazard families and their derivatives with respect to omega.

Every family exposes the baseline hazard, the cumulative baseline hazard and
first/second omega-derivatives of both the cumulative hazard and the log
hazard. These are exactly the per-record quantities needed to assemble the
gradient and observed information of the proportional-hazards log-posterior.

All evaluators are vectorised over the time argument: for ``n`` time points
and ``q`` baseline parameters, gradients have shape ``(n, q)`` and Hessians
``(n, q, q)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import DomainError, QuadratureError, ValidationError

FAMILIES = ("exp", "weibull", "gompertz", "pwexp", "exppoly")

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(32)
_QUAD_RTOL = 1e-10
_QUAD_MAX_LEVEL = 14


@dataclass(frozen=True)
class BaselineFamily:
    """A parametric baseline hazard family.

    Parameters
    ----------
    kind : str
        One of ``exp``, ``weibull``, ``gompertz``, ``pwexp``, ``exppoly``.
    knots : tuple of float, optional
        Interval end points ``0 = tau_0 < ... < tau_q`` for ``pwexp``. The
        last knot may be ``inf``.
    order : int, optional
        Number of polynomial coefficients ``q`` for ``exppoly`` (the log
        hazard is a polynomial of degree ``q - 1``).
    """

    kind: str
    knots: Optional[Tuple[float, ...]] = None
    order: Optional[int] = None

    def __post_init__(self):
        if self.kind not in FAMILIES:
            raise ValidationError(f"unknown baseline family {self.kind!r}")
        if self.kind == "pwexp":
            if self.knots is None:
                raise ValidationError("pwexp family needs knots")
            knots = tuple(float(k) for k in self.knots)
            object.__setattr__(self, "knots", knots)
            if len(knots) < 2:
                raise ValidationError("pwexp needs at least two knots")
            if knots[0] != 0.0:
                raise ValidationError("first knot must be 0")
            if any(not b > a for a, b in zip(knots, knots[1:])):
                raise ValidationError("knots must be strictly increasing")
            if any(math.isnan(k) for k in knots):
                raise ValidationError("knots must not be NaN")
        elif self.knots is not None:
            raise ValidationError(f"{self.kind} family takes no knots")
        if self.kind == "exppoly":
            if self.order is None or int(self.order) != self.order or self.order < 1:
                raise ValidationError("exppoly order must be an integer >= 1")
            object.__setattr__(self, "order", int(self.order))
        elif self.order is not None:
            raise ValidationError(f"{self.kind} family takes no order")

    @classmethod
    def exp(cls):
        return cls("exp")

    @classmethod
    def weibull(cls):
        return cls("weibull")

    @classmethod
    def gompertz(cls):
        return cls("gompertz")

    @classmethod
    def piecewise(cls, knots: Sequence[float]):
        return cls("pwexp", knots=tuple(knots))

    @classmethod
    def exppoly(cls, order: int):
        return cls("exppoly", order=order)

    @property
    def q_params(self) -> int:
        if self.kind == "exp":
            return 1
        if self.kind in ("weibull", "gompertz"):
            return 2
        if self.kind == "pwexp":
            return len(self.knots) - 1
        return self.order

    @property
    def parameter_names(self) -> list[str]:
        if self.kind in ("weibull", "gompertz"):
            return ["omega1", "omega2"]
        return [f"omega{k}" for k in range(self.q_params)]

    def describe(self) -> dict:
        """Serialisable descriptor (variant tag plus hyperparameters)."""
        out = {"family": self.kind}
        if self.kind == "pwexp":
            out["knots"] = [float(k).hex() for k in self.knots]
        if self.kind == "exppoly":
            out["order"] = self.order
        return out

    @classmethod
    def from_descriptor(cls, desc: dict) -> "BaselineFamily":
        kind = desc["family"]
        knots = desc.get("knots")
        if knots is not None:
            knots = tuple(float.fromhex(k) if isinstance(k, str) else float(k) for k in knots)
        return cls(kind, knots=knots, order=desc.get("order"))

    def __str__(self):
        if self.kind == "pwexp":
            return f"pwexp(knots={list(self.knots)})"
        if self.kind == "exppoly":
            return f"exppoly(order={self.order})"
        return self.kind


@dataclass(frozen=True)
class HazardEval:
    """Baseline hazard quantities at a vector of time points."""

    lambda0: np.ndarray
    log_lambda0: np.ndarray
    Lambda0: np.ndarray
    grad_Lambda0: np.ndarray
    hess_Lambda0: np.ndarray
    grad_log_lambda0: np.ndarray
    hess_log_lambda0: np.ndarray


def _check_inputs(family, omega, t):
    omega = np.asarray(omega, dtype=float).reshape(-1)
    if omega.shape[0] != family.q_params:
        raise DomainError(
            f"{family} expects {family.q_params} baseline parameters, got {omega.shape[0]}"
        )
    if not np.all(np.isfinite(omega)):
        raise DomainError("omega must be finite")
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if t.ndim != 1:
        raise DomainError("t must be a scalar or a 1-d array")
    if not np.all((t > 0) & np.isfinite(t)):
        raise DomainError("time points must lie in (0, inf)")
    return omega, t


def evaluate(family: BaselineFamily, omega, t) -> HazardEval:
    """Evaluate a baseline family and its omega-derivatives at times ``t``.

    Raises
    ------
    DomainError
        If any time is not in ``(0, inf)`` or ``omega`` has the wrong length.
    QuadratureError
        If the exponentiated-polynomial integrals fail to converge.
    """
    omega, t = _check_inputs(family, omega, t)
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        return _EVALUATORS[family.kind](family, omega, t)



def _eval_exp(family, omega, t):
    n = t.shape[0]
    rate = np.exp(omega[0])
    Lam = rate * t
    return HazardEval(
        lambda0=np.full(n, rate),
        log_lambda0=np.full(n, omega[0]),
        Lambda0=Lam,
        grad_Lambda0=Lam[:, None],
        hess_Lambda0=Lam[:, None, None].copy(),
        grad_log_lambda0=np.ones((n, 1)),
        hess_log_lambda0=np.zeros((n, 1, 1)),
    )


def _eval_weibull(family, omega, t):
    w1, w2 = omega
    shape = np.exp(w2)
    logt = np.log(t)
    Lam = np.exp(w1 + shape * logt)
    log_lam = w1 + w2 + (shape - 1.0) * logt
    # t log(t) lambda0 == shape * log(t) * Lambda0
    d2 = shape * logt * Lam
    n = t.shape[0]
    grad = np.stack([Lam, d2], axis=1)
    hess = np.empty((n, 2, 2))
    hess[:, 0, 0] = Lam
    hess[:, 0, 1] = hess[:, 1, 0] = d2
    hess[:, 1, 1] = d2 * (1.0 + shape * logt)
    hess_log = np.zeros((n, 2, 2))
    hess_log[:, 1, 1] = shape * logt
    return HazardEval(
        lambda0=np.exp(log_lam),
        log_lambda0=log_lam,
        Lambda0=Lam,
        grad_Lambda0=grad,
        hess_Lambda0=hess,
        grad_log_lambda0=np.stack([np.ones(n), 1.0 + shape * logt], axis=1),
        hess_log_lambda0=hess_log,
    )


def _eval_gompertz(family, omega, t):
    w1, w2 = omega
    rate = np.exp(w2)
    log_lam = w1 + rate * t
    lam = np.exp(log_lam)
    Lam = np.exp(w1) * np.expm1(rate * t) / rate
    tl = t * lam
    n = t.shape[0]
    hess = np.empty((n, 2, 2))
    hess[:, 0, 0] = Lam
    hess[:, 0, 1] = hess[:, 1, 0] = tl - Lam
    hess[:, 1, 1] = tl * (t * rate - 1.0) + Lam
    hess_log = np.zeros((n, 2, 2))
    hess_log[:, 1, 1] = t * rate
    return HazardEval(
        lambda0=lam,
        log_lambda0=log_lam,
        Lambda0=Lam,
        grad_Lambda0=np.stack([Lam, tl - Lam], axis=1),
        hess_Lambda0=hess,
        grad_log_lambda0=np.stack([np.ones(n), t * rate], axis=1),
        hess_log_lambda0=hess_log,
    )


def piecewise_basis(knots: Sequence[float], t) -> Tuple[np.ndarray, np.ndarray]:
    """Interval indicators ``b(t)`` and exposure times ``B(t)``.

    ``b_k(t) = 1`` on ``(tau_k, tau_{k+1}]`` (right-closed so that an event
    exactly at a knot has positive hazard) and
    ``B_k(t) = 1[t > tau_k] * min(t - tau_k, tau_{k+1} - tau_k)``.
    """
    tau = np.asarray(knots, dtype=float)
    t = np.atleast_1d(np.asarray(t, dtype=float))[:, None]
    lo, hi = tau[:-1][None, :], tau[1:][None, :]
    b = ((t > lo) & (t <= hi)).astype(float)
    B = np.where(t > lo, np.minimum(t - lo, hi - lo), 0.0)
    return b, B


def _eval_pwexp(family, omega, t):
    b, B = piecewise_basis(family.knots, t)
    ew = np.exp(omega)
    lam = b @ ew
    covered = b.sum(axis=1) > 0
    log_lam = np.where(covered, b @ omega, -np.inf)
    gradL = B * ew[None, :]
    n, q = B.shape
    hess = np.zeros((n, q, q))
    idx = np.arange(q)
    hess[:, idx, idx] = gradL
    return HazardEval(
        lambda0=lam,
        log_lambda0=log_lam,
        Lambda0=gradL.sum(axis=1),
        grad_Lambda0=gradL,
        hess_Lambda0=hess,
        grad_log_lambda0=b,
        hess_log_lambda0=np.zeros((n, q, q)),
    )


def _exppoly_moments(omega, t, n_moments):
    """Integrals ``int_0^t s^m exp(poly(s)) ds`` for ``m < n_moments``.

    Composite 32-point Gauss-Legendre on ``2**level`` equal panels, refined
    until every moment of every record changes by less than ``_QUAD_RTOL``
    relative to the previous level.
    """
    powers = np.arange(n_moments)
    coef = omega[::-1]

    def integrate(level):
        panels = 2**level
        # node position within [0, 1], shape (panels * 32,)
        u = ((np.arange(panels)[:, None] + (_GL_NODES[None, :] + 1.0) / 2.0) / panels).ravel()
        w = np.tile(_GL_WEIGHTS, panels) / (2.0 * panels)
        s = t[:, None] * u[None, :]
        f = np.exp(np.polyval(coef, s)) * w[None, :]
        m = np.einsum("ij,ijk->ik", f, s[:, :, None] ** powers[None, None, :])
        return m * t[:, None]

    prev = integrate(0)
    change = np.inf
    for level in range(1, _QUAD_MAX_LEVEL + 1):
        cur = integrate(level)
        scale = np.maximum(np.abs(cur), np.finfo(float).tiny)
        change = float(np.max(np.abs(cur - prev) / scale))
        if not np.all(np.isfinite(cur)):
            raise QuadratureError("exppoly cumulative hazard overflowed")
        if change < _QUAD_RTOL:
            return cur
        prev = cur
    raise QuadratureError("exppoly quadrature did not converge", achieved=change)


def _eval_exppoly(family, omega, t):
    q = family.q_params
    mom = _exppoly_moments(omega, t, 2 * q - 1)
    n = t.shape[0]
    powers = np.arange(q)
    bt = t[:, None] ** powers[None, :]
    log_lam = bt @ omega
    ij = powers[:, None] + powers[None, :]
    return HazardEval(
        lambda0=np.exp(log_lam),
        log_lambda0=log_lam,
        Lambda0=mom[:, 0].copy(),
        grad_Lambda0=mom[:, :q].copy(),
        hess_Lambda0=mom[:, ij],
        grad_log_lambda0=bt,
        hess_log_lambda0=np.zeros((n, q, q)),
    )


_EVALUATORS = {
    "exp": _eval_exp,
    "weibull": _eval_weibull,
    "gompertz": _eval_gompertz,
    "pwexp": _eval_pwexp,
    "exppoly": _eval_exppoly,
}


def cumulative_hazard(family: BaselineFamily, omega, t) -> np.ndarray:
    return evaluate(family, omega, t).Lambda0


def default_knots(times, q: int) -> Tuple[float, ...]:
    """Knots at the empirical ``j/q`` quantiles of the follow-up times.

    Uses the linear-interpolation quantile; the first knot is 0 and the last
    is ``inf``.

    >>> default_knots([1, 2, 3, 4], 2)
    (0.0, 2.5, inf)
    """
    if q < 1:
        raise ValidationError("number of intervals must be >= 1")
    times = np.asarray(times, dtype=float)
    if q == 1:
        return (0.0, math.inf)
    if np.unique(times).size < q:
        raise ValidationError(
            f"degenerate knots: {np.unique(times).size} distinct times for {q} intervals"
        )
    inner = np.quantile(times, np.arange(1, q) / q, method="linear")
    knots = (0.0, *(float(x) for x in inner), math.inf)
    if any(not b > a for a, b in zip(knots, knots[1:])):
        raise ValidationError(f"degenerate knots: {knots}")
    return knots
