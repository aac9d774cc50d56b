"""Local MAP estimation and Gaussian credible intervals."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
import scipy.linalg
from scipy.stats import norm

from .data import ModelSignature, SurvivalDataset, signature
from .errors import NumericalError, OptimizationError, ValidationError
from .hazard import BaselineFamily
from .posterior import GaussianPrior, log_posterior

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 100
ARMIJO = 1e-4
MAX_HALVINGS = 50


@dataclass(frozen=True, eq=False)
class LocalFit:
    """One center's MAP fit: the payload that leaves the center."""

    beta_hat: np.ndarray
    omega_hat: np.ndarray
    M_hat: np.ndarray
    Gamma_local: np.ndarray
    n: int
    events: int
    signature: ModelSignature
    log_post_at_mode: float
    converged: bool
    iterations: int
    grad_norm: float

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate([self.beta_hat, self.omega_hat])

    @property
    def family(self) -> BaselineFamily:
        return self.signature.family

    @property
    def p(self) -> int:
        return self.beta_hat.shape[0]

    def intervals(self, alpha: float = 0.025) -> "CredibleIntervals":
        return credible_intervals(self.theta, self.M_hat, alpha, names=parameter_names(self.signature))


@dataclass(frozen=True, eq=False)
class CredibleIntervals:
    """Per-parameter ``estimate +/- xi_alpha sqrt((M^-1)_kk)``."""

    names: List[str]
    estimate: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    alpha: float

    @property
    def half_width(self) -> np.ndarray:
        return (self.upper - self.lower) / 2.0

    def rows(self):
        for name, e, lo, hi in zip(self.names, self.estimate, self.lower, self.upper):
            yield name, float(e), float(lo), float(hi)


def parameter_names(sig: ModelSignature) -> List[str]:
    return list(sig.columns) + sig.family.parameter_names


def credible_intervals(estimate, M, alpha: float = 0.025, names: Optional[Sequence[str]] = None):
    """Gaussian credible intervals at level ``1 - 2 alpha`` from precision ``M``.

    Raises
    ------
    numpy.linalg.LinAlgError
        If ``M`` is singular or not positive definite.
    """
    if not 0 < alpha <= 0.5:
        raise ValidationError("alpha must lie in (0, 0.5]")
    estimate = np.asarray(estimate, dtype=float)
    M = np.asarray(M, dtype=float)
    try:
        factor = scipy.linalg.cho_factor(M, lower=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise np.linalg.LinAlgError(f"precision matrix is not positive definite: {exc}") from None
    var = np.diag(scipy.linalg.cho_solve(factor, np.eye(M.shape[0])))
    xi = float(norm.isf(alpha))
    half = xi * np.sqrt(var)
    if names is None:
        names = [f"theta{k}" for k in range(estimate.shape[0])]
    return CredibleIntervals(list(names), estimate, estimate - half, estimate + half, alpha)


def initial_point(dataset: SurvivalDataset, family: BaselineFamily) -> np.ndarray:
    """``beta = 0`` and a baseline matched to the crude event rate."""
    q = family.q_params
    omega = np.zeros(q)
    if dataset.n == 0:
        return np.concatenate([np.zeros(dataset.p), omega])
    total = float(dataset.times.sum())
    log_rate = math.log((dataset.events + 0.5) / total)
    if family.kind == "pwexp":
        omega[:] = log_rate
    else:
        omega[0] = log_rate
    if family.kind == "gompertz":
        # keep exp(omega2) * t of order one on the observed time scale
        omega[1] = -math.log(float(dataset.times.mean()))
    return np.concatenate([np.zeros(dataset.p), omega])


def _objective(dataset, family, prior, theta, p, hessian=True):
    return log_posterior(dataset, family, theta[:p], theta[p:], prior, hessian=hessian)


def fit_map(
    dataset: SurvivalDataset,
    family: BaselineFamily,
    prior: GaussianPrior,
    init=None,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    allow_empty: bool = False,
) -> LocalFit:
    """Maximise the local log-posterior by safeguarded Newton iterations.

    Each iteration solves ``(M + tau I) d = grad`` with ``tau`` doubling from
    ``1e-6`` until the factorisation succeeds and ``d`` is an ascent
    direction, then backtracks (Armijo constant ``1e-4``, step halving)
    on the log-posterior.

    Returns
    -------
    LocalFit
        ``converged`` is true iff the max-norm of the gradient dropped below
        ``tol`` within ``max_iter`` iterations.
    """
    if dataset.n == 0 and not allow_empty:
        raise ValidationError("empty dataset; pass allow_empty=True for a prior-only fit")
    p = dataset.p
    dim = p + family.q_params
    if prior.dim != dim:
        raise ValidationError(f"prior has dimension {prior.dim}, model has {dim} parameters")
    theta = initial_point(dataset, family) if init is None else np.array(init, dtype=float).reshape(-1)
    if theta.shape[0] != dim:
        raise ValidationError(f"init has length {theta.shape[0]}, expected {dim}")

    try:
        cur = _objective(dataset, family, prior, theta, p)
    except NumericalError as exc:
        raise OptimizationError(f"objective not finite at the initial point: {exc}") from None
    start_value = cur.value
    iterations = 0
    gnorm = float(np.max(np.abs(cur.grad), initial=0.0))
    while gnorm >= tol and iterations < max_iter:
        iterations += 1
        step = _newton_direction(cur.neg_hessian, cur.grad)
        slope = float(cur.grad @ step)
        # increases below this are invisible in floating point
        noise = 64 * np.finfo(float).eps * (1.0 + abs(cur.value))
        t = 1.0
        for _ in range(MAX_HALVINGS):
            trial = theta + t * step
            try:
                new = _objective(dataset, family, prior, trial, p, hessian=False)
            except NumericalError:
                new = None
            if new is not None and new.value >= cur.value + ARMIJO * t * slope - noise:
                break
            t *= 0.5
        else:
            # no sufficient increase; at a floating-point stationary point stop quietly
            if gnorm < 1e3 * tol or slope <= 1e-14 * (1.0 + abs(cur.value)):
                break
            raise OptimizationError(
                f"line search failed after {MAX_HALVINGS} halvings (grad max-norm {gnorm:.3g})"
            )
        theta = trial
        cur = _objective(dataset, family, prior, theta, p)
        gnorm = float(np.max(np.abs(cur.grad), initial=0.0))
    if cur.value < start_value - 64 * np.finfo(float).eps * (1.0 + abs(start_value)):
        raise OptimizationError("log-posterior decreased during optimisation")

    M = cur.neg_hessian
    return LocalFit(
        beta_hat=theta[:p].copy(),
        omega_hat=theta[p:].copy(),
        M_hat=M,
        Gamma_local=np.array(prior.inv_cov),
        n=dataset.n,
        events=dataset.events,
        signature=signature(dataset, family),
        log_post_at_mode=cur.value,
        converged=bool(gnorm < tol),
        iterations=iterations,
        grad_norm=gnorm,
    )


def _newton_direction(M, grad):
    dim = grad.shape[0]
    tau = 0.0
    eye = np.eye(dim)
    for _ in range(200):
        try:
            factor = scipy.linalg.cho_factor(M + tau * eye, lower=True)
        except (np.linalg.LinAlgError, ValueError):
            factor = None
        if factor is not None:
            step = scipy.linalg.cho_solve(factor, grad)
            if np.all(np.isfinite(step)) and float(grad @ step) > 0:
                return step
            if not np.any(grad):
                return step
        tau = 1e-6 if tau == 0.0 else 2.0 * tau
    raise OptimizationError("could not obtain a positive-definite Newton system")
