"""Local log-posterior of a parametric proportional-hazards model.

With a zero-mean Gaussian prior of inverse covariance ``Gamma`` the local
objective is::

    Omega(beta, omega) = -1/2 theta' Gamma theta
        + sum_i [ delta_i (z_i' beta + log lambda0(t_i)) - Lambda0(t_i) exp(z_i' beta) ]

with ``theta = (beta, omega)``. Its negative Hessian is the observed
information ``I(beta, omega)`` plus ``Gamma``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np
import scipy.linalg

from .data import SurvivalDataset
from .errors import NumericalError, ValidationError
from .hazard import BaselineFamily, evaluate

ETA_LIMIT = 700.0


@dataclass(frozen=True, eq=False)
class GaussianPrior:
    """Zero-mean Gaussian prior given by its inverse covariance matrix."""

    inv_cov: np.ndarray

    def __post_init__(self):
        G = np.array(self.inv_cov, dtype=float)
        if G.ndim != 2 or G.shape[0] != G.shape[1]:
            raise ValidationError("prior inverse covariance must be square")
        if not np.all(np.isfinite(G)):
            raise ValidationError("prior inverse covariance has non-finite entries")
        if np.max(np.abs(G - G.T), initial=0.0) > 1e-12:
            raise ValidationError("prior inverse covariance must be symmetric")
        try:
            chol = np.linalg.cholesky(G)
        except np.linalg.LinAlgError:
            raise ValidationError("prior inverse covariance is not positive definite") from None
        G = 0.5 * (G + G.T)
        G.setflags(write=False)
        object.__setattr__(self, "inv_cov", G)
        object.__setattr__(self, "_logdet", 2.0 * float(np.sum(np.log(np.diag(chol)))))

    @classmethod
    def isotropic(cls, gamma: float, dim: int) -> "GaussianPrior":
        if not gamma > 0:
            raise ValidationError("gamma must be positive")
        return cls(gamma * np.eye(dim))

    @property
    def dim(self) -> int:
        return self.inv_cov.shape[0]

    @property
    def log_norm(self) -> float:
        """``log det(Gamma)/2 - dim/2 log(2 pi)``."""
        return 0.5 * self._logdet - 0.5 * self.dim * math.log(2.0 * math.pi)

    def log_density(self, theta) -> float:
        theta = np.asarray(theta, dtype=float)
        return self.log_norm - 0.5 * float(theta @ self.inv_cov @ theta)


@dataclass(frozen=True, eq=False)
class PosteriorEval:
    value: float
    grad: np.ndarray
    neg_hessian: np.ndarray


def _linear_predictor(dataset: SurvivalDataset, beta: np.ndarray) -> np.ndarray:
    eta = dataset.covariates @ beta
    bad = np.flatnonzero(~(np.abs(eta) <= ETA_LIMIT))
    if bad.size:
        i = int(bad[0])
        raise NumericalError(
            f"record {i}: linear predictor z'beta = {eta[i]:.6g} outside +/-{ETA_LIMIT:g}"
        )
    return eta


def _split(dataset, family, beta, omega):
    beta = np.asarray(beta, dtype=float).reshape(-1)
    omega = np.asarray(omega, dtype=float).reshape(-1)
    if beta.shape[0] != dataset.p:
        raise ValidationError(f"beta has length {beta.shape[0]}, dataset has {dataset.p} covariates")
    if omega.shape[0] != family.q_params:
        raise ValidationError(f"omega has length {omega.shape[0]}, {family} needs {family.q_params}")
    if not (np.all(np.isfinite(beta)) and np.all(np.isfinite(omega))):
        raise ValidationError("parameters must be finite")
    return beta, omega


def _record_terms(dataset, family, beta, omega):
    eta = _linear_predictor(dataset, beta)
    if dataset.n:
        hz = evaluate(family, omega, dataset.times)
    else:
        hz = None
    return eta, np.exp(eta), hz


def information_blocks(
    dataset: SurvivalDataset, family: BaselineFamily, beta, omega
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Observed-information blocks ``(I_bb, I_bw, I_ww)`` without the prior.

    ``I_bb = sum z z' Lambda0 e^eta``, ``I_bw = sum z grad(Lambda0)' e^eta`` and
    ``I_ww = sum [hess(Lambda0) e^eta - delta hess(log lambda0)]``.
    """
    beta, omega = _split(dataset, family, beta, omega)
    eta, e, hz = _record_terms(dataset, family, beta, omega)
    return _blocks(dataset, family, e, hz)


def _blocks(dataset, family, e, hz):
    p, q = dataset.p, family.q_params
    if hz is None:
        return np.zeros((p, p)), np.zeros((p, q)), np.zeros((q, q))
    Z = dataset.covariates
    w = hz.Lambda0 * e
    I_bb = (Z * w[:, None]).T @ Z
    I_bw = Z.T @ (hz.grad_Lambda0 * e[:, None])
    I_ww = np.einsum("i,ijk->jk", e, hz.hess_Lambda0) - np.einsum(
        "i,ijk->jk", dataset.status, hz.hess_log_lambda0
    )
    return I_bb, I_bw, I_ww


def assemble(I_bb, I_bw, I_ww) -> np.ndarray:
    top = np.hstack([I_bb, I_bw])
    bottom = np.hstack([I_bw.T, I_ww])
    M = np.vstack([top, bottom])
    return 0.5 * (M + M.T)


def log_likelihood(dataset: SurvivalDataset, family: BaselineFamily, beta, omega) -> float:
    beta, omega = _split(dataset, family, beta, omega)
    eta, e, hz = _record_terms(dataset, family, beta, omega)
    return _loglik_value(dataset, eta, e, hz)


def _loglik_value(dataset, eta, e, hz):
    if hz is None:
        return 0.0
    d = dataset.status
    event = d > 0
    if np.any(event & ~np.isfinite(hz.log_lambda0)):
        i = int(np.flatnonzero(event & ~np.isfinite(hz.log_lambda0))[0])
        raise NumericalError(f"record {i}: event at a time with zero baseline hazard")
    log_lam = np.where(event, hz.log_lambda0, 0.0)
    with np.errstate(over="ignore", invalid="ignore"):
        terms = d * (eta + log_lam) - hz.Lambda0 * e
    if not np.all(np.isfinite(terms)):
        i = int(np.flatnonzero(~np.isfinite(terms))[0])
        raise NumericalError(f"record {i}: non-finite log-likelihood contribution")
    return float(np.sum(terms))


def log_posterior(
    dataset: SurvivalDataset,
    family: BaselineFamily,
    beta,
    omega,
    prior: GaussianPrior,
    hessian: bool = True,
) -> PosteriorEval:
    """Value, gradient and negative Hessian of the local log-posterior.

    The value omits the prior normalising constant (``prior.log_norm``),
    which does not depend on the parameters.
    """
    beta, omega = _split(dataset, family, beta, omega)
    p, q = beta.shape[0], omega.shape[0]
    if prior.dim != p + q:
        raise ValidationError(f"prior has dimension {prior.dim}, model has {p + q} parameters")
    theta = np.concatenate([beta, omega])
    G = prior.inv_cov
    eta, e, hz = _record_terms(dataset, family, beta, omega)
    value = _loglik_value(dataset, eta, e, hz) - 0.5 * float(theta @ G @ theta)

    grad = -(G @ theta)
    if hz is not None:
        d = dataset.status
        with np.errstate(over="ignore", invalid="ignore"):
            grad[:p] += dataset.covariates.T @ (d - hz.Lambda0 * e)
            grad[p:] += d @ hz.grad_log_lambda0 - e @ hz.grad_Lambda0
    if not np.all(np.isfinite(grad)):
        raise NumericalError("non-finite gradient of the log-posterior")

    if hessian:
        M = assemble(*_blocks(dataset, family, e, hz)) + G
        if not np.all(np.isfinite(M)):
            raise NumericalError("non-finite Hessian of the log-posterior")
    else:
        M = None
    return PosteriorEval(value=value, grad=grad, neg_hessian=M)


def is_positive_definite(M) -> bool:
    try:
        scipy.linalg.cholesky(M, lower=True)
    except (np.linalg.LinAlgError, ValueError):
        return False
    return True
