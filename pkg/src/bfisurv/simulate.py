"""Right-censored Weibull data with a prescribed censoring rate.

Event times follow a proportional-hazards Weibull model with baseline
``lambda0(t) = w1 * w2 * t**(w2 - 1)`` (so ``Lambda0(t) = w1 * t**w2``);
censoring times are ``Uniform(u1, u2)``. The upper bound ``u2`` is solved
for so that the population censoring probability equals the target rate.

In the fitting parameterisation of :mod:`bfisurv.hazard` this model is the
Weibull family with ``omega1 = log(w1)`` and ``omega2 = log(w2)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Tuple, Union

import numpy as np
from scipy.optimize import brentq
from scipy.special import gammainc, gammaln

from .data import SurvivalDataset
from .errors import CalibrationError, DomainError, ValidationError

GH_ORDER = 64
_GH_X, _GH_W = np.polynomial.hermite.hermgauss(GH_ORDER)

SeedLike = Union[int, Sequence[int]]


@dataclass(frozen=True)
class SimConfig:
    beta: Tuple[float, ...]
    omega1: float
    omega2: float
    pi: float
    n: int
    sigma: float = 1.0
    u1: float = 0.0
    seed: SeedLike = 0

    def __post_init__(self):
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        if not (self.omega1 > 0 and self.omega2 > 0):
            raise ValidationError("Weibull parameters omega1, omega2 must be positive")
        if not 0 < self.pi < 1:
            raise ValidationError("censoring rate pi must lie in (0, 1)")
        if not self.sigma > 0:
            raise ValidationError("sigma must be positive")
        if not self.u1 >= 0:
            raise ValidationError("u1 must be >= 0")
        if int(self.n) != self.n or self.n < 0:
            raise ValidationError("n must be a non-negative integer")

    @classmethod
    def from_fit_parameters(cls, beta, omega_fit, pi, n, **kwargs) -> "SimConfig":
        """Build from the fitting parameterisation ``(log w1, log w2)``."""
        w1, w2 = omega_fit
        return cls(tuple(beta), math.exp(w1), math.exp(w2), pi, n, **kwargs)

    @property
    def omega_fit(self) -> Tuple[float, float]:
        return math.log(self.omega1), math.log(self.omega2)

    @property
    def log_psi_sd(self) -> float:
        return self.sigma * math.sqrt(sum(b * b for b in self.beta))


@dataclass(frozen=True, eq=False)
class SimOutput:
    dataset: SurvivalDataset
    u2: float
    empirical_censoring: float


def censoring_probability(psi, u1: float, u2: float, omega2: float):
    """``P(C < Y | psi)`` for ``C ~ Uniform(u1, u2)`` and ``S(y) = exp(-psi y**omega2)``.

    Evaluated through the lower incomplete gamma function::

        psi**(-1/w2) / ((u2 - u1) w2) * [g(1/w2, psi u2**w2) - g(1/w2, psi u1**w2)]
    """
    psi = np.asarray(psi, dtype=float)
    if not (u2 > u1 >= 0):
        raise DomainError("need u2 > u1 >= 0")
    if not omega2 > 0 or np.any(~(psi > 0)):
        raise DomainError("psi and omega2 must be positive")
    a = 1.0 / omega2
    x2 = psi * u2**omega2
    x1 = psi * u1**omega2
    # lower incomplete gamma = Gamma(a) * regularised P(a, x)
    diff = gammainc(a, x2) - gammainc(a, x1)
    log_pref = gammaln(a) - a * np.log(psi) - math.log((u2 - u1) * omega2)
    out = np.exp(log_pref) * diff
    return np.clip(out, 0.0, 1.0)


def marginal_censoring(u2: float, config: SimConfig) -> float:
    """Censoring probability averaged over the lognormal ``psi`` (Gauss-Hermite)."""
    s = config.log_psi_sd
    psi = np.exp(math.log(config.omega1) + math.sqrt(2.0) * s * _GH_X)
    if s == 0.0:
        psi = np.array([config.omega1])
        weights = np.array([1.0])
    else:
        weights = _GH_W / math.sqrt(math.pi)
    return float(weights @ censoring_probability(psi, config.u1, u2, config.omega2))


def solve_u2(config: SimConfig) -> float:
    """Upper censoring bound giving population censoring rate ``config.pi``.

    Raises
    ------
    CalibrationError
        If the target rate is outside the attainable range.
    """
    u1 = config.u1
    f = lambda u2: marginal_censoring(u2, config) - config.pi  # noqa: E731
    lo_span = 1e-9 * max(1.0, u1) + 1e-12
    hi_limit = marginal_censoring(u1 + lo_span, config)
    if config.pi >= hi_limit:
        raise CalibrationError(
            f"censoring rate {config.pi} unattainable: attainable range is (0, {hi_limit:.6g})"
        )
    hi = max(2.0 * u1, 1.0)
    for _ in range(200):
        if f(hi) < 0:
            break
        hi *= 2.0
    else:
        raise CalibrationError(f"censoring rate {config.pi} unattainable: too close to 0")
    u2 = brentq(f, u1 + lo_span, hi, xtol=1e-14, rtol=1e-13, maxiter=500)
    return float(u2)


def _rng(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, (tuple, list)):
        return np.random.default_rng(list(seed))
    return np.random.default_rng(seed)


def generate(config: SimConfig, u2: float = None) -> SimOutput:
    """Draw one dataset; deterministic given ``config.seed``.

    ``u2`` may be passed to skip re-solving the calibration.
    """
    if u2 is None:
        u2 = solve_u2(config)
    rng = _rng(config.seed)
    n, p = int(config.n), len(config.beta)
    Z = rng.normal(0.0, config.sigma, size=(n, p))
    psi = config.omega1 * np.exp(Z @ np.array(config.beta))
    # inverse transform of S(y | z) = exp(-psi y**w2)
    Y = (rng.exponential(size=n) / psi) ** (1.0 / config.omega2)
    C = rng.uniform(config.u1, u2, size=n)
    T = np.minimum(Y, C)
    delta = (Y <= C).astype(float)
    names = tuple(f"z{j + 1}" for j in range(p))
    ds = SurvivalDataset(T, delta, Z, names)
    cens = float(1.0 - delta.mean()) if n else float("nan")
    return SimOutput(ds, u2, cens)


def reference_config(n: int, pi: float = 0.30, seed: SeedLike = 0) -> SimConfig:
    """Reference scenario: four standard-normal covariates, Weibull baseline
    with ``omega = (-0.9, 1.8)`` in the fitting parameterisation."""
    return SimConfig.from_fit_parameters(
        beta=(-0.6, -0.4, 0.4, 0.6), omega_fit=(-0.9, 1.8), pi=pi, n=n, seed=seed
    )
