"""One-round combination of local fits and the comparison estimators."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.linalg
from scipy.stats import chi2

from .data import ModelSignature, SurvivalDataset
from .errors import AggregationError, OptimizationError, ProtocolError, ValidationError
from .fit import CredibleIntervals, LocalFit, credible_intervals, fit_map, parameter_names
from .hazard import BaselineFamily
from .posterior import GaussianPrior

PriorLike = Union[GaussianPrior, float, Callable[[int], GaussianPrior]]


@dataclass(frozen=True, eq=False)
class BfiEstimate:
    theta_bfi: np.ndarray
    M_bfi: np.ndarray
    Gamma_global: np.ndarray
    intervals: CredibleIntervals
    L: int
    n_total: int
    signature: ModelSignature

    @property
    def p(self) -> int:
        return len(self.signature.columns)

    @property
    def beta(self) -> np.ndarray:
        return self.theta_bfi[: self.p]

    @property
    def omega(self) -> np.ndarray:
        return self.theta_bfi[self.p :]

    @property
    def family(self) -> BaselineFamily:
        return self.signature.family

    def to_dict(self) -> dict:
        return {
            "signature": self.signature.to_dict(),
            "L": self.L,
            "n_total": self.n_total,
            "theta_bfi": [float(x) for x in self.theta_bfi],
            "M_bfi": [[float(x) for x in row] for row in self.M_bfi],
            "alpha": self.intervals.alpha,
            "intervals": [
                {"parameter": name, "estimate": e, "lower": lo, "upper": hi}
                for name, e, lo, hi in self.intervals.rows()
            ],
        }

    def summary(self) -> str:
        level = 100 * (1 - 2 * self.intervals.alpha)
        lines = [
            f"BFI estimate: {self.family}, L={self.L} centers, n={self.n_total}",
            f"{'parameter':<16}{'estimate':>14}{f'{level:g}% lower':>14}{f'{level:g}% upper':>14}",
        ]
        for name, e, lo, hi in self.intervals.rows():
            lines.append(f"{name:<16}{e:>14.6f}{lo:>14.6f}{hi:>14.6f}")
        return "\n".join(lines)


def resolve_prior(prior: PriorLike, dim: int) -> GaussianPrior:
    if isinstance(prior, GaussianPrior):
        if prior.dim != dim:
            raise ValidationError(f"global prior has dimension {prior.dim}, model needs {dim}")
        return prior
    if callable(prior):
        return resolve_prior(prior(dim), dim)
    return GaussianPrior.isotropic(float(prior), dim)


def check_signatures(fits: Sequence[LocalFit]) -> ModelSignature:
    if not fits:
        raise AggregationError("no local fits to combine")
    ref = fits[0].signature
    bad = [i for i, f in enumerate(fits) if f.signature != ref]
    if bad:
        raise AggregationError(
            f"signature mismatch: centers {bad} differ from center 0 ({ref.canonical()})"
        )
    return ref


def _reference_index(fits: Sequence[LocalFit]) -> int:
    return max(range(len(fits)), key=lambda i: (fits[i].n, -i))


def combine(fits: Sequence[LocalFit], Gamma_global: PriorLike, alpha: float = 0.025) -> BfiEstimate:
    """BFI estimate from local ``(theta_l, M_l, Gamma_l)``.

    ``M_bfi = Gamma + sum_l (M_l - Gamma_l)`` and ``theta_bfi`` solves
    ``M_bfi theta = sum_l M_l theta_l``. The solve is done in residual form
    from the largest center's estimate with one refinement step, so a single
    center with ``Gamma = Gamma_1`` is reproduced exactly.
    """
    sig = check_signatures(fits)
    dim = fits[0].theta.shape[0]
    G = resolve_prior(Gamma_global, dim).inv_cov
    for i, f in enumerate(fits):
        if np.max(np.abs(f.M_hat - f.M_hat.T), initial=0.0) > 1e-10 * (1 + np.max(np.abs(f.M_hat))):
            raise AggregationError(f"center {i}: M_hat is not symmetric")

    M = sum((f.M_hat for f in fits), np.zeros((dim, dim))) + (
        G - sum((f.Gamma_local for f in fits), np.zeros((dim, dim)))
    )
    rhs = sum((f.M_hat @ f.theta for f in fits), np.zeros(dim))
    try:
        factor = scipy.linalg.cho_factor(M, lower=True)
    except (np.linalg.LinAlgError, ValueError):
        raise AggregationError(
            "combined precision matrix is not positive definite; use a larger global prior Gamma"
        ) from None
    theta = fits[_reference_index(fits)].theta.copy()
    for _ in range(2):
        theta = theta + scipy.linalg.cho_solve(factor, rhs - M @ theta)
    ci = credible_intervals(theta, M, alpha, names=parameter_names(sig))
    return BfiEstimate(
        theta_bfi=theta,
        M_bfi=M,
        Gamma_global=np.array(G),
        intervals=ci,
        L=len(fits),
        n_total=int(sum(f.n for f in fits)),
        signature=sig,
    )


def weighted_average(fits: Sequence[LocalFit]) -> np.ndarray:
    """Sample-size weighted mean of the local ``(beta, omega)``."""
    check_signatures(fits)
    n = np.array([f.n for f in fits], dtype=float)
    if n.sum() <= 0:
        raise AggregationError("weighted average needs a positive total sample size")
    thetas = np.stack([f.theta for f in fits])
    return (n / n.sum()) @ thetas


def single_center(fits: Sequence[LocalFit]) -> LocalFit:
    """Fit of the largest center (lowest index on ties)."""
    if not fits:
        raise AggregationError("no local fits")
    return fits[_reference_index(fits)]


@dataclass(frozen=True, eq=False)
class OrderSelection:
    """Local result of the exponentiated-polynomial order search.

    ``fits`` maps every order from ``q_star`` to ``q_max`` to its fit so
    that the aggregator can combine at the maximum local order without a
    second round.
    """

    q_star: int
    q_max: int
    fits: Dict[int, LocalFit]
    deviances: Dict[int, float]
    p_values: Dict[int, float]


def select_poly_order(
    dataset: SurvivalDataset,
    prior: PriorLike,
    q_max: int,
    threshold: float = 0.10,
    **fit_kwargs,
) -> OrderSelection:
    """Choose the exponentiated-polynomial order by sequential likelihood-ratio tests.

    Orders ``q = 1, 2, ...`` are fitted in turn; ``H0: q`` vs ``q + 1`` is
    tested with deviance ``2 (Omega_{q+1} - Omega_q)`` against chi-square(1)
    and the search stops at the first non-rejection (p-value >= threshold).
    """
    if q_max < 1:
        raise ValidationError("q_max must be >= 1")
    if not 0 < threshold < 1:
        raise ValidationError("threshold must lie in (0, 1)")
    p = dataset.p
    fits: Dict[int, LocalFit] = {}
    deviances: Dict[int, float] = {}
    pvals: Dict[int, float] = {}

    def fit_order(q):
        if q not in fits:
            fam = BaselineFamily.exppoly(q)
            init = None
            if q - 1 in fits:
                init = np.concatenate([fits[q - 1].theta, [0.0]])
            try:
                f = fit_map(dataset, fam, resolve_prior(prior, p + q), init=init, **fit_kwargs)
            except OptimizationError as exc:
                raise OptimizationError(f"order {q}: {exc}") from None
            if not f.converged:
                raise OptimizationError(f"order {q}: fit did not converge")
            fits[q] = f
        return fits[q]

    q_star = q_max
    for q in range(1, q_max):
        lo, hi = fit_order(q), fit_order(q + 1)
        dev = max(2.0 * (hi.log_post_at_mode - lo.log_post_at_mode), 0.0)
        deviances[q] = dev
        pvals[q] = float(chi2.sf(dev, 1))
        if pvals[q] >= threshold:
            q_star = q
            break
    for q in range(q_star, q_max + 1):
        fit_order(q)
    kept = {q: fits[q] for q in range(q_star, q_max + 1)}
    return OrderSelection(q_star, q_max, kept, deviances, pvals)


def max_order_combine(
    selections: Sequence[Union[OrderSelection, Tuple[int, Mapping[int, LocalFit]]]],
    Gamma_global: PriorLike,
    alpha: float = 0.025,
) -> BfiEstimate:
    """Combine every center's fit at ``q* = max_l q*_l``."""
    if not selections:
        raise ProtocolError("no order selections")
    pairs = []
    for s in selections:
        if isinstance(s, OrderSelection):
            pairs.append((s.q_star, s.fits))
        else:
            pairs.append((int(s[0]), s[1]))
    q_star = max(q for q, _ in pairs)
    chosen = []
    for i, (_, fits) in enumerate(pairs):
        if q_star not in fits:
            raise ProtocolError(
                f"center {i} did not ship a fit of order {q_star} (has {sorted(fits)})"
            )
        chosen.append(fits[q_star])
    return combine(chosen, Gamma_global, alpha)
