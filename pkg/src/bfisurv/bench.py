"""Simulation benchmark: BFI, weighted-average and single-center estimators
against the MAP fit on the merged data.

For every sample-size setting and analysis family, ``B`` replicates are
simulated; each replicate fits every center locally, fits the merged data
(the reference), and records the three federated estimates. The reduction
produces tidy rows, one per metric cell:

``mse_beta``     (estimate_k - merged_k)^2 averaged over replicates, per estimator
``mse_sd``       squared difference of posterior standard deviations, BFI vs merged
``mse_true``     (beta_BFI,k - beta_true,k)^2
``mse_Lambda0``  squared difference of cumulative baseline hazards at each t*
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import yaml

from .aggregate import (
    BfiEstimate,
    combine,
    max_order_combine,
    select_poly_order,
    single_center,
    weighted_average,
)
from .data import SurvivalDataset
from .errors import BfiError, ValidationError
from .fit import LocalFit, fit_map
from .hazard import BaselineFamily, evaluate
from .posterior import GaussianPrior
from .simulate import SimConfig, generate, solve_u2

DEFAULT_T_STAR = (0.9056, 1.0385, 1.1438, 1.2554)
ESTIMATORS = ("bfi", "wav", "single")


@dataclass(frozen=True)
class OrderSearch:
    """Exponentiated polynomial with the order chosen per center by LRT."""

    q_max: int
    threshold: float = 0.10

    def __str__(self):
        return f"exppoly(q_max={self.q_max})"


FamilySpec = Union[BaselineFamily, OrderSearch]


@dataclass(frozen=True)
class BenchPlan:
    sample_sizes: Tuple[Tuple[int, ...], ...]
    families_to_fit: Tuple[FamilySpec, ...]
    sim: SimConfig
    B: int = 50
    gamma: float = 0.01
    t_star: Tuple[float, ...] = DEFAULT_T_STAR
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "sample_sizes", tuple(tuple(int(n) for n in s) for s in self.sample_sizes))
        object.__setattr__(self, "families_to_fit", tuple(self.families_to_fit))
        object.__setattr__(self, "t_star", tuple(float(t) for t in self.t_star))
        if self.B < 1:
            raise ValidationError("B must be >= 1")
        if not self.sample_sizes or any(not s or min(s) < 1 for s in self.sample_sizes):
            raise ValidationError("every center needs at least one record")
        if not self.families_to_fit:
            raise ValidationError("no analysis families given")
        if not self.gamma > 0:
            raise ValidationError("gamma must be positive")

    @property
    def beta_true(self) -> np.ndarray:
        return np.array(self.sim.beta)


def _family_from_plan(item) -> FamilySpec:
    if isinstance(item, str):
        return BaselineFamily(item)
    if isinstance(item, dict):
        if item.get("family") == "exppoly" and "q_max" in item:
            return OrderSearch(int(item["q_max"]), float(item.get("threshold", 0.10)))
        return BaselineFamily.from_descriptor(item)
    raise ValidationError(f"cannot interpret family entry {item!r}")


def load_plan(path) -> BenchPlan:
    """Read a YAML benchmark plan (format documented in the README)."""
    with open(path, encoding="utf-8") as fh:
        raw = yaml.safe_load(fh)
    try:
        sim = dict(raw["sim"])
        sim_cfg = SimConfig.from_fit_parameters(
            beta=sim.pop("beta"),
            omega_fit=sim.pop("omega_fit"),
            pi=sim.pop("pi"),
            n=0,
            **sim,
        )
        return BenchPlan(
            sample_sizes=raw["sample_sizes"],
            families_to_fit=[_family_from_plan(f) for f in raw["families"]],
            sim=sim_cfg,
            B=int(raw.get("B", 50)),
            gamma=float(raw.get("gamma", 0.01)),
            t_star=raw.get("t_star", DEFAULT_T_STAR),
            seed=int(raw.get("seed", 0)),
        )
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"{path}: bad plan ({exc})") from None


@dataclass(frozen=True, eq=False)
class ReplicateResult:
    """Estimates from one replicate, reduced to what the metrics need."""

    beta: Dict[str, np.ndarray]
    sd: Dict[str, np.ndarray]
    Lambda0: Dict[str, np.ndarray]


@dataclass
class MseReport:
    rows: List[dict] = field(default_factory=list)
    failures: Dict[Tuple[str, str], Tuple[int, int]] = field(default_factory=dict)

    COLUMNS = ("setting", "family", "metric", "estimator", "target", "value", "replicates", "failures")

    def value(self, setting, family, metric, estimator, target) -> float:
        for r in self.rows:
            if (r["setting"], r["family"], r["metric"], r["estimator"], r["target"]) == (
                setting,
                family,
                metric,
                estimator,
                target,
            ):
                return r["value"]
        raise KeyError((setting, family, metric, estimator, target))

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for r in self.rows:
            w.writerow([r[c] if c != "value" else repr(float(r[c])) for c in self.COLUMNS])
        return buf.getvalue()

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv_text())


def setting_label(sizes: Sequence[int]) -> str:
    return "(" + ",".join(str(n) for n in sizes) + ")"


def summarize(
    results: Sequence[ReplicateResult],
    beta_true,
    t_star: Sequence[float],
    setting: str,
    family: str,
    failures: int = 0,
) -> List[dict]:
    """Average squared differences over successful replicates."""
    used = len(results)
    rows = []

    def add(metric, estimator, target, sq):
        rows.append(
            dict(
                setting=setting,
                family=family,
                metric=metric,
                estimator=estimator,
                target=target,
                value=float(np.mean(sq)) if used else float("nan"),
                replicates=used,
                failures=failures,
            )
        )

    beta_true = np.asarray(beta_true, dtype=float)
    p = beta_true.shape[0]
    width = {"beta": p, "sd": p, "Lambda0": len(t_star)}

    def stack(key, attr):
        return np.array([getattr(r, attr)[key] for r in results], dtype=float).reshape(used, width[attr])

    com_b = stack("com", "beta")
    com_L = stack("com", "Lambda0")
    for est in ESTIMATORS:
        diff = stack(est, "beta") - com_b
        for k in range(p):
            add("mse_beta", est, f"beta{k + 1}", diff[:, k] ** 2)
    sd_diff = stack("bfi", "sd") - stack("com", "sd")
    for k in range(p):
        add("mse_sd", "bfi", f"beta{k + 1}", sd_diff[:, k] ** 2)
    true_diff = stack("bfi", "beta") - beta_true[None, :]
    for k in range(p):
        add("mse_true", "bfi", f"beta{k + 1}", true_diff[:, k] ** 2)
    for est in ESTIMATORS:
        diff = stack(est, "Lambda0") - com_L
        for j, t in enumerate(t_star):
            add("mse_Lambda0", est, f"t={t:g}", diff[:, j] ** 2)
    return rows


def _sd(M) -> np.ndarray:
    return np.sqrt(np.diag(np.linalg.inv(M)))


def _fit_centers(datasets, pooled, spec: FamilySpec, gamma: float):
    p = pooled.p
    if isinstance(spec, OrderSearch):
        prior = lambda dim: GaussianPrior.isotropic(gamma, dim)  # noqa: E731
        sels = [select_poly_order(d, prior, spec.q_max, spec.threshold) for d in datasets]
        est = max_order_combine(sels, prior)
        q = est.family.q_params
        locals_ = [s.fits[q] for s in sels]
        family = est.family
    else:
        family = spec
        prior = GaussianPrior.isotropic(gamma, p + family.q_params)
        locals_ = [fit_map(d, family, prior) for d in datasets]
        est = combine(locals_, prior)
    prior = GaussianPrior.isotropic(gamma, p + family.q_params)
    com = fit_map(pooled, family, prior)
    for f in (*locals_, com):
        if not f.converged:
            raise BfiError("a local or merged fit did not converge")
    return family, locals_, est, com


def run_replicate(
    datasets: Sequence[SurvivalDataset], spec: FamilySpec, gamma: float, t_star
) -> ReplicateResult:
    pooled = SurvivalDataset.concat(datasets)
    p = pooled.p
    family, locals_, est, com = _fit_centers(datasets, pooled, spec, gamma)
    wav = weighted_average(locals_)
    single = single_center(locals_)
    thetas = {"bfi": est.theta_bfi, "wav": wav, "single": single.theta, "com": com.theta}
    t = np.asarray(t_star, dtype=float)
    return ReplicateResult(
        beta={k: v[:p] for k, v in thetas.items()},
        sd={"bfi": _sd(est.M_bfi)[:p], "com": _sd(com.M_hat)[:p]},
        Lambda0={k: evaluate(family, v[p:], t).Lambda0 for k, v in thetas.items()},
    )


def _replicate_job(args):
    plan, si, b, u2 = args
    sizes = plan.sample_sizes[si]
    sim = plan.sim
    datasets = []
    for ell, n in enumerate(sizes):
        cfg = SimConfig(
            sim.beta, sim.omega1, sim.omega2, sim.pi, n, sim.sigma, sim.u1, seed=(plan.seed, si, b, ell)
        )
        datasets.append(generate(cfg, u2).dataset)
    out = []
    for spec in plan.families_to_fit:
        try:
            out.append(run_replicate(datasets, spec, plan.gamma, plan.t_star))
        except (BfiError, np.linalg.LinAlgError, FloatingPointError):
            out.append(None)
    return out


def run_benchmark(plan: BenchPlan, workers: int = 1) -> MseReport:
    """Run every replicate of every setting and reduce to an :class:`MseReport`.

    Replicate ``b`` of setting ``s`` draws center ``l`` from seed
    ``(plan.seed, s, b, l)``, so results do not depend on ``workers``.
    Failed replicates are excluded and counted per (setting, family).
    """
    u2 = solve_u2(plan.sim)
    jobs = [(plan, si, b, u2) for si in range(len(plan.sample_sizes)) for b in range(plan.B)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            outputs = list(ex.map(_replicate_job, jobs))
    else:
        outputs = [_replicate_job(j) for j in jobs]
    report = MseReport()
    for si, sizes in enumerate(plan.sample_sizes):
        label = setting_label(sizes)
        chunk = outputs[si * plan.B : (si + 1) * plan.B]
        for fi, spec in enumerate(plan.families_to_fit):
            res = [c[fi] for c in chunk if c[fi] is not None]
            failed = plan.B - len(res)
            report.failures[(label, str(spec))] = (failed, plan.B)
            report.rows.extend(summarize(res, plan.beta_true, plan.t_star, label, str(spec), failed))
    return report


def lambda0_curve(estimate: Union[BfiEstimate, LocalFit], t_grid=None) -> np.ndarray:
    """Table of ``(t, Lambda0(t | omega_hat))`` rows, sorted by ``t``."""
    t = np.sort(np.asarray(DEFAULT_T_STAR if t_grid is None else t_grid, dtype=float))
    if isinstance(estimate, BfiEstimate):
        omega, family = estimate.omega, estimate.family
    else:
        omega, family = estimate.omega_hat, estimate.family
    return np.column_stack([t, evaluate(family, omega, t).Lambda0])


def emit_scatter(
    pooled_fit: LocalFit,
    estimates: Dict[str, Union[BfiEstimate, LocalFit, np.ndarray]],
    datasets: Sequence[SurvivalDataset],
) -> List[dict]:
    """One row per patient and estimator: ``(z' beta_X, z' beta_merged)``."""
    p = pooled_fit.p
    betas = {}
    for name, est in estimates.items():
        if isinstance(est, BfiEstimate):
            b = est.beta
        elif isinstance(est, LocalFit):
            b = est.beta_hat
        else:
            b = np.asarray(est, dtype=float)[:p]
        if b.shape[0] != p:
            raise ValidationError(f"estimator {name!r} has {b.shape[0]} coefficients, expected {p}")
        betas[name] = b
    rows = []
    for ell, ds in enumerate(datasets):
        if ds.column_names != pooled_fit.signature.columns:
            raise ValidationError(f"center {ell}: covariate columns differ from the merged fit")
        lp_com = ds.covariates @ pooled_fit.beta_hat
        for name, b in betas.items():
            lp = ds.covariates @ b
            for i in range(ds.n):
                rows.append(
                    {"center": ell, "record": i, "estimator": name, "lp": float(lp[i]), "lp_merged": float(lp_com[i])}
                )
    return rows


def write_rows(rows: Sequence[dict], path) -> None:
    if not rows:
        raise ValidationError("nothing to write")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
