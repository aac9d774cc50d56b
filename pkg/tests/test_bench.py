import math

import numpy as np
import pytest

from bfisurv import bench
from bfisurv.aggregate import combine
from bfisurv.bench import (
    DEFAULT_T_STAR,
    BenchPlan,
    OrderSearch,
    ReplicateResult,
    emit_scatter,
    lambda0_curve,
    load_plan,
    run_benchmark,
    summarize,
    write_rows,
)
from bfisurv.data import SurvivalDataset
from bfisurv.errors import ValidationError
from bfisurv.fit import fit_map
from bfisurv.hazard import BaselineFamily
from bfisurv.posterior import GaussianPrior
from bfisurv.simulate import generate, reference_config

from conftest import make_fit

SIM = reference_config(0)


def _result(bfi, wav, single, com, L=(1.0, 1.0)):
    b = {k: np.array(v, dtype=float) for k, v in dict(bfi=bfi, wav=wav, single=single, com=com).items()}
    return ReplicateResult(
        beta=b,
        sd={"bfi": b["bfi"] * 0 + 1.0, "com": b["com"] * 0 + 0.5},
        Lambda0={k: np.array(L) * (i + 1) for i, k in enumerate(("bfi", "wav", "single", "com"))},
    )


class TestSummarize:
    def test_stub_oracle_two_replicates(self):
        res = [
            _result([1.0, 0.0], [2.0, 0.0], [3.0, 0.0], [0.0, 0.0]),
            _result([0.0, 1.0], [0.0, 0.0], [0.0, 3.0], [0.0, 0.0]),
        ]
        rows = summarize(res, [0.5, 0.5], (1.0, 2.0), "(1,1)", "weibull")
        val = {(r["metric"], r["estimator"], r["target"]): r["value"] for r in rows}
        assert val[("mse_beta", "bfi", "beta1")] == 0.5
        assert val[("mse_beta", "wav", "beta1")] == 2.0
        assert val[("mse_beta", "single", "beta2")] == 4.5
        assert val[("mse_sd", "bfi", "beta1")] == 0.25
        assert val[("mse_true", "bfi", "beta1")] == 0.25
        # Lambda0 of bfi is 1x, com is 4x the stub curve
        assert val[("mse_Lambda0", "bfi", "t=1")] == 9.0
        assert len(rows) == 5 * 2 + 3 * 2

    def test_identical_estimators_zero(self):
        r = _result([0.3, 0.1], [0.3, 0.1], [0.3, 0.1], [0.3, 0.1])
        rows = summarize([r, r], [0.3, 0.1], (1.0, 2.0), "s", "f")
        for row in rows:
            if row["metric"] in ("mse_beta", "mse_true"):
                assert row["value"] == 0.0


class TestRunBenchmark:
    def test_single_center_plan_is_exact(self):
        plan = BenchPlan(((40,),), (BaselineFamily.weibull(),), SIM, B=2, seed=1)
        rep = run_benchmark(plan)
        for r in rep.rows:
            if r["estimator"] == "bfi" and r["metric"] in ("mse_beta", "mse_sd", "mse_Lambda0"):
                assert r["value"] == 0.0
        assert rep.failures == {("(40)", "weibull"): (0, 2)}

    def test_deterministic_and_worker_independent(self):
        plan = BenchPlan(((30, 40),), (BaselineFamily.weibull(), BaselineFamily.exp()), SIM, B=3, seed=2)
        a = run_benchmark(plan).to_csv_text()
        b = run_benchmark(plan).to_csv_text()
        c = run_benchmark(plan, workers=2).to_csv_text()
        assert a == b == c

    def test_row_count_and_values(self, tmp_path):
        plan = BenchPlan(((30, 30), (20, 50)), (BaselineFamily.weibull(),), SIM, B=2)
        rep = run_benchmark(plan)
        assert len(rep.rows) == 2 * (5 * 4 + 3 * len(DEFAULT_T_STAR))
        assert all(r["value"] >= 0 and math.isfinite(r["value"]) for r in rep.rows)
        path = tmp_path / "r.csv"
        rep.to_csv(path)
        assert path.read_text().count("\n") == len(rep.rows) + 1
        assert rep.value("(30,30)", "weibull", "mse_beta", "bfi", "beta1") >= 0

    def test_order_search_family(self):
        plan = BenchPlan(((60, 60),), (OrderSearch(2),), SIM, B=1)
        rep = run_benchmark(plan)
        assert rep.rows and rep.rows[0]["family"] == str(OrderSearch(2))

    def test_failures_are_counted(self, monkeypatch):
        def boom(*args, **kwargs):
            raise bench.BfiError("forced")

        monkeypatch.setattr(bench, "run_replicate", boom)
        plan = BenchPlan(((10,),), (BaselineFamily.exp(),), SIM, B=2)
        rep = run_benchmark(plan)
        assert rep.failures[("(10)", "exp")] == (2, 2)
        assert all(r["failures"] == 2 and r["replicates"] == 0 for r in rep.rows)

    def test_plan_validation(self):
        with pytest.raises(ValidationError):
            BenchPlan(((0, 5),), (BaselineFamily.exp(),), SIM)
        with pytest.raises(ValidationError):
            BenchPlan(((5,),), (BaselineFamily.exp(),), SIM, B=0)


class TestPlanFile:
    def test_load(self, tmp_path):
        p = tmp_path / "plan.yaml"
        p.write_text(
            "seed: 4\nB: 3\ngamma: 0.01\nsample_sizes: [[50, 50, 50]]\n"
            "families: [weibull, {family: pwexp, knots: [0, 0.9, .inf]}, {family: exppoly, q_max: 3}]\n"
            "sim: {beta: [-0.6, -0.4, 0.4, 0.6], omega_fit: [-0.9, 1.8], pi: 0.3}\n"
        )
        plan = load_plan(p)
        assert plan.B == 3 and plan.seed == 4 and plan.sample_sizes == ((50, 50, 50),)
        assert plan.families_to_fit[1] == BaselineFamily.piecewise((0, 0.9, math.inf))
        assert plan.families_to_fit[2] == OrderSearch(3, 0.10)
        assert plan.sim.omega_fit == pytest.approx((-0.9, 1.8))

    def test_bad_plan(self, tmp_path):
        p = tmp_path / "plan.yaml"
        p.write_text("B: 3\n")
        with pytest.raises(ValidationError):
            load_plan(p)


class TestCurves:
    def test_exp_identity(self):
        fit = make_fit([0.0], [[1.0]], [[0.1]], family=BaselineFamily.exp(), columns=())
        grid = np.array([0.5, 1.0, 3.0])
        np.testing.assert_allclose(lambda0_curve(fit, grid), np.column_stack([grid, grid]))

    def test_weibull_truth(self):
        fit = make_fit([-0.9, 1.8], np.eye(2), np.eye(2), family=BaselineFamily.weibull(), columns=())
        curve = lambda0_curve(fit)
        assert curve[0, 1] == pytest.approx(math.exp(-0.9) * 0.9056 ** math.exp(1.8), rel=1e-12)
        assert np.all(np.diff(curve[:, 1]) > 0)

    def test_bfi_estimate_input(self):
        fit = make_fit([0.2, -0.9, 1.8], np.eye(3), 0.1 * np.eye(3), family=BaselineFamily.weibull())
        est = combine([fit], 0.1)
        np.testing.assert_array_equal(lambda0_curve(est), lambda0_curve(fit))


@pytest.fixture(scope="module")
def setup():
    datasets = [generate(reference_config(n, seed=(9, i))).dataset for i, n in enumerate((20, 30))]
    prior = GaussianPrior.isotropic(0.01, 6)
    fits = [fit_map(d, BaselineFamily.weibull(), prior) for d in datasets]
    pooled = fit_map(SurvivalDataset.concat(datasets), BaselineFamily.weibull(), prior)
    return datasets, fits, pooled


class TestScatter:
    def test_row_count_and_finite(self, setup, tmp_path):
        datasets, fits, pooled = setup
        est = combine(fits, 0.01)
        rows = emit_scatter(pooled, {"bfi": est, "wav": np.mean([f.theta for f in fits], axis=0), "single": fits[1]}, datasets)
        assert len(rows) == 3 * sum(d.n for d in datasets)
        assert all(math.isfinite(r["lp"]) and math.isfinite(r["lp_merged"]) for r in rows)
        write_rows(rows, tmp_path / "s.csv")
        assert (tmp_path / "s.csv").read_text().count("\n") == len(rows) + 1

    def test_identical_on_diagonal(self, setup):
        datasets, _, pooled = setup
        rows = emit_scatter(pooled, {"same": pooled}, datasets)
        assert all(r["lp"] == r["lp_merged"] for r in rows)

    def test_zero_covariates(self, setup):
        _, fits, pooled = setup
        ds = SurvivalDataset([1.0], [1], np.zeros((1, 4)), pooled.signature.columns)
        rows = emit_scatter(pooled, {"bfi": fits[0]}, [ds])
        assert (rows[0]["lp"], rows[0]["lp_merged"]) == (0.0, 0.0)
