import math

import numpy as np
import pytest
from scipy import integrate

from bfisurv import hazard
from bfisurv.errors import DomainError, QuadratureError, ValidationError
from bfisurv.hazard import BaselineFamily, default_knots, evaluate, piecewise_basis

from conftest import FAMILIES, random_omega


def _fd_grad(f, x, h=1e-6):
    x = np.asarray(x, dtype=float)
    cols = []
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        cols.append((f(x + e) - f(x - e)) / (2 * h))
    return np.stack(cols, axis=-1)


class TestWorkedValues:
    def test_weibull_unit(self):
        hz = evaluate(BaselineFamily.weibull(), [0.0, 0.0], [2.0])
        assert hz.lambda0[0] == pytest.approx(1.0)
        assert hz.Lambda0[0] == pytest.approx(2.0)
        np.testing.assert_allclose(hz.grad_Lambda0[0], [2.0, 2.0 * math.log(2.0)])

    def test_weibull_at_one(self):
        hz = evaluate(BaselineFamily.weibull(), [-0.9, 1.8], [1.0])
        assert hz.Lambda0[0] == pytest.approx(0.406570, abs=1e-6)

    def test_gompertz_unit(self):
        hz = evaluate(BaselineFamily.gompertz(), [0.0, 0.0], [1.0])
        assert hz.lambda0[0] == pytest.approx(math.e)
        assert hz.Lambda0[0] == pytest.approx(1.718282, abs=1e-6)

    def test_piecewise(self):
        fam = BaselineFamily.piecewise((0, 1, 2, np.inf))
        hz = evaluate(fam, [0.0, math.log(2), math.log(3)], [1.5])
        assert hz.Lambda0[0] == pytest.approx(2.0)
        np.testing.assert_allclose(hz.grad_Lambda0[0], [1.0, 1.0, 0.0])

    def test_exppoly_matches_antiderivative(self):
        hz = evaluate(BaselineFamily.exppoly(2), [0.0, 1.0], [1.0])
        assert hz.Lambda0[0] == pytest.approx(math.e - 1.0, rel=1e-12)


class TestDerivatives:
    @pytest.mark.parametrize("t", [0.3, 1.0, 2.7])
    def test_gradient_and_hessian_of_Lambda0(self, family, rng, t):
        omega = random_omega(rng, family)
        hz = evaluate(family, omega, [t])
        g = _fd_grad(lambda w: evaluate(family, w, [t]).Lambda0[0], omega)
        H = _fd_grad(lambda w: evaluate(family, w, [t]).grad_Lambda0[0], omega)
        np.testing.assert_allclose(hz.grad_Lambda0[0], g, rtol=1e-6, atol=1e-9)
        np.testing.assert_allclose(hz.hess_Lambda0[0], H, rtol=1e-5, atol=1e-8)

    @pytest.mark.parametrize("t", [0.3, 1.3, 2.7])
    def test_log_hazard_derivatives(self, family, rng, t):
        omega = random_omega(rng, family)
        hz = evaluate(family, omega, [t])
        g = _fd_grad(lambda w: evaluate(family, w, [t]).log_lambda0[0], omega)
        H = _fd_grad(lambda w: evaluate(family, w, [t]).grad_log_lambda0[0], omega)
        np.testing.assert_allclose(hz.grad_log_lambda0[0], g, rtol=1e-6, atol=1e-9)
        np.testing.assert_allclose(hz.hess_log_lambda0[0], H, rtol=1e-5, atol=1e-8)

    def test_hazard_is_time_derivative(self, family, rng):
        omega = random_omega(rng, family)
        t = np.array([0.2, 0.9, 1.2, 2.2])  # away from piecewise knots
        h = 1e-6
        d = (evaluate(family, omega, t + h).Lambda0 - evaluate(family, omega, t - h).Lambda0) / (2 * h)
        hz = evaluate(family, omega, t)
        np.testing.assert_allclose(hz.lambda0, d, rtol=1e-6)
        np.testing.assert_allclose(hz.log_lambda0, np.log(hz.lambda0), rtol=1e-12, atol=1e-12)


class TestQuadrature:
    @pytest.mark.parametrize("omega", [[0.3, -1.2, 0.4], [-1.0, 2.0, -0.8], [0.0, 0.0, 0.0]])
    def test_against_scipy_quad(self, omega):
        fam = BaselineFamily.exppoly(3)
        t = np.array([0.01, 0.5, 1.7, 3.0])
        hz = evaluate(fam, omega, t)
        poly = np.polynomial.Polynomial(omega)
        for ti, Li, gi in zip(t, hz.Lambda0, hz.grad_Lambda0):
            ref = integrate.quad(lambda s: math.exp(poly(s)), 0, ti, epsabs=0, epsrel=1e-13)[0]
            assert Li == pytest.approx(ref, rel=1e-10)
            for k in range(3):
                refk = integrate.quad(lambda s: s**k * math.exp(poly(s)), 0, ti, epsabs=0, epsrel=1e-13)[0]
                assert gi[k] == pytest.approx(refk, rel=1e-10)

    def test_nonconvergence_reports_achieved(self, monkeypatch):
        monkeypatch.setattr(hazard, "_QUAD_MAX_LEVEL", 1)
        fam = BaselineFamily.exppoly(3)
        with pytest.raises(QuadratureError) as info:
            evaluate(fam, [0.0, 400.0, -400.0], [1.0])
        assert info.value.achieved > hazard._QUAD_RTOL

    def test_overflow(self):
        with pytest.raises(QuadratureError):
            evaluate(BaselineFamily.exppoly(2), [0.0, 2000.0], [1.0])


class TestOrderOneEquivalence:
    def test_all_reduce_to_exp(self, rng):
        t = rng.uniform(0.1, 3, size=7)
        w = 0.37
        ref = evaluate(BaselineFamily.exp(), [w], t)
        for fam in (BaselineFamily.piecewise((0, np.inf)), BaselineFamily.exppoly(1)):
            hz = evaluate(fam, [w], t)
            np.testing.assert_allclose(hz.Lambda0, ref.Lambda0, rtol=1e-12)
            np.testing.assert_allclose(hz.hess_Lambda0, ref.hess_Lambda0, rtol=1e-12)
        weib = evaluate(BaselineFamily.weibull(), [w, 0.0], t)
        np.testing.assert_allclose(weib.Lambda0, ref.Lambda0, rtol=1e-12)

    def test_cumulative_hazard_monotone(self, family, rng):
        omega = random_omega(rng, family)
        t = np.linspace(0.01, 4, 200)
        assert np.all(np.diff(evaluate(family, omega, t).Lambda0) > 0)


class TestDomain:
    @pytest.mark.parametrize("t", [0.0, -1.0, np.inf, np.nan])
    def test_bad_time(self, family, t):
        with pytest.raises(DomainError):
            evaluate(family, np.zeros(family.q_params), [t])

    def test_wrong_omega_length(self):
        with pytest.raises(DomainError):
            evaluate(BaselineFamily.weibull(), [0.0], [1.0])

    def test_piecewise_knots_validated(self):
        with pytest.raises(ValidationError):
            BaselineFamily.piecewise((0, 2, 1, np.inf))

    def test_basis_right_closed(self):
        b, B = piecewise_basis((0, 1, 2, np.inf), [1.0, 2.0, 2.5])
        np.testing.assert_array_equal(b, [[1, 0, 0], [0, 1, 0], [0, 0, 1]])
        np.testing.assert_allclose(B, [[1, 0, 0], [1, 1, 0], [1, 1, 0.5]])


class TestDefaultKnots:
    def test_midpoint(self):
        assert default_knots([1, 2, 3, 4], 2) == (0.0, 2.5, math.inf)

    def test_single_interval(self):
        assert default_knots([1, 2, 3], 1) == (0.0, math.inf)

    def test_degenerate(self):
        with pytest.raises(ValidationError):
            default_knots([2, 2, 2, 2], 3)


class TestFamilyDescriptor:
    @pytest.mark.parametrize("name", sorted(FAMILIES))
    def test_round_trip(self, name):
        fam = FAMILIES[name]
        assert BaselineFamily.from_descriptor(fam.describe()) == fam
