import numpy as np
import pytest

from bfisurv.data import SurvivalDataset
from bfisurv.hazard import BaselineFamily

FAMILIES = {
    "exp": BaselineFamily.exp(),
    "weibull": BaselineFamily.weibull(),
    "gompertz": BaselineFamily.gompertz(),
    "pwexp": BaselineFamily.piecewise((0.0, 0.7, 1.5, np.inf)),
    "exppoly": BaselineFamily.exppoly(3),
}


def random_dataset(rng, n=12, p=2, t_scale=2.0):
    times = rng.uniform(0.05, t_scale, size=n)
    status = (rng.uniform(size=n) < 0.7).astype(float)
    Z = rng.normal(size=(n, p))
    return SurvivalDataset(times, status, Z)


def random_omega(rng, family):
    if family.kind in ("weibull", "gompertz"):
        return rng.uniform(-0.5, 0.5, size=2)
    return rng.uniform(-0.6, 0.6, size=family.q_params)


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)


@pytest.fixture(params=sorted(FAMILIES))
def family(request):
    return FAMILIES[request.param]


def fd_gradient(f, x, h=1e-6):
    """Central differences of a scalar or vector function, last axis = coordinate."""
    x = np.asarray(x, dtype=float)
    cols = []
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h * max(1.0, abs(x[k]))
        cols.append((np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2 * e[k]))
    return np.stack(cols, axis=-1)


def make_fit(theta, M, Gamma, n=10, family=None, columns=None, converged=True):
    """A LocalFit built from given summaries (no data behind it)."""
    from bfisurv.data import signature
    from bfisurv.fit import LocalFit

    family = family or BaselineFamily.exp()
    theta = np.asarray(theta, dtype=float)
    p = theta.size - family.q_params
    columns = columns or tuple(f"z{j + 1}" for j in range(p))
    M = np.asarray(M, dtype=float)
    M = 0.5 * (M + M.T)
    return LocalFit(
        beta_hat=theta[:p].copy(),
        omega_hat=theta[p:].copy(),
        M_hat=M,
        Gamma_local=np.asarray(Gamma, dtype=float),
        n=n,
        events=n // 2,
        signature=signature(columns, family),
        log_post_at_mode=-1.0,
        converged=converged,
        iterations=3,
        grad_norm=0.0,
    )


def random_spd(rng, dim, scale=1.0):
    A = rng.normal(size=(dim, dim))
    return scale * (A @ A.T / dim + np.eye(dim))


def loglinear_hazard_data(rng, n, slope, beta=(0.5,), censor_max=3.0):
    """Records with baseline hazard exp(slope * t) and uniform censoring."""
    beta = np.asarray(beta, dtype=float)
    Z = rng.normal(size=(n, beta.size))
    E = rng.exponential(size=n) * np.exp(-Z @ beta)
    Y = np.log1p(slope * E) / slope if slope else E
    C = rng.uniform(0, censor_max, size=n)
    return SurvivalDataset(np.minimum(Y, C), (Y <= C).astype(float), Z)
