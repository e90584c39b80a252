import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from rulehte.data import Dataset

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def make_dataset(n=200, p=4, T=2, seed=0, signal=1.0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, p))
    X[:, -1] = rng.integers(0, 2, n)
    w = np.arange(n) % (T + 1)
    rng.shuffle(w)
    y = X[:, 0] + signal * (w == 1) * X[:, 1] + rng.standard_normal(n)
    return Dataset(y, w, X, T)


@pytest.fixture
def small_data():
    return make_dataset()


def random_model(rng, p=4, T=2, n_rules=5, n_linear=2, sparsity=0.3):
    """A FittedModel with random rules, linear terms and coefficients."""
    import math

    from rulehte.basis import BasisSet, LinearTerm
    from rulehte.data import Condition, RuleTerm
    from rulehte.model import FittedModel

    rules = []
    while len(rules) < n_rules:
        k = int(rng.integers(1, min(3, p) + 1))
        conds = []
        for j in rng.choice(p, size=k, replace=False):
            lo, hi = np.sort(rng.normal(0, 1, 2))
            kind = rng.integers(0, 3)
            conds.append(Condition(int(j), -math.inf if kind == 0 else float(lo), math.inf if kind == 1 else float(hi)))
        rules.append(RuleTerm.from_conditions(conds))
    linears = [LinearTerm(int(j), -1.5, 1.5, float(rng.uniform(0.2, 1.0)))
               for j in rng.choice(p, size=n_linear, replace=False)]
    G = n_rules + n_linear
    coef = rng.normal(0, 2, (G, T + 1)) * (rng.random((G, 1)) > sparsity)
    return FittedModel(BasisSet(rules, linears), rng.normal(0, 3, T + 1), coef, rng.uniform(0, 1, n_rules),
                       rng.uniform(0.1, 1, n_linear), p)
