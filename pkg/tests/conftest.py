import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from stepselect.core import StrataDataset

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def make_dataset(X, k, case_cols=None, **kw) -> StrataDataset:
    """Equal-size strata of ``k`` rows; ``case_cols[s]`` marks the case (default 0)."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    S = X.shape[0] // k
    case = np.zeros((S, k), bool)
    cols = np.zeros(S, int) if case_cols is None else np.asarray(case_cols)
    case[np.arange(S), cols] = True
    names = kw.pop("feature_names", tuple(f"x{j + 1}" for j in range(X.shape[1])))
    return StrataDataset(np.repeat(np.arange(S), k), case.ravel(), X, names, **kw)


def grid_mle(x, k, case_cols, lo=-4.0, hi=4.0, step=0.01) -> float:
    """Maximizer of the one-slope conditional log-likelihood on a grid.

    Exhaustive evaluation; shares no code with the Newton fitter.
    """
    x = np.asarray(x, dtype=float).reshape(-1, k)
    chosen = x[np.arange(x.shape[0]), np.asarray(case_cols)]
    grid = np.arange(lo, hi + step / 2, step)
    best, arg = -math.inf, None
    for b in grid:
        z = b * x
        m = z.max(axis=1)
        ll = float(np.sum(b * chosen - m - np.log(np.exp(z - m[:, None]).sum(axis=1))))
        if ll > best:
            best, arg = ll, b
    return float(arg)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
