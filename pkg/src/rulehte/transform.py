"""Inverse-propensity transformed outcomes, one column per non-control arm."""
from __future__ import annotations

import csv

import numpy as np

from .data import Dataset
from .errors import DataError, NumericalError
from .propensity import GpsModel


def transform_outcomes(data: Dataset, gps: GpsModel | np.ndarray) -> np.ndarray:
    """Return the n x T matrix ``Z`` with

    ``Z[i, t-1] = I(w_i = t) y_i / e(t, x_i) - I(w_i = 0) y_i / e(0, x_i)``.

    ``gps`` is either a fitted :class:`GpsModel` (its clipped probabilities
    are used) or an n x (T+1) array of known propensities.
    """
    if isinstance(gps, GpsModel):
        if gps.T != data.T or gps.p != data.p:
            raise DataError(f"GPS model is for T={gps.T}, p={gps.p}; data has T={data.T}, p={data.p}")
        E = gps.predict(data.X)
    else:
        E = np.asarray(gps, dtype=np.float64)
        if E.shape != (data.n, data.n_arms):
            raise DataError(f"propensity matrix must be {(data.n, data.n_arms)}, got {E.shape}")
    e_obs = E[np.arange(data.n), data.w]
    zero = np.flatnonzero(e_obs <= 0)
    if zero.size:
        raise NumericalError(f"zero propensity for the received arm of subject {int(zero[0])}")
    weighted = data.y / e_obs
    Z = np.zeros((data.n, data.T))
    treated = data.w > 0
    Z[np.flatnonzero(treated), data.w[treated] - 1] = weighted[treated]
    Z[~treated, :] = -weighted[~treated, None]
    return Z


def write_transformed(Z: np.ndarray, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow([f"z{t + 1}" for t in range(Z.shape[1])])
        out.writerows([[repr(float(v)) for v in row] for row in Z])
