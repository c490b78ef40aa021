from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np


@dataclass
class Dataset:
    X: np.ndarray
    D: np.ndarray
    Y: np.ndarray
    truth: dict[str, Any] | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.D = np.asarray(self.D, dtype=np.float64).ravel()
        self.Y = np.asarray(self.Y, dtype=np.float64).ravel()
        if self.X.ndim != 2:
            raise ValueError(f"X must be 2-d, got shape {self.X.shape}")
        n = self.X.shape[0]
        if self.D.shape[0] != n or self.Y.shape[0] != n:
            raise ValueError(f"inconsistent lengths: X {n}, D {self.D.shape[0]}, Y {self.Y.shape[0]}")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        truth = self.truth
        if truth is not None and "theta_i" in truth:
            truth = dict(truth, theta_i=np.asarray(truth["theta_i"])[idx])
        return Dataset(self.X[idx], self.D[idx], self.Y[idx], truth)


@dataclass
class NuisancePair:
    """Fitted regressors for ``E[D | X]`` (``m``) and ``E[Y | X]`` (``l``).

    ``fit_indices``, when set, are the rows the pair was trained on; residuals
    refuse to evaluate on any of them.
    """

    m: Callable[[np.ndarray], np.ndarray]
    l: Callable[[np.ndarray], np.ndarray]
    meta: dict[str, Any] = field(default_factory=dict)
    fit_indices: np.ndarray | None = None
