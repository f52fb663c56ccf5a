"""Comparison estimators: inverse-probability weighting, observed-network
regression, and a single-community variant of the latent-network model.

The observed-network regression conditions on the measured graph, which by
construction differs edge-by-edge from the interference network in the
simulation design, so its spillover estimate attenuates. The
single-community fit assumes every pair interferes with equal probability
and is misspecified whenever effects are heterogeneous across groups.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError
from .estimation import fit_mle
from .model import Dataset
from .networks import validate_adjacency

__all__ = ["BaselineResult", "ht_direct", "fixed_network_fit", "random_graph_fit"]


@dataclass
class BaselineResult:
    direct: float
    indirect: float | None
    method: str
    detail: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in ("IPW", "FixedNetwork", "RandomGraph"):
            raise ParameterError(f"unknown baseline method tag {self.method!r}")


def ht_direct(data: Dataset, p: float) -> BaselineResult:
    """Horvitz-Thompson direct-effect estimate under Bernoulli(p) assignment.

    (1/N) sum Y_i Z_i / p - (1/N) sum Y_i (1 - Z_i) / (1 - p); no indirect
    component is defined for this estimator.
    """
    if not 0.0 < p < 1.0:
        raise ParameterError("assignment probability must lie in (0, 1)")
    y, z = data.y, data.z
    value = float((y * z).mean() / p - (y * (1 - z)).mean() / (1.0 - p))
    return BaselineResult(direct=value, indirect=None, method="IPW")


def fixed_network_fit(data: Dataset, A: np.ndarray) -> BaselineResult:
    """OLS of y on (1, z, observed-network treated in-exposure).

    The exposure regressor is ``sum_j A[j, i] z_j``. ``direct`` is the z
    coefficient; ``indirect`` is the exposure coefficient scaled by the mean
    exposure, the population-level quantity comparable to the model-based
    spillover total. When the design is collinear (constant treatment or
    constant exposure) the affected component is reported as absent.
    """
    A = validate_adjacency(A)
    exposure = (A.T @ data.z).astype(float)
    if np.ptp(data.z) == 0:
        return BaselineResult(direct=np.nan, indirect=None, method="FixedNetwork",
                              detail={"reason": "constant treatment"})
    W = np.column_stack([np.ones(data.n), data.z.astype(float), exposure])
    rank = np.linalg.matrix_rank(W)
    if np.ptp(exposure) == 0 or rank < 3:
        W2 = W[:, :2]
        coef, *_ = np.linalg.lstsq(W2, data.y, rcond=None)
        return BaselineResult(direct=float(coef[1]), indirect=None, method="FixedNetwork",
                              detail={"reason": "collinear exposure"})
    coef, *_ = np.linalg.lstsq(W, data.y, rcond=None)
    return BaselineResult(direct=float(coef[1]),
                          indirect=float(coef[2] * exposure.mean()),
                          method="FixedNetwork",
                          detail={"exposure_slope": float(coef[2]),
                                  "mean_exposure": float(exposure.mean())})


def random_graph_fit(data: Dataset, *, n_starts: int = 8, seed: int = 0,
                     maxiter: int = 300) -> BaselineResult:
    """Homogeneous-interference fit: the latent-network model with K forced to 1.

    Every pair shares one edge probability and one effect size; ``indirect``
    is ``beta * n_treated * pi``. Deliberately misspecified when the true
    effects differ across communities.
    """
    flat = Dataset(y=data.y, z=data.z, labels=np.ones(data.n, dtype=np.int64), x=data.x)
    fit = fit_mle(flat, 1, n_starts=n_starts, seed=seed, maxiter=maxiter,
                  compute_se=False)
    beta = float(fit.params.beta[0, 0])
    pi = float(fit.params.pi[0, 0])
    n_treated = float(fit.n_k[0])
    return BaselineResult(direct=float(fit.params.gamma),
                          indirect=beta * n_treated * pi,
                          method="RandomGraph",
                          detail={"beta": beta, "pi": pi, "n_treated": n_treated,
                                  "loglik": fit.loglik})
