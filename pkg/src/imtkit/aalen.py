"""Additive-hazards censoring model and inverse-probability weights.

The censoring process (artificial censoring marks its events; everything
else is treated as censored-for-censoring) gets Aalen's least-squares
increments: at each censoring time the cumulative coefficient vector
jumps by ``(Z'Z)^{-1} Z' dN`` computed over the risk set, with an
intercept column first.  Jumps with a singular design are skipped and
counted.

Weights follow the exponential convention ``w(t) = 1 / exp(-H(t | x))``
with ``H`` the fitted cumulative censoring hazard; a discrete
product-limit variant sits behind ``survival_method="product_limit"``.
Weights are 1 before the first jump, clipped to ``cap``, and the
censoring survival is floored (default 1e-6) with a warning count.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import AnalysisDataset
from .errors import ParameterError


@dataclass
class AalenFit:
    times: np.ndarray                 # jump times, increasing
    increments: np.ndarray            # (n_jumps, 1 + p); column 0 is the intercept
    covariate_names: tuple[str, ...]
    n_skipped: int                    # singular-design jumps dropped
    meta: dict = field(default_factory=dict)

    def design(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != len(self.covariate_names):
            raise ParameterError("covariate width does not match the fit")
        return np.concatenate([np.ones((len(X), 1)), X], axis=1)

    def cumulative_coefficients(self) -> np.ndarray:
        """(n_jumps + 1, 1 + p) prefix sums; row 0 is all zero."""
        out = np.zeros((len(self.times) + 1, self.increments.shape[1]))
        np.cumsum(self.increments, axis=0, out=out[1:])
        return out

    def cumulative_hazard(self, times: np.ndarray, X: np.ndarray) -> np.ndarray:
        """Paired evaluation H(times[i] | X[i]), right-continuous in t."""
        Z = self.design(X)
        cum = self.cumulative_coefficients()
        idx = np.searchsorted(self.times, np.asarray(times, dtype=float), side="right")
        return np.einsum("ij,ij->i", cum[idx], Z)


def fit_aalen_censoring(
    dataset: AnalysisDataset,
    censor_event: np.ndarray,
    covariates: tuple[str, ...] | None = None,
    condition_limit: float = 1e10,
) -> AalenFit:
    """Fit the additive censoring model on counting-process rows.

    ``censor_event`` flags the rows whose stop is an artificial-censoring
    event.  With no covariates the increments reduce to the Nelson-Aalen
    jumps 1/(number at risk).
    """
    censor_event = np.asarray(censor_event, dtype=bool)
    if len(censor_event) != dataset.n_rows:
        raise ParameterError("censor_event length must match the dataset")
    names = dataset.covariate_names if covariates is None else tuple(covariates)
    cols = [dataset.covariate_names.index(c) for c in names]
    X = dataset.covariates[:, cols]
    n, p = X.shape
    Z = np.concatenate([np.ones((n, 1)), X], axis=1)
    q = p + 1

    ctimes = dataset.stop[censor_event]
    times, first = np.unique(ctimes, return_index=True)
    J = len(times)
    if J == 0:
        return AalenFit(times=np.zeros(0), increments=np.zeros((0, q)),
                        covariate_names=names, n_skipped=0)

    # risk-set Z'Z at each jump: suffix sums over stop order minus start order
    iu, ju = np.triu_indices(q)
    ZZ = Z[:, iu] * Z[:, ju]
    stop_order = np.argsort(dataset.stop, kind="stable")
    start_order = np.argsort(dataset.start, kind="stable")
    suf_stop = np.zeros((n + 1, len(iu)))
    suf_stop[:-1] = np.cumsum(ZZ[stop_order][::-1], axis=0)[::-1]
    suf_start = np.zeros((n + 1, len(iu)))
    suf_start[:-1] = np.cumsum(ZZ[start_order][::-1], axis=0)[::-1]
    i_stop = np.searchsorted(dataset.stop[stop_order], times, side="left")
    i_start = np.searchsorted(dataset.start[start_order], times, side="left")
    tri = suf_stop[i_stop] - suf_start[i_start]
    A = np.zeros((J, q, q))
    A[:, iu, ju] = tri
    A[:, ju, iu] = tri

    # Z' dN at each jump
    b = np.zeros((J, q))
    pos = np.searchsorted(times, ctimes)
    np.add.at(b, pos, Z[censor_event])

    sv = np.linalg.svd(A, compute_uv=False)
    good = sv[:, -1] * condition_limit > sv[:, 0]
    inc = np.zeros((J, q))
    if good.any():
        inc[good] = np.linalg.solve(A[good], b[good][:, :, None])[:, :, 0]
    return AalenFit(
        times=times[good],
        increments=inc[good],
        covariate_names=names,
        n_skipped=int((~good).sum()),
    )


@dataclass(frozen=True)
class WeightSeries:
    """Step weights for one subject: ``weights[i]`` applies on
    ``[times[i], times[i+1])`` with an implicit leading 1 before
    ``times[0]``."""

    cluster_id: int | str
    times: np.ndarray
    weights: np.ndarray


def _per_profile_weights(
    fit: AalenFit,
    profiles: np.ndarray,
    cap: float,
    survival_floor: float,
    survival_method: str,
) -> tuple[np.ndarray, int, int]:
    """(n_profiles, n_jumps) weight from each jump on, plus clip counts."""
    Z = fit.design(profiles)
    dH = fit.increments @ Z.T                       # (J, n_profiles)
    if survival_method == "exponential":
        surv = np.exp(-np.cumsum(dH, axis=0))
    elif survival_method == "product_limit":
        factors = np.clip(1.0 - dH, 1e-12, None)
        surv = np.exp(np.cumsum(np.log(factors), axis=0))
    else:
        raise ParameterError(f"unknown survival method {survival_method!r}")
    n_floored = int((surv < survival_floor).sum())
    surv = np.maximum(surv, survival_floor)
    w = 1.0 / surv
    n_capped = int((w > cap).sum())
    return np.minimum(w, cap).T, n_floored, n_capped


def ipc_weight_at(
    fit: AalenFit,
    times: np.ndarray,
    X: np.ndarray,
    cap: float = 20.0,
    survival_floor: float = 1e-6,
    survival_method: str = "exponential",
) -> tuple[np.ndarray, dict]:
    """Paired weights w(times[i] | X[i]); right-continuous steps.

    Covariate rows are grouped into unique profiles so the cost is
    O(n_profiles * n_jumps + n log n).
    """
    times = np.asarray(times, dtype=float)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if len(fit.times) == 0:
        return np.ones(len(times)), {"n_capped": 0, "n_floored": 0}
    profiles, inverse = np.unique(X, axis=0, return_inverse=True)
    w_tab, n_floored, n_capped = _per_profile_weights(
        fit, profiles, cap, survival_floor, survival_method)
    w_tab = np.concatenate([np.ones((len(profiles), 1)), w_tab], axis=1)
    idx = np.searchsorted(fit.times, times, side="right")
    w = w_tab[inverse, idx]
    return w, {"n_capped": n_capped, "n_floored": n_floored}


def ipc_weights(
    fit: AalenFit,
    dataset: AnalysisDataset,
    cap: float = 20.0,
    survival_floor: float = 1e-6,
    survival_method: str = "exponential",
) -> list[WeightSeries]:
    """Per-subject weight series evaluated at the model's jump times.

    Covariates are taken from each cluster's first row; the series stops
    at the cluster's last stop time.
    """
    names = fit.covariate_names
    cols = [dataset.covariate_names.index(c) for c in names]
    out: list[WeightSeries] = []
    seen: dict = {}
    for i in range(dataset.n_rows):
        cid = dataset.cluster[i]
        hi = float(dataset.stop[i])
        if cid in seen:
            seen[cid] = (seen[cid][0], max(seen[cid][1], hi))
        else:
            seen[cid] = (dataset.covariates[i, cols], hi)
    for cid, (x, hi) in seen.items():
        jt = fit.times[fit.times <= hi]
        w, _ = ipc_weight_at(fit, jt, np.tile(x, (len(jt), 1)),
                             cap=cap, survival_floor=survival_floor,
                             survival_method=survival_method)
        out.append(WeightSeries(cluster_id=cid, times=jt, weights=w))
    return out
