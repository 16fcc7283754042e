"""Cox partial likelihood on weighted, stratified counting-process rows.

Newton-Raphson with step halving on the weighted partial likelihood.
Ties use Efron's correction by default (Breslow optional); under Efron
each tied event time with m deaths contributes m steps l = 0..m-1 whose
risk denominators subtract l/m of the tied-death mass, every step
carrying the mean death weight.  Breslow is the single-step (l = 0)
special case, which lets one code path serve both.

Left truncation is native: a row is at risk at t iff ``start < t <= stop``.
Risk sums are suffix accumulations over rows sorted by stop minus rows
sorted by start, so each likelihood/score/information evaluation is
O(n (p + p^2)) after one sort.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import AnalysisDataset
from .errors import (
    ClusterError,
    ConstantCovariateError,
    EstimationError,
    MonotoneLikelihoodError,
    NoEventsError,
    ParameterError,
)


@dataclass(frozen=True)
class CoxOptions:
    ties: str = "efron"
    max_iterations: int = 25
    tolerance: float = 1e-9          # relative log-likelihood change
    score_tolerance: float = 1e-6    # max |score| required to declare convergence
    robust_cluster: bool = False
    max_step_halvings: int = 10
    divergence_bound: float = 15.0

    def __post_init__(self) -> None:
        if self.ties not in ("efron", "breslow"):
            raise ParameterError(f"unknown tie handling {self.ties!r}")
        if self.max_iterations < 1 or self.tolerance <= 0:
            raise ParameterError("need max_iterations >= 1 and tolerance > 0")


@dataclass
class FitResult:
    covariate_names: tuple[str, ...]
    coefficients: np.ndarray
    model_se: np.ndarray
    loglik: float
    iterations: int
    converged: bool
    n_events: int
    n_rows: int
    information: np.ndarray
    score: np.ndarray
    robust_se: np.ndarray | None = None
    robust_vcov: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def coefficient(self, name: str) -> float:
        return float(self.coefficients[self.covariate_names.index(name)])

    def se(self, name: str, robust: bool = False) -> float:
        arr = self.robust_se if robust else self.model_se
        if arr is None:
            raise EstimationError("robust SE was not computed for this fit")
        return float(arr[self.covariate_names.index(name)])


class _StratumWork:
    """Precomputed sort/tie structure for one stratum."""

    def __init__(self, idx: np.ndarray, X: np.ndarray, w: np.ndarray,
                 start: np.ndarray, stop: np.ndarray, event: np.ndarray,
                 ties: str) -> None:
        self.idx = idx                       # row positions in the parent dataset
        self.n, self.p = X.shape
        self.X = X
        self.w = w
        self.start = start
        self.stop = stop
        self.ties = ties
        self.stop_order = np.argsort(stop, kind="stable")
        self.start_order = np.argsort(start, kind="stable")
        self.sorted_stop = stop[self.stop_order]
        self.sorted_start = start[self.start_order]

        ev = np.flatnonzero(event)
        order = np.argsort(stop[ev], kind="stable")
        self.ev_rows = ev[order]             # event rows grouped by time
        ev_stop = stop[self.ev_rows]
        self.times, self.tie_first = np.unique(ev_stop, return_index=True)
        self.tie_count = np.diff(np.append(self.tie_first, len(ev_stop)))
        self.n_times = len(self.times)
        self.i_stop = np.searchsorted(self.sorted_stop, self.times, side="left")
        self.i_start = np.searchsorted(self.sorted_start, self.times, side="left")
        self.ev_time_idx = np.searchsorted(self.times, ev_stop)

        m = self.tie_count
        if ties == "efron":
            total = int(m.sum())
            offsets = np.repeat(np.cumsum(m) - m, m)
            l = np.arange(total) - offsets
            self.step_time = np.repeat(np.arange(self.n_times), m)
            self.step_frac = l / np.repeat(m, m)
            self.step_first = np.cumsum(m) - m   # first step of each time
        else:
            self.step_time = np.arange(self.n_times)
            self.step_frac = np.zeros(self.n_times)
            self.step_first = np.arange(self.n_times)

        self.iu, self.ju = np.triu_indices(self.p)
        # columns: [1 | x | upper-triangle xx'] so one suffix pass covers S0/S1/S2
        self.Xext = np.concatenate(
            [np.ones((self.n, 1)), X, X[:, self.iu] * X[:, self.ju]], axis=1
        )

    def _segment_sums(self, a: np.ndarray) -> np.ndarray:
        # sums of a over tied-death groups (a indexed like ev_rows)
        if self.n_times == 0:
            return a[:0]
        return np.add.reduceat(a, self.tie_first, axis=0)

    def _risk_sums(self, M: np.ndarray) -> np.ndarray:
        # M is (n, k); returns (n_times, k) sums over {start < t <= stop}
        k = M.shape[1]
        suf_stop = np.zeros((self.n + 1, k))
        suf_stop[:-1] = np.cumsum(M[self.stop_order][::-1], axis=0)[::-1]
        suf_start = np.zeros((self.n + 1, k))
        suf_start[:-1] = np.cumsum(M[self.start_order][::-1], axis=0)[::-1]
        return suf_stop[self.i_stop] - suf_start[self.i_start]

    def eval(self, beta: np.ndarray) -> tuple[float, np.ndarray, np.ndarray, dict]:
        """Log-likelihood, score, information, plus step pieces for reuse."""
        p = self.p
        ll = 0.0
        U = np.zeros(p)
        I_tri = np.zeros(len(self.iu))
        pieces: dict = {}
        if self.n_times == 0:
            return ll, U, _sym(I_tri, self.iu, self.ju, p), pieces

        eta = self.X @ beta
        shift = float(eta.max())
        v = self.w * np.exp(eta - shift)
        M = v[:, None] * self.Xext
        S = self._risk_sums(M)                       # (n_times, 1+p+tri)
        Sd = self._segment_sums(M[self.ev_rows])     # tied-death sums
        wD = self._segment_sums(self.w[self.ev_rows])
        mean_wD = wD / self.tie_count

        st, frac = self.step_time, self.step_frac
        # efron: m steps per time, each carrying the mean death weight;
        # breslow: one step carrying the full death weight
        step_w = mean_wD[st] if self.ties == "efron" else wD
        S_l = S[st] - frac[:, None] * Sd[st]
        S0_l = S_l[:, 0]
        S1_l = S_l[:, 1:1 + p]
        S2_l = S_l[:, 1 + p:]
        xbar = S1_l / S0_l[:, None]

        w_ev = self.w[self.ev_rows]
        ll = float(w_ev @ (eta[self.ev_rows] - shift) - step_w @ np.log(S0_l))
        U = (w_ev[:, None] * self.X[self.ev_rows]).sum(axis=0) \
            - (step_w[:, None] * xbar).sum(axis=0)
        I_tri = (step_w[:, None] * (S2_l / S0_l[:, None]
                                    - xbar[:, self.iu] * xbar[:, self.ju])).sum(axis=0)

        pieces.update(v=v, S0_l=S0_l, xbar=xbar, step_w=step_w)
        return ll, U, _sym(I_tri, self.iu, self.ju, p), pieces

    def score_residuals(self, beta: np.ndarray) -> np.ndarray:
        """Per-row (unweighted) score residuals; w @ residuals == score."""
        p = self.p
        out = np.zeros((self.n, p))
        if self.n_times == 0:
            return out
        _, _, _, pieces = self._cached_eval(beta)
        v = pieces["v"]
        S0_l, xbar, step_w = pieces["S0_l"], pieces["xbar"], pieces["step_w"]
        r = v / self.w                      # exp(eta - shift); shift cancels below
        dlam = step_w / S0_l                # shifted baseline increments

        st, frac = self.step_time, self.step_frac
        nt = self.n_times
        A0 = np.zeros(nt); B0 = np.zeros(nt)
        A1 = np.zeros((nt, p)); B1 = np.zeros((nt, p)); M1 = np.zeros((nt, p))
        np.add.at(A0, st, dlam)
        np.add.at(B0, st, frac * dlam)
        np.add.at(A1, st, xbar * dlam[:, None])
        np.add.at(B1, st, xbar * (frac * dlam)[:, None])
        np.add.at(M1, st, xbar)
        # mean of the step xbars each death saw: m steps under efron, one under breslow
        if self.ties == "efron":
            M1 /= self.tie_count[:, None]

        P0 = np.concatenate([[0.0], np.cumsum(A0)])
        P1 = np.vstack([np.zeros(p), np.cumsum(A1, axis=0)])
        k_hi = np.searchsorted(self.times, self.stop, side="right")
        k_lo = np.searchsorted(self.times, self.start, side="right")
        G0 = P0[k_hi] - P0[k_lo]
        G1 = P1[k_hi] - P1[k_lo]
        out = -r[:, None] * (self.X * G0[:, None] - G1)

        ev, ti = self.ev_rows, self.ev_time_idx
        out[ev] += self.X[ev] - M1[ti]
        out[ev] += r[ev, None] * (self.X[ev] * B0[ti, None] - B1[ti])
        return out

    def _cached_eval(self, beta: np.ndarray):
        key = beta.tobytes()
        if getattr(self, "_ck", None) != key:
            self._cv = self.eval(beta)
            self._ck = key
        return self._cv


def _sym(tri: np.ndarray, iu: np.ndarray, ju: np.ndarray, p: int) -> np.ndarray:
    out = np.zeros((p, p))
    out[iu, ju] = tri
    out[ju, iu] = tri
    return out


class _CoxProblem:
    def __init__(self, dataset: AnalysisDataset, options: CoxOptions) -> None:
        if len(dataset.covariate_names) == 0:
            raise ParameterError("the model needs at least one covariate")
        if dataset.n_events == 0:
            raise NoEventsError("no events")
        for j, name in enumerate(dataset.covariate_names):
            col = dataset.covariates[:, j]
            if np.ptp(col) == 0:
                raise ConstantCovariateError(f"constant covariate {name!r}")
        self.dataset = dataset
        self.p = len(dataset.covariate_names)
        if dataset.stratum is None:
            groups = [np.arange(dataset.n_rows)]
        else:
            _, codes = np.unique(dataset.stratum.astype(str), return_inverse=True)
            groups = [np.flatnonzero(codes == s) for s in range(codes.max() + 1)]
        self.strata = [
            _StratumWork(idx, dataset.covariates[idx], dataset.weight[idx],
                         dataset.start[idx], dataset.stop[idx],
                         dataset.event[idx], options.ties)
            for idx in groups
        ]
        self.w_events = float(dataset.weight[dataset.event].sum())

    def eval(self, beta: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
        ll = 0.0
        U = np.zeros(self.p)
        I = np.zeros((self.p, self.p))
        for s in self.strata:
            l, u, i, _ = s._cached_eval(beta)
            ll += l
            U += u
            I += i
        return ll, U, I

    def score_residuals(self, beta: np.ndarray) -> np.ndarray:
        out = np.zeros((self.dataset.n_rows, self.p))
        for s in self.strata:
            out[s.idx] = s.score_residuals(beta)
        return out


def fit_cox(dataset: AnalysisDataset, options: CoxOptions | None = None) -> FitResult:
    """Maximise the weighted partial likelihood; see :class:`CoxOptions`.

    Raises :class:`NoEventsError`, :class:`ConstantCovariateError` (zero
    variance in every event risk set), or :class:`MonotoneLikelihoodError`
    (a coefficient passed ``divergence_bound`` with the likelihood still
    rising, the separation signature).  A returned result with
    ``converged=True`` guarantees ``max |score| < score_tolerance``.
    """
    options = options or CoxOptions()
    problem = _CoxProblem(dataset, options)
    p = problem.p
    beta = np.zeros(p)
    ll, U, I = problem.eval(beta)
    diag = np.diag(I)
    dead = diag <= 1e-12 * max(1.0, problem.w_events)
    if np.any(dead):
        name = dataset.covariate_names[int(np.argmax(dead))]
        raise ConstantCovariateError(f"constant covariate {name!r}")

    converged = False
    iterations = 0
    for iterations in range(1, options.max_iterations + 1):
        try:
            step = np.linalg.solve(I, U)
        except np.linalg.LinAlgError as exc:
            raise EstimationError("singular information matrix") from exc
        accepted = False
        # slack scales with |ll|: re-evaluating at the optimum wobbles by
        # ~eps * |ll|, which must not read as a likelihood decrease
        slack = 1e-13 * max(1.0, abs(ll))
        for _ in range(options.max_step_halvings + 1):
            cand = beta + step
            ll_new, U_new, I_new = problem.eval(cand)
            if np.isfinite(ll_new) and ll_new >= ll - slack:
                accepted = True
                break
            step = step / 2.0
        if not accepted:
            break
        beta, ll_prev, ll, U, I = cand, ll, ll_new, U_new, I_new
        if np.max(np.abs(beta)) > options.divergence_bound and ll >= ll_prev:
            raise MonotoneLikelihoodError(
                "monotone likelihood: a coefficient is diverging"
            )
        rel = abs(ll - ll_prev) / max(abs(ll), 1e-8)
        if rel < options.tolerance and np.max(np.abs(U)) < options.score_tolerance:
            converged = True
            break

    try:
        cov = np.linalg.inv(I)
    except np.linalg.LinAlgError as exc:
        raise EstimationError("singular information matrix") from exc
    model_se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    result = FitResult(
        covariate_names=dataset.covariate_names,
        coefficients=beta,
        model_se=model_se,
        loglik=ll,
        iterations=iterations,
        converged=converged,
        n_events=dataset.n_events,
        n_rows=dataset.n_rows,
        information=I,
        score=U,
        meta={"ties": options.ties, **dataset.meta},
    )
    if options.robust_cluster:
        result.robust_vcov = _robust_vcov(problem, result)
        result.robust_se = np.sqrt(np.clip(np.diag(result.robust_vcov), 0.0, None))
    return result


def _robust_vcov(problem: _CoxProblem, fit: FitResult) -> np.ndarray:
    ds = problem.dataset
    levels, codes = np.unique(ds.cluster.astype(str), return_inverse=True)
    if len(levels) < 2:
        raise ClusterError("robust variance needs at least two clusters")
    resid = problem.score_residuals(fit.coefficients)
    Ug = np.zeros((len(levels), problem.p))
    np.add.at(Ug, codes, ds.weight[:, None] * resid)
    middle = Ug.T @ Ug
    inv = np.linalg.inv(fit.information)
    return inv @ middle @ inv


def robust_variance(fit: FitResult, dataset: AnalysisDataset) -> np.ndarray:
    """Cluster-robust sandwich covariance at the fitted coefficients.

    Clusters come from ``dataset.cluster``; score residuals are summed
    within cluster, so the result is invariant to row order.
    """
    options = CoxOptions(ties=fit.meta.get("ties", "efron"))
    problem = _CoxProblem(dataset, options)
    vcov = _robust_vcov(problem, fit)
    fit.robust_vcov = vcov
    fit.robust_se = np.sqrt(np.clip(np.diag(vcov), 0.0, None))
    return vcov
