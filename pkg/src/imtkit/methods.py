"""Immortal-time-bias accommodation methods.

Each method is a transformation from raw subjects to an
:class:`~imtkit.core.AnalysisDataset` plus the fitting options it needs;
:func:`analyze` dispatches both steps.  Method families:

* misclassification: :func:`include_imt`
* excision/realignment: :func:`exclude_imt`, :func:`ptdm`, :func:`landmark`
* alignment-free: :func:`time_varying`
* trial emulation: :func:`sequential_trials`, :func:`clone_censor_weight`

Boundary semantics (recorded in dataset meta): a subject whose
initiation lands exactly on a trial start is already treated and thus
ineligible there, so sequential eligibility is strict (``treat_init >
t_k``) and the treated window is ``treat_init < t_k + window``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .aalen import fit_aalen_censoring, ipc_weight_at
from .core import TREAT, AnalysisDataset, Subject
from .cox import CoxOptions, FitResult, fit_cox
from .errors import NonIdentifiableError, ParameterError

KINDS = ("include_imt", "exclude_imt", "ptdm", "landmark",
         "time_varying", "sequential", "cloning")


@dataclass(frozen=True)
class MethodSpec:
    """Which method to run and its parameters; validated per kind."""

    kind: str
    landmark_time: float | None = None
    grace_end: float | None = None
    window_width: float | None = None
    trial_count: int | None = None
    adherence_mode: str = "pp"
    ptdm_source: str = "observed"
    rng_seed: int = 0
    weight_cap: float | None = None       # None = per-method default
    weight_resolution: float | None = None

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ParameterError(f"unknown method kind {self.kind!r}")
        if self.adherence_mode not in ("itt_like", "pp"):
            raise ParameterError(f"unknown adherence mode {self.adherence_mode!r}")
        if self.ptdm_source not in ("observed", "uniform_grace"):
            raise ParameterError(f"unknown ptdm source {self.ptdm_source!r}")
        need_pos = {"landmark": ("landmark_time",), "cloning": ("grace_end",)}
        for attr in need_pos.get(self.kind, ()):
            v = getattr(self, attr)
            if v is None or v <= 0:
                raise ParameterError(f"{self.kind} requires positive {attr}")
        if self.kind == "ptdm" and self.ptdm_source == "uniform_grace":
            if self.grace_end is None or self.grace_end <= 0:
                raise ParameterError("ptdm uniform_grace requires positive grace_end")
        if self.kind == "sequential":
            if self.trial_count is None or self.trial_count < 1:
                raise ParameterError("sequential requires trial_count >= 1")
            if self.window_width is None or self.window_width <= 0:
                raise ParameterError("sequential requires positive window_width")


@dataclass(frozen=True)
class CloneRecord:
    source_subject: int | str
    arm: str                    # treated_copy | control_copy
    censor_time: float
    censor_reason: str          # deviation | grace_expiry | natural


@dataclass(frozen=True)
class TrialAssignment:
    trial: int
    subject_id: int | str
    arm: str                    # treated | control
    time_zero: float


# ---------------------------------------------------------------- helpers

def _subject_arrays(subjects):
    if not subjects:
        raise ParameterError("no subjects")
    names = tuple(subjects[0].baseline_covariates.keys())
    for s in subjects:
        if tuple(s.baseline_covariates.keys()) != names:
            raise ParameterError("subjects must share one baseline covariate set")
    ids = np.array([s.id for s in subjects], dtype=object)
    fu = np.array([s.followup_end for s in subjects], dtype=float)
    ev = np.array([s.event for s in subjects], dtype=bool)
    ta = np.array([np.nan if s.treat_init is None else s.treat_init for s in subjects])
    # analytically never-treated: initiation at/after follow-up end
    ta[~np.isnan(ta) & (ta >= fu)] = np.nan
    X = np.array([[float(s.baseline_covariates[k]) for k in names] for s in subjects])
    X = X.reshape(len(subjects), len(names))
    return ids, fu, ev, ta, X, names


def _single_row_dataset(ids, fu, ev, a, X, names, meta) -> AnalysisDataset:
    return AnalysisDataset(
        cluster=ids, start=np.zeros(len(ids)), stop=fu, event=ev,
        covariates=np.column_stack([a.astype(float), X]),
        covariate_names=(TREAT,) + names, meta=meta,
    )


def _check_two_arms(a: np.ndarray) -> None:
    if len(a) == 0 or a.all() or not a.any():
        raise NonIdentifiableError("non-identifiable treatment contrast")


def _split_rows(stop: np.ndarray, boundaries: np.ndarray):
    """Split rows starting at 0 at every boundary strictly inside (0, stop).

    Returns (row_idx, seg_no, seg_start, seg_stop, is_last).
    """
    k = np.searchsorted(boundaries, stop, side="left")
    nseg = k + 1
    total = int(nseg.sum())
    row_idx = np.repeat(np.arange(len(stop)), nseg)
    seg_no = np.arange(total) - np.repeat(np.cumsum(nseg) - nseg, nseg)
    seg_start = np.where(seg_no == 0, 0.0, boundaries[np.maximum(seg_no - 1, 0)])
    is_last = seg_no == np.repeat(k, nseg)
    seg_stop = np.where(is_last, stop[row_idx],
                        boundaries[np.minimum(seg_no, len(boundaries) - 1)])
    return row_idx, seg_no, seg_start, seg_stop, is_last


# ---------------------------------------------------------------- methods

def include_imt(subjects) -> AnalysisDataset:
    """Everyone from study entry; ever-treated classified as treated."""
    ids, fu, ev, ta, X, names = _subject_arrays(subjects)
    a = ~np.isnan(ta)
    _check_two_arms(a)
    return _single_row_dataset(ids, fu, ev, a, X, names, {"method": "include_imt"})


def exclude_imt(subjects) -> AnalysisDataset:
    """Treated subjects restart the clock at initiation; controls as-is."""
    ids, fu, ev, ta, X, names = _subject_arrays(subjects)
    a = ~np.isnan(ta)
    _check_two_arms(a)
    stop = fu - np.where(a, ta, 0.0)
    return AnalysisDataset(
        cluster=ids, start=np.zeros(len(ids)), stop=stop, event=ev,
        covariates=np.column_stack([a.astype(float), X]),
        covariate_names=(TREAT,) + names, meta={"method": "exclude_imt"},
    )


def ptdm(subjects, source: str = "observed", grace_end: float | None = None,
         rng_seed: int = 0) -> AnalysisDataset:
    """Randomly assign waiting times to controls, then shift clocks.

    Treated subjects are handled as in :func:`exclude_imt`.  Each control
    draws an imputed waiting time (``observed``: with replacement from
    the ever-treated waiting-time pool; ``uniform_grace``: uniform on
    (0, grace_end]) and is excluded when follow-up ends, for any reason,
    at or before the imputed time.
    """
    ids, fu, ev, ta, X, names = _subject_arrays(subjects)
    a = ~np.isnan(ta)
    rng = np.random.default_rng(rng_seed)
    n_ctrl = int((~a).sum())
    if source == "observed":
        pool = ta[a]
        if len(pool) == 0:
            raise NonIdentifiableError("empty waiting-time pool")
        imputed = rng.choice(pool, size=n_ctrl, replace=True)
    elif source == "uniform_grace":
        if grace_end is None or grace_end <= 0:
            raise ParameterError("uniform_grace needs positive grace_end")
        imputed = grace_end * (1.0 - rng.random(n_ctrl))
    else:
        raise ParameterError(f"unknown ptdm source {source!r}")

    shift = np.zeros(len(ids))
    shift[a] = ta[a]
    shift[~a] = imputed
    keep = fu > shift
    if not (keep & ~a).any() or not a.any():
        raise NonIdentifiableError("non-identifiable treatment contrast")
    ds = AnalysisDataset(
        cluster=ids[keep], start=np.zeros(int(keep.sum())),
        stop=(fu - shift)[keep], event=ev[keep],
        covariates=np.column_stack([a.astype(float)[keep], X[keep]]),
        covariate_names=(TREAT,) + names,
        meta={"method": "ptdm", "ptdm_source": source, "rng_seed": rng_seed,
              "n_controls_excluded": int((~keep & ~a).sum())},
    )
    return ds


def landmark(subjects, landmark_time: float) -> AnalysisDataset:
    """Keep subjects still at risk at the landmark; classify by status there."""
    if landmark_time <= 0:
        raise ParameterError("landmark_time must be positive")
    ids, fu, ev, ta, X, names = _subject_arrays(subjects)
    keep = fu > landmark_time
    a = ~np.isnan(ta) & (ta <= landmark_time)
    _check_two_arms(a[keep])
    return AnalysisDataset(
        cluster=ids[keep], start=np.zeros(int(keep.sum())),
        stop=(fu - landmark_time)[keep], event=ev[keep],
        covariates=np.column_stack([a.astype(float)[keep], X[keep]]),
        covariate_names=(TREAT,) + names,
        meta={"method": "landmark", "landmark_time": landmark_time,
              "n_excluded": int((~keep).sum())},
    )


def time_varying(subjects) -> AnalysisDataset:
    """Treatment as a time-varying covariate on the original clock."""
    ids, fu, ev, ta, X, names = _subject_arrays(subjects)
    a = ~np.isnan(ta)
    if not a.any():
        raise NonIdentifiableError("non-identifiable treatment contrast")
    # rows: untreated span (0, ta], treated span (ta, fu]; degenerate spans drop
    pre = a & (ta > 0)
    n1 = int(pre.sum())
    n = len(ids)
    cluster = np.concatenate([ids[pre], ids])
    start = np.concatenate([np.zeros(n1), np.where(a, ta, 0.0)])
    stop = np.concatenate([ta[pre], fu])
    event = np.concatenate([np.zeros(n1, bool), ev])
    treat = np.concatenate([np.zeros(n1), a.astype(float)])
    Xall = np.concatenate([X[pre], X], axis=0)
    return AnalysisDataset(
        cluster=cluster, start=start, stop=stop, event=event,
        covariates=np.column_stack([treat, Xall]),
        covariate_names=(TREAT,) + names,
        meta={"method": "time_varying"},
    )


def trial_assignments(subjects, trial_count: int, window_width: float) -> list[TrialAssignment]:
    """Per-trial eligibility and arm labels (diagnostic view)."""
    ids, fu, ev, ta, X, names = _subject_arrays(subjects)
    has = ~np.isnan(ta)
    out: list[TrialAssignment] = []
    for k in range(trial_count):
        tau = k * window_width
        elig = (fu > tau) & (~has | (ta >= tau))
        treated = elig & has & (ta < tau + window_width)
        for i in np.flatnonzero(elig):
            out.append(TrialAssignment(
                trial=k, subject_id=ids[i],
                arm="treated" if treated[i] else "control", time_zero=tau))
    return out


def sequential_trials(
    subjects,
    trial_count: int,
    window_width: float,
    adherence_mode: str = "pp",
    weight_cap: float = 20.0,
    weight_resolution: float | None = None,
    survival_floor: float = 1e-6,
    exact_split_budget: int = 200_000,
) -> AnalysisDataset:
    """Emulated trials at t_k = k * window_width, trial index as stratum.

    Enrollment at t_k takes subjects still event-free after t_k whose
    treatment, if any, starts at t_k or later; the treated arm initiates
    within the half-open window [t_k, t_k + window).  A subject whose
    recorded initiation time equals t_k starts treatment exactly at
    enrollment, so it belongs to that trial's treated arm, not to an
    earlier one.  Trials with an empty arm are dropped with a warning
    in meta.  In
    ``pp`` mode controls are artificially censored at later initiation,
    an additive censoring model (intercept + baseline covariates, control
    arm, pooled across trials on the trial clock) is fitted, and rows are
    split into segments carrying inverse-probability-of-censoring
    weights: exactly at the model's jump times when the resulting row
    count stays within ``exact_split_budget``, else on a grid of
    ``weight_resolution`` (default: the window width), each segment
    using the cumulative hazard at its own start.
    """
    ids, fu, ev, ta, X, names = _subject_arrays(subjects)
    has = ~np.isnan(ta)
    parts = []
    dropped: list[int] = []
    for k in range(trial_count):
        tau = k * window_width
        elig = (fu > tau) & (~has | (ta >= tau))
        treated = elig & has & (ta < tau + window_width)
        control = elig & ~treated
        if not treated.any() or not control.any():
            dropped.append(k)
            continue
        idx = np.flatnonzero(elig)
        arm = treated[idx].astype(float)
        stop = fu[idx] - tau
        event = ev[idx].copy()
        art = np.zeros(len(idx), bool)
        if adherence_mode == "pp":
            cross = (arm == 0) & has[idx] & (ta[idx] < fu[idx])
            stop = np.where(cross, ta[idx] - tau, stop)
            event[cross] = False
            art[cross] = True
        parts.append((ids[idx], np.full(len(idx), k), arm, stop, event, art, X[idx]))
    if not parts:
        raise NonIdentifiableError("all trials dropped: no two-arm enrollment")

    cluster = np.concatenate([p[0] for p in parts])
    stratum = np.concatenate([p[1] for p in parts])
    arm = np.concatenate([p[2] for p in parts])
    stop = np.concatenate([p[3] for p in parts])
    event = np.concatenate([p[4] for p in parts])
    art = np.concatenate([p[5] for p in parts])
    Xb = np.concatenate([p[6] for p in parts], axis=0)
    meta = {
        "method": "sequential", "adherence_mode": adherence_mode,
        "trial_count": trial_count, "window_width": window_width,
        "dropped_trials": dropped, "n_artificial_censorings": int(art.sum()),
        "eligibility": "treat_init >= t_k (or never); treated arm treat_init in [t_k, t_k + window)",
    }

    if adherence_mode == "itt_like" or not art.any():
        meta["weight_model"] = "none (no artificial censoring)"
        return AnalysisDataset(
            cluster=cluster, start=np.zeros(len(stop)), stop=stop, event=event,
            covariates=np.column_stack([arm, Xb]),
            covariate_names=(TREAT,) + names, stratum=stratum, meta=meta,
        )

    # censoring model on the control arm, pooled across trials
    ctrl = arm == 0
    ds_ctrl = AnalysisDataset(
        cluster=cluster[ctrl], start=np.zeros(int(ctrl.sum())), stop=stop[ctrl],
        event=np.zeros(int(ctrl.sum()), bool), covariates=Xb[ctrl],
        covariate_names=names,
    )
    cens_fit = fit_aalen_censoring(ds_ctrl, art[ctrl], covariates=names)
    n_ctrl_rows = int(ctrl.sum())
    if len(cens_fit.times) and len(cens_fit.times) * n_ctrl_rows <= exact_split_budget:
        boundaries = cens_fit.times
        meta["weight_steps"] = "exact jump times"
    else:
        res = weight_resolution if weight_resolution is not None else window_width
        boundaries = np.arange(1, int(np.ceil(stop.max() / res)) + 1) * res
        meta["weight_steps"] = f"grid resolution {res}"
    row_idx, _, seg_start, seg_stop, is_last = _split_rows(stop[ctrl], boundaries)
    w_seg, clip_info = ipc_weight_at(
        cens_fit, seg_start, Xb[ctrl][row_idx],
        cap=weight_cap, survival_floor=survival_floor)
    meta.update(
        weight_model="additive censoring hazard: intercept + baseline covariates, "
                     "control arm, pooled trials",
        aalen_skipped=cens_fit.n_skipped, weight_cap=weight_cap, **clip_info,
    )

    c_idx = np.flatnonzero(ctrl)
    t_idx = np.flatnonzero(~ctrl)
    cluster_out = np.concatenate([cluster[c_idx][row_idx], cluster[t_idx]])
    stratum_out = np.concatenate([stratum[c_idx][row_idx], stratum[t_idx]])
    start_out = np.concatenate([seg_start, np.zeros(len(t_idx))])
    stop_out = np.concatenate([seg_stop, stop[t_idx]])
    event_out = np.concatenate([event[c_idx][row_idx] & is_last, event[t_idx]])
    arm_out = np.concatenate([np.zeros(len(seg_start)), np.ones(len(t_idx))])
    X_out = np.concatenate([Xb[c_idx][row_idx], Xb[t_idx]], axis=0)
    w_out = np.concatenate([w_seg, np.ones(len(t_idx))])
    return AnalysisDataset(
        cluster=cluster_out, start=start_out, stop=stop_out, event=event_out,
        covariates=np.column_stack([arm_out, X_out]),
        covariate_names=(TREAT,) + names, weight=w_out, stratum=stratum_out,
        meta=meta,
    )


def clone_records(subjects, grace_end: float) -> list[CloneRecord]:
    """The two clones per subject with censor times and reasons."""
    ids, fu, ev, ta, X, names = _subject_arrays(subjects)
    has = ~np.isnan(ta)
    out: list[CloneRecord] = []
    for i in range(len(ids)):
        if has[i] and ta[i] <= grace_end:
            out.append(CloneRecord(ids[i], "treated_copy", fu[i], "natural"))
            out.append(CloneRecord(ids[i], "control_copy", ta[i], "deviation"))
        else:
            if fu[i] > grace_end:
                out.append(CloneRecord(ids[i], "treated_copy", grace_end, "grace_expiry"))
            else:
                out.append(CloneRecord(ids[i], "treated_copy", fu[i], "natural"))
            out.append(CloneRecord(ids[i], "control_copy", fu[i], "natural"))
    return out


def _fit_logistic(Z: np.ndarray, y: np.ndarray, max_iter: int = 25,
                  tol: float = 1e-8) -> np.ndarray | None:
    """Small Newton logistic fit; None when degenerate or diverging."""
    beta = np.zeros(Z.shape[1])
    for _ in range(max_iter):
        p = 1.0 / (1.0 + np.exp(-(Z @ beta)))
        grad = Z.T @ (y - p)
        W = p * (1.0 - p)
        H = (Z * W[:, None]).T @ Z
        H[np.diag_indices_from(H)] += 1e-10
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            return None
        beta = beta + step
        if not np.all(np.isfinite(beta)) or np.max(np.abs(beta)) > 15:
            return None
        if np.max(np.abs(grad)) < tol:
            return beta
    return beta


def clone_censor_weight(
    subjects,
    grace_end: float,
    weight_cap: float = 1e6,
    weight_resolution: float = 1.0,
) -> AnalysisDataset:
    """Clone every subject into both arms and censor at protocol deviation.

    Control copies are censored at initiation inside the grace period;
    treated copies at grace end when still untreated.  A discrete
    per-interval censoring model per arm (logistic on baseline
    covariates among clones at risk; empty intervals give hazard 0;
    degenerate fits fall back to the empirical fraction) produces
    inverse-cumulative-product weights, frozen after grace end.
    """
    if grace_end <= 0:
        raise ParameterError("grace_end must be positive")
    ids, fu, ev, ta, X, names = _subject_arrays(subjects)
    has = ~np.isnan(ta)
    compliant = has & (ta <= grace_end)

    # treated copies
    end_t = np.where(compliant, fu, np.minimum(fu, grace_end))
    art_t = ~compliant & (fu > grace_end)
    ev_t = ev & ~art_t
    # control copies
    art_c = compliant            # initiation inside grace deviates from control
    end_c = np.where(art_c, ta, fu)
    ev_c = ev & ~art_c

    b = np.arange(1, int(np.ceil(grace_end / weight_resolution)) + 1) * weight_resolution
    b = b[b < grace_end - 1e-12 * max(1.0, grace_end)]
    boundaries = np.append(b, grace_end)
    G = len(boundaries)
    profiles, prof_idx = np.unique(X, axis=0, return_inverse=True)
    Zp = np.concatenate([np.ones((len(profiles), 1)), profiles], axis=1)
    Z = np.concatenate([np.ones((len(ids), 1)), X], axis=1)

    def weight_table(end: np.ndarray, art: np.ndarray, ctime: np.ndarray):
        """(n_profiles, G+1) cumulative inverse weights; [:,0] = 1."""
        p_tab = np.zeros((len(profiles), G))
        fallbacks = 0
        lo = 0.0
        for j, hi in enumerate(boundaries):
            at_risk = end > lo
            yj = art & (ctime > lo) & (ctime <= hi)
            if yj.any():
                coef = _fit_logistic(Z[at_risk], yj[at_risk].astype(float)) \
                    if len(names) else None
                if coef is None:
                    fallbacks += int(len(names) > 0)
                    p_tab[:, j] = yj[at_risk].mean()
                else:
                    p_tab[:, j] = 1.0 / (1.0 + np.exp(-(Zp @ coef)))
            lo = hi
        p_tab = np.clip(p_tab, 0.0, 1.0 - 1e-9)
        cp = np.concatenate(
            [np.ones((len(profiles), 1)), np.cumprod(1.0 / (1.0 - p_tab), axis=1)],
            axis=1)
        n_capped = int((cp > weight_cap).sum())
        return np.minimum(cp, weight_cap), fallbacks, n_capped

    cp_t, fb_t, cap_t = weight_table(end_t, art_t, np.where(art_t, grace_end, np.inf))
    cp_c, fb_c, cap_c = weight_table(end_c, art_c, np.where(art_c, ta, np.inf))

    rows = []
    for arm_val, end, evc, cp in ((1.0, end_t, ev_t, cp_t), (0.0, end_c, ev_c, cp_c)):
        keep = end > 0
        kidx = np.flatnonzero(keep)
        row_idx, seg_no, seg_start, seg_stop, is_last = _split_rows(end[kidx], boundaries)
        w = cp[prof_idx[kidx][row_idx], np.minimum(seg_no, G)]
        rows.append((
            ids[kidx][row_idx], seg_start, seg_stop,
            evc[kidx][row_idx] & is_last,
            np.column_stack([np.full(len(row_idx), arm_val), X[kidx][row_idx]]),
            w,
        ))
    ev_t_total = int(rows[0][3].sum())
    ev_c_total = int(rows[1][3].sum())
    if ev_t_total == 0 or ev_c_total == 0:
        raise NonIdentifiableError("non-identifiable treatment contrast")
    return AnalysisDataset(
        cluster=np.concatenate([r[0] for r in rows]),
        start=np.concatenate([r[1] for r in rows]),
        stop=np.concatenate([r[2] for r in rows]),
        event=np.concatenate([r[3] for r in rows]),
        covariates=np.concatenate([r[4] for r in rows], axis=0),
        covariate_names=(TREAT,) + names,
        weight=np.concatenate([r[5] for r in rows]),
        meta={
            "method": "cloning", "grace_end": grace_end,
            "weight_model": "per-arm discrete per-interval censoring probability, "
                            "logistic on baseline covariates, frozen after grace end",
            "weight_cap": weight_cap, "weight_resolution": weight_resolution,
            "logistic_fallbacks": fb_t + fb_c, "n_capped": cap_t + cap_c,
            "n_events_treated_arm": ev_t_total, "n_events_control_arm": ev_c_total,
        },
    )


def _transform(subjects, spec: MethodSpec) -> AnalysisDataset:
    if spec.kind == "include_imt":
        return include_imt(subjects)
    if spec.kind == "exclude_imt":
        return exclude_imt(subjects)
    if spec.kind == "ptdm":
        return ptdm(subjects, source=spec.ptdm_source, grace_end=spec.grace_end,
                    rng_seed=spec.rng_seed)
    if spec.kind == "landmark":
        return landmark(subjects, spec.landmark_time)
    if spec.kind == "time_varying":
        return time_varying(subjects)
    if spec.kind == "sequential":
        return sequential_trials(
            subjects, spec.trial_count, spec.window_width,
            adherence_mode=spec.adherence_mode,
            weight_cap=spec.weight_cap if spec.weight_cap is not None else 20.0,
            weight_resolution=spec.weight_resolution)
    return clone_censor_weight(
        subjects, spec.grace_end,
        weight_cap=spec.weight_cap if spec.weight_cap is not None else 1e6,
        weight_resolution=spec.weight_resolution or 1.0)


def analyze(subjects, spec: MethodSpec,
            options: CoxOptions | None = None) -> FitResult:
    """Transform subjects per ``spec`` and fit; attaches method metadata.

    Sequential and cloning fits get cluster-robust variance (multiple
    rows per source subject); strata and weights ride on the dataset.
    """
    ds = _transform(subjects, spec)
    options = options or CoxOptions()
    if spec.kind in ("sequential", "cloning") and not options.robust_cluster:
        options = replace(options, robust_cluster=True)
    fit = fit_cox(ds, options)
    fit.meta.update(ds.meta)
    return fit
