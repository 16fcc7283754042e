"""Core data model: subjects, counting-process rows, product-limit curves.

Time is continuous and starts at 0 for every subject (study entry).  All
interval rows are half-open on the left, ``(start, stop]``: a row is at
risk at time t iff ``start < t <= stop``, so late entry (left truncation)
is expressed by ``start > 0`` and ties between an event and an entry at
the same instant never put the entering row at risk.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import EmptyRiskSetError, ParameterError

#: Name of the treatment-indicator column added by dataset builders.
TREAT = "treated"


@dataclass(frozen=True)
class TimeGrid:
    """Interval grid ``t_1 = 0 < t_2 < ... < t_{K+1}``.

    Interval k (1-based) is ``(t_k, t_{k+1}]``.  The grid is bookkeeping
    for interval-based methods; subject times themselves stay continuous.
    """

    boundaries: tuple[float, ...]
    unit: str = "month"

    def __post_init__(self) -> None:
        b = self.boundaries
        if len(b) < 2:
            raise ParameterError("time grid needs at least two boundaries")
        if b[0] != 0:
            raise ParameterError("time grid must start at 0")
        if any(b[i] >= b[i + 1] for i in range(len(b) - 1)):
            raise ParameterError("time grid boundaries must be strictly increasing")

    @classmethod
    def regular(cls, n_intervals: int, width: float = 1.0, unit: str = "month") -> "TimeGrid":
        if n_intervals < 1 or width <= 0:
            raise ParameterError("need n_intervals >= 1 and width > 0")
        return cls(tuple(width * k for k in range(n_intervals + 1)), unit=unit)

    @property
    def n_intervals(self) -> int:
        return len(self.boundaries) - 1

    @property
    def end(self) -> float:
        return self.boundaries[-1]


@dataclass(frozen=True)
class Subject:
    """One study subject on the study clock.

    ``treat_init`` is the treatment initiation time if one was recorded;
    a value at or beyond ``followup_end`` means initiation was never
    observed during follow-up and every method must treat the subject as
    never treated.
    """

    id: int | str
    followup_end: float
    event: bool
    treat_init: float | None = None
    baseline_covariates: Mapping[str, float] = field(default_factory=dict)

    @property
    def ever_treated(self) -> bool:
        return self.treat_init is not None and self.treat_init < self.followup_end


@dataclass(frozen=True)
class Violation:
    subject_id: int | str
    message: str


def validate(subjects: Sequence[Subject]) -> list[Violation]:
    """Check subject-level invariants; returns a report, never raises."""
    report: list[Violation] = []
    seen: set = set()
    for s in subjects:
        if s.id in seen:
            report.append(Violation(s.id, "duplicate id"))
        seen.add(s.id)
        if not np.isfinite(s.followup_end) or s.followup_end <= 0:
            report.append(Violation(s.id, "non-positive follow-up"))
        if s.treat_init is not None and (not np.isfinite(s.treat_init) or s.treat_init < 0):
            report.append(Violation(s.id, "negative treatment time"))
        for name, value in s.baseline_covariates.items():
            try:
                ok = np.isfinite(float(value))
            except (TypeError, ValueError):
                ok = False
            if not ok:
                report.append(Violation(s.id, f"non-finite covariate {name!r}"))
    return report


@dataclass(frozen=True)
class IntervalRow:
    """One counting-process row, at risk on ``(start, stop]``."""

    cluster_id: int | str
    start: float
    stop: float
    event: bool
    covariates: Mapping[str, float]
    weight: float = 1.0
    stratum: int | str | None = None


class AnalysisDataset:
    """Columnar collection of :class:`IntervalRow`.

    Backed by numpy arrays so method transforms and the estimation engine
    can stay vectorised; ``rows()`` yields `IntervalRow` views for callers
    that want the record form.  ``meta`` carries method provenance
    (method name, parameters, weight-model notes, warnings).
    """

    def __init__(
        self,
        cluster: np.ndarray,
        start: np.ndarray,
        stop: np.ndarray,
        event: np.ndarray,
        covariates: np.ndarray,
        covariate_names: Sequence[str],
        weight: np.ndarray | None = None,
        stratum: np.ndarray | None = None,
        meta: dict | None = None,
    ) -> None:
        n = len(start)
        self.cluster = np.asarray(cluster)
        self.start = np.asarray(start, dtype=float)
        self.stop = np.asarray(stop, dtype=float)
        self.event = np.asarray(event, dtype=bool)
        self.covariate_names = tuple(covariate_names)
        cov = np.asarray(covariates, dtype=float)
        self.covariates = cov.reshape(-1, 1) if cov.ndim == 1 else cov
        self.weight = (
            np.ones(n) if weight is None else np.asarray(weight, dtype=float)
        )
        self.stratum = None if stratum is None else np.asarray(stratum)
        self.meta = dict(meta or {})
        shapes_ok = (
            len(self.cluster) == n
            and len(self.stop) == n
            and len(self.event) == n
            and len(self.weight) == n
            and self.covariates.shape == (n, len(self.covariate_names))
            and (self.stratum is None or len(self.stratum) == n)
        )
        if not shapes_ok:
            raise ParameterError("dataset column lengths disagree")
        if n and not np.all(self.start < self.stop):
            raise ParameterError("every row needs start < stop")
        if n and not np.all(self.weight > 0):
            raise ParameterError("every row needs weight > 0")

    # -- construction -------------------------------------------------

    @classmethod
    def from_rows(cls, rows: Iterable[IntervalRow], meta: dict | None = None) -> "AnalysisDataset":
        rows = list(rows)
        if not rows:
            return cls.empty((), meta=meta)
        names = tuple(rows[0].covariates.keys())
        for r in rows:
            if tuple(r.covariates.keys()) != names:
                raise ParameterError("all rows must share one covariate name set")
        X = np.array([[float(r.covariates[k]) for k in names] for r in rows])
        strata = [r.stratum for r in rows]
        return cls(
            cluster=np.array([r.cluster_id for r in rows], dtype=object),
            start=np.array([r.start for r in rows]),
            stop=np.array([r.stop for r in rows]),
            event=np.array([r.event for r in rows]),
            covariates=X,
            covariate_names=names,
            weight=np.array([r.weight for r in rows]),
            stratum=None if all(s is None for s in strata) else np.array(strata, dtype=object),
            meta=meta,
        )

    @classmethod
    def empty(cls, covariate_names: Sequence[str], meta: dict | None = None) -> "AnalysisDataset":
        z = np.zeros(0)
        return cls(z, z, z + 1, z, np.zeros((0, len(covariate_names))),
                   covariate_names, z, None, meta)

    # -- views ---------------------------------------------------------

    @property
    def n_rows(self) -> int:
        return len(self.start)

    @property
    def n_events(self) -> int:
        return int(self.event.sum())

    def column(self, name: str) -> np.ndarray:
        return self.covariates[:, self.covariate_names.index(name)]

    def person_time(self) -> float:
        return float(np.sum(self.stop - self.start))

    def rows(self) -> Iterator[IntervalRow]:
        for i in range(self.n_rows):
            yield IntervalRow(
                cluster_id=self.cluster[i],
                start=float(self.start[i]),
                stop=float(self.stop[i]),
                event=bool(self.event[i]),
                covariates={k: float(v) for k, v in zip(self.covariate_names, self.covariates[i])},
                weight=float(self.weight[i]),
                stratum=None if self.stratum is None else self.stratum[i],
            )

    def subset(self, mask: np.ndarray, meta: dict | None = None) -> "AnalysisDataset":
        return AnalysisDataset(
            self.cluster[mask], self.start[mask], self.stop[mask], self.event[mask],
            self.covariates[mask], self.covariate_names, self.weight[mask],
            None if self.stratum is None else self.stratum[mask],
            meta if meta is not None else self.meta,
        )


def to_counting_process(
    subjects: Sequence[Subject],
    split_at_treatment: bool = True,
    extra_covariates: Sequence[str] | None = None,
) -> AnalysisDataset:
    """Expand subjects into ``(start, stop]`` rows with a treatment column.

    With ``split_at_treatment`` a subject treated strictly inside
    follow-up becomes two rows, ``(0, treat_init]`` untreated and
    ``(treat_init, followup_end]`` treated, the event (if any) on the
    second.  ``treat_init = 0`` yields a single fully treated row;
    ``treat_init >= followup_end`` (or absent) a single untreated row.
    Zero-length fragments are dropped silently.  Without splitting, the
    column is the ever-treated indicator on one row per subject.
    """
    cov_names = tuple(extra_covariates) if extra_covariates is not None else (
        tuple(subjects[0].baseline_covariates.keys()) if subjects else ()
    )
    names = (TREAT,) + cov_names
    cluster: list = []
    start: list[float] = []
    stop: list[float] = []
    event: list[bool] = []
    X: list[list[float]] = []

    def emit(s: Subject, a: float, lo: float, hi: float, ev: bool) -> None:
        if hi <= lo:
            return
        cluster.append(s.id)
        start.append(lo)
        stop.append(hi)
        event.append(ev)
        X.append([a] + [float(s.baseline_covariates[k]) for k in cov_names])

    for s in subjects:
        if not split_at_treatment:
            emit(s, float(s.ever_treated), 0.0, s.followup_end, s.event)
        elif not s.ever_treated:
            emit(s, 0.0, 0.0, s.followup_end, s.event)
        elif s.treat_init <= 0:
            emit(s, 1.0, 0.0, s.followup_end, s.event)
        else:
            emit(s, 0.0, 0.0, s.treat_init, False)
            emit(s, 1.0, s.treat_init, s.followup_end, s.event)

    return AnalysisDataset(
        cluster=np.array(cluster, dtype=object),
        start=np.array(start, dtype=float),
        stop=np.array(stop, dtype=float),
        event=np.array(event, dtype=bool),
        covariates=np.array(X, dtype=float).reshape(len(start), len(names)),
        covariate_names=names,
        meta={"builder": "to_counting_process", "split_at_treatment": split_at_treatment},
    )


@dataclass(frozen=True)
class SurvivalCurve:
    """Product-limit curve for one group; step function, left-continuous."""

    label: str
    times: np.ndarray
    survival: np.ndarray
    at_risk: np.ndarray
    events: np.ndarray

    def survival_at(self, t: float) -> float:
        idx = int(np.searchsorted(self.times, t, side="right")) - 1
        return float(self.survival[max(idx, 0)])


def _km_one_group(start: np.ndarray, stop: np.ndarray, event: np.ndarray,
                  weight: np.ndarray, label: str) -> SurvivalCurve:
    if len(stop) == 0:
        raise EmptyRiskSetError(f"empty risk set for group {label!r}")
    order_stop = np.sort(stop)
    order_start = np.sort(start)
    w_by_stop = weight[np.argsort(stop, kind="stable")]
    w_by_start = weight[np.argsort(start, kind="stable")]
    # suffix sums: total weight with stop >= t, and with start >= t
    suf_stop = np.concatenate([np.cumsum(w_by_stop[::-1])[::-1], [0.0]])
    suf_start = np.concatenate([np.cumsum(w_by_start[::-1])[::-1], [0.0]])

    ev_times = np.unique(stop[event])
    if len(ev_times):
        i_stop = np.searchsorted(order_stop, ev_times, side="left")
        i_start = np.searchsorted(order_start, ev_times, side="left")
        risk_w = suf_stop[i_stop] - suf_start[i_start]
        risk_n = (len(stop) - i_stop) - (len(start) - i_start)
        if np.any(risk_w <= 0):
            raise EmptyRiskSetError(f"empty risk set for group {label!r}")
        # weighted event mass and plain counts per event time
        d_w = np.zeros(len(ev_times))
        d_n = np.zeros(len(ev_times), dtype=int)
        pos = np.searchsorted(ev_times, stop[event])
        np.add.at(d_w, pos, weight[event])
        np.add.at(d_n, pos, 1)
        surv = np.cumprod(1.0 - d_w / risk_w)
    else:
        risk_n = np.zeros(0, dtype=int)
        d_n = np.zeros(0, dtype=int)
        surv = np.zeros(0)

    n0 = int(np.sum((start < np.min(stop)) if len(stop) else 0))
    times = np.concatenate([[0.0], ev_times])
    survival = np.concatenate([[1.0], surv])
    at_risk = np.concatenate([[n0], risk_n]).astype(int)
    events = np.concatenate([[0], d_n]).astype(int)
    return SurvivalCurve(label, times, survival, at_risk, events)


def km_estimate(dataset: AnalysisDataset, group: str | None = None) -> list[SurvivalCurve]:
    """Product-limit estimate with left-truncated risk sets, per group.

    ``group`` names a covariate column whose levels (required constant
    within each cluster) define the curves; ``None`` gives one pooled
    curve.  Risk set at t counts rows with ``start < t <= stop``; row
    weights enter the survival steps, counts stay unweighted.
    """
    if dataset.n_rows == 0:
        raise EmptyRiskSetError("empty risk set")
    if group is None:
        return [_km_one_group(dataset.start, dataset.stop, dataset.event,
                              dataset.weight, "all")]
    g = dataset.column(group)
    # group level must not vary inside a cluster
    order = np.argsort(dataset.cluster.astype(str), kind="stable")
    cl, gv = dataset.cluster[order], g[order]
    same_cluster = cl[1:] == cl[:-1]
    if np.any(same_cluster & (gv[1:] != gv[:-1])):
        raise ParameterError(f"group {group!r} varies within a cluster")
    curves = []
    for level in np.unique(g):
        m = g == level
        curves.append(_km_one_group(dataset.start[m], dataset.stop[m],
                                    dataset.event[m], dataset.weight[m],
                                    f"{group}={level:g}"))
    return curves
