"""CSV ingestion and artifact emission.

A :class:`ColumnMapping` names the source columns for the semantic
subject fields (id, follow-up end, event flag, initiation/wait time,
baseline covariates) together with the value codings; :func:`load_csv`
turns a mapped file into Subjects plus a validation report.  Writers
emit cohort CSVs (round-trippable at full precision), survival-curve
CSVs, and deterministic SVG 1.1 step plots.

The Stanford heart-transplant study file published by OpenIntro is the
shipped real-data example; :data:`STANFORD_MAPPING` documents its
columns and :func:`load_stanford` applies the standard half-day
adjustments that make the file analyzable in counting-process form.
"""

from __future__ import annotations

import csv
import math
import urllib.request
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .core import Subject, SurvivalCurve, Violation, validate
from .errors import InputError

#: Public location of the Stanford heart transplant CSV.
STANFORD_URL = "https://www.openintro.org/data/csv/heart_transplant.csv"


@dataclass(frozen=True)
class ColumnMapping:
    """How to read one CSV layout into Subjects.

    ``covariates`` maps output covariate names to source columns;
    ``covariate_codings`` optionally maps a covariate name to a
    value -> number table for categorical columns.  ``treat_init`` names
    the column holding the initiation (wait) time on the study clock; an
    empty cell means never treated.  ``treated_flag``/``treated_true``
    optionally name a redundant group column cross-checked against the
    wait column.  ``event_true``/``event_false`` enumerate the codings
    of the event column.
    """

    id: str
    followup_end: str
    event: str
    event_true: frozenset = frozenset({"1", "true", "yes", "dead"})
    event_false: frozenset = frozenset({"0", "false", "no", "alive"})
    treat_init: str | None = None
    treated_flag: str | None = None
    treated_true: str = "treatment"
    covariates: Mapping[str, str] = field(default_factory=dict)
    covariate_codings: Mapping[str, Mapping[str, float]] = field(default_factory=dict)
    time_unit: str = "abstract"

    def __post_init__(self) -> None:
        if self.time_unit not in ("days", "months", "abstract"):
            raise InputError(f"unknown time_unit {self.time_unit!r}")
        used = [self.id, self.followup_end, self.event]
        if self.treat_init is not None:
            used.append(self.treat_init)
        if self.treated_flag is not None:
            used.append(self.treated_flag)
        used.extend(self.covariates.values())
        dupes = {c for c in used if used.count(c) > 1}
        if dupes:
            raise InputError(f"columns mapped twice: {sorted(dupes)}")
        if self.event_true & self.event_false:
            raise InputError("event_true and event_false overlap")
        unknown = set(self.covariate_codings) - set(self.covariates)
        if unknown:
            raise InputError(f"codings for unmapped covariates: {sorted(unknown)}")

    def required_columns(self) -> list[str]:
        cols = [self.id, self.followup_end, self.event]
        if self.treat_init is not None:
            cols.append(self.treat_init)
        if self.treated_flag is not None:
            cols.append(self.treated_flag)
        cols.extend(self.covariates.values())
        return cols


#: The OpenIntro heart transplant file: 103 candidates accepted to the
#: program, 69 transplanted.  Time zero is programme acceptance, times
#: are days; ``wait`` is days to transplant; deselected candidates are
#: folded into censoring by the source file.
STANFORD_MAPPING = ColumnMapping(
    id="id",
    followup_end="survtime",
    event="survived",
    event_true=frozenset({"dead"}),
    event_false=frozenset({"alive"}),
    treat_init="wait",
    treated_flag="transplant",
    treated_true="treatment",
    covariates={"age": "age", "prior_surgery": "prior"},
    covariate_codings={"prior_surgery": {"yes": 1.0, "no": 0.0}},
    time_unit="days",
)


@dataclass(frozen=True)
class LoadResult:
    """Subjects plus the attached validation report."""

    subjects: list
    violations: list

    def __iter__(self):
        return iter(self.subjects)

    def __len__(self) -> int:
        return len(self.subjects)


def _missing(cell: str | None) -> bool:
    return cell is None or cell.strip() in ("", "NA", "NaN", "nan", ".")


def _parse_time(cell: str, column: str, row_id: str) -> float:
    try:
        value = float(cell)
    except ValueError:
        raise InputError(
            f"row {row_id!r}: unparseable time {cell!r} in column {column!r}"
        ) from None
    if not math.isfinite(value):
        raise InputError(f"row {row_id!r}: non-finite time in column {column!r}")
    return value


def _read_rows(path, mapping: ColumnMapping) -> list[dict]:
    """Parse the file into semantic dicts, one per row."""
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames is None:
            raise InputError(f"{path}: no header row")
        header = [h.strip() for h in reader.fieldnames]
        missing_cols = [c for c in mapping.required_columns() if c not in header]
        if missing_cols:
            raise InputError(f"{path}: missing mapped columns {missing_cols}")
        rows = []
        for raw in reader:
            rec = {(k.strip() if k else k): v for k, v in raw.items()}
            row_id = (rec.get(mapping.id) or "").strip()
            if _missing(row_id):
                raise InputError(f"{path}: row {reader.line_num} has no id")
            ev_cell = (rec.get(mapping.event) or "").strip().lower()
            if ev_cell in mapping.event_true:
                event = True
            elif ev_cell in mapping.event_false:
                event = False
            else:
                raise InputError(
                    f"row {row_id!r}: event value {ev_cell!r} matches neither coding"
                )
            out = {
                "id": row_id,
                "followup_end": _parse_time(rec[mapping.followup_end],
                                            mapping.followup_end, row_id),
                "event": event,
                "treat_init": None,
            }
            if mapping.treat_init is not None and not _missing(rec.get(mapping.treat_init)):
                out["treat_init"] = _parse_time(rec[mapping.treat_init],
                                                mapping.treat_init, row_id)
            if mapping.treated_flag is not None:
                flagged = (rec.get(mapping.treated_flag) or "").strip().lower() \
                    == mapping.treated_true.lower()
                if flagged and out["treat_init"] is None:
                    raise InputError(
                        f"row {row_id!r}: marked treated but column "
                        f"{mapping.treat_init!r} is missing a wait time"
                    )
                if not flagged and out["treat_init"] is not None:
                    raise InputError(
                        f"row {row_id!r}: marked untreated but has a wait time"
                    )
            covs = {}
            for name, col in mapping.covariates.items():
                cell = (rec.get(col) or "").strip()
                coding = mapping.covariate_codings.get(name)
                if coding is not None:
                    key = cell.lower()
                    if key not in coding:
                        raise InputError(
                            f"row {row_id!r}: covariate {name!r} value {cell!r} "
                            f"not in coding {sorted(coding)}"
                        )
                    covs[name] = float(coding[key])
                else:
                    try:
                        covs[name] = float(cell)
                    except ValueError:
                        raise InputError(
                            f"row {row_id!r}: unparseable covariate {name!r} "
                            f"value {cell!r}"
                        ) from None
            out["covariates"] = covs
            rows.append(out)
    if not rows:
        raise InputError(f"{path}: no data rows")
    return rows


def _build(rows: list[dict]) -> LoadResult:
    subjects = [
        Subject(
            id=_int_if_possible(r["id"]),
            followup_end=r["followup_end"],
            event=r["event"],
            treat_init=r["treat_init"],
            baseline_covariates=r["covariates"],
        )
        for r in rows
    ]
    return LoadResult(subjects=subjects, violations=validate(subjects))


def _int_if_possible(cell: str):
    try:
        return int(cell)
    except ValueError:
        return cell


def load_csv(path, mapping: ColumnMapping) -> LoadResult:
    """Read one mapped CSV into Subjects plus a validation report."""
    return _build(_read_rows(path, mapping))


def load_stanford(path) -> LoadResult:
    """Read the OpenIntro heart transplant file with standard preparation.

    Two half-day adjustments make every row usable under the strict
    ``(start, stop]`` row model: a subject who died on the acceptance
    day (recorded follow-up 0) is given half a day of follow-up, and a
    transplant recorded on the final day (wait == follow-up end, which
    would read as "never reached treatment") is moved back half a day so
    the treated interval is non-empty.
    """
    rows = _read_rows(path, STANFORD_MAPPING)
    for r in rows:
        if r["followup_end"] == 0.0:
            r["followup_end"] = 0.5
        if r["treat_init"] is not None and r["treat_init"] >= r["followup_end"]:
            r["treat_init"] = r["followup_end"] - 0.5
    return _build(rows)


def fetch_stanford(dest, url: str = STANFORD_URL, timeout: float = 30.0) -> None:
    """Download the public heart transplant CSV to ``dest``."""
    with urllib.request.urlopen(url, timeout=timeout) as resp:
        payload = resp.read()
    with open(dest, "wb") as handle:
        handle.write(payload)


# ---------------------------------------------------------------------------
# Writers


def write_subjects_csv(subjects: Sequence[Subject], path) -> None:
    """Emit the cohort schema ``id,followup_end,event,treat_init,<covs>``.

    Times use ``repr`` so a round-trip through :func:`load_csv` (with
    :func:`subject_mapping`) reproduces the in-memory cohort exactly;
    never-treated rows leave ``treat_init`` empty.
    """
    cov_names = sorted({k for s in subjects for k in s.baseline_covariates})
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["id", "followup_end", "event", "treat_init", *cov_names])
        for s in subjects:
            writer.writerow([
                s.id,
                repr(float(s.followup_end)),
                "1" if s.event else "0",
                "" if s.treat_init is None else repr(float(s.treat_init)),
                *(repr(float(s.baseline_covariates.get(k, 0.0))) for k in cov_names),
            ])


def subject_mapping(covariate_names: Sequence[str]) -> ColumnMapping:
    """Mapping that re-ingests :func:`write_subjects_csv` output."""
    return ColumnMapping(
        id="id",
        followup_end="followup_end",
        event="event",
        event_true=frozenset({"1"}),
        event_false=frozenset({"0"}),
        treat_init="treat_init",
        covariates={name: name for name in covariate_names},
    )


def read_subjects_csv(path) -> LoadResult:
    """Re-ingest a cohort written by :func:`write_subjects_csv`."""
    with open(path, newline="", encoding="utf-8") as handle:
        header = next(csv.reader(handle), None)
    if not header:
        raise InputError(f"{path}: no header row")
    fixed = ["id", "followup_end", "event", "treat_init"]
    if header[: len(fixed)] != fixed:
        raise InputError(f"{path}: not a cohort file (header {header[:4]})")
    return load_csv(path, subject_mapping(header[len(fixed):]))


def write_curves_csv(curves: Sequence[SurvivalCurve], path) -> None:
    """Emit step functions as ``group,time,survival,at_risk,events`` rows."""
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["group", "time", "survival", "at_risk", "events"])
        for curve in curves:
            for t, s, r, d in zip(curve.times, curve.survival,
                                  curve.at_risk, curve.events):
                writer.writerow([curve.label, repr(float(t)), repr(float(s)),
                                 int(r), int(d)])


# ---------------------------------------------------------------------------
# SVG step plots (hand-rolled: deterministic output, no plotting deps)

_PALETTE = ("#1f6fb2", "#d1495b", "#3e885b", "#8a5fb0", "#c88a2e", "#4a4a4a")


def _fmt(x: float) -> str:
    return f"{x:.2f}".rstrip("0").rstrip(".")


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10.0 ** math.floor(math.log10(raw))
    step = min((m for m in (1, 2, 5, 10) if m * mag >= raw), default=10) * mag
    first = math.ceil(lo / step) * step
    ticks = []
    t = first
    while t <= hi + 1e-9:
        ticks.append(round(t, 10))
        t += step
    return ticks


def svg_step_plot(curves: Sequence[SurvivalCurve], path, *,
                  title: str = "Survival", width: int = 640,
                  height: int = 420) -> None:
    """Write the curves as an SVG 1.1 step plot (same steps as the CSV)."""
    if not curves:
        raise InputError("no curves to plot")
    left, right, top, bottom = 64, 16, 34, 46
    pw, ph = width - left - right, height - top - bottom
    t_max = max(float(c.times[-1]) for c in curves if len(c.times)) or 1.0

    def sx(t: float) -> float:
        return left + pw * t / t_max

    def sy(s: float) -> float:
        return top + ph * (1.0 - s)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
        f'width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{left + pw / 2:.1f}" y="20" text-anchor="middle" '
        f'font-family="sans-serif" font-size="14">{title}</text>',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" '
        f'fill="none" stroke="#333333" stroke-width="1"/>',
    ]
    for t in _ticks(0.0, t_max):
        x = sx(t)
        parts.append(f'<line x1="{x:.1f}" y1="{top + ph}" x2="{x:.1f}" '
                     f'y2="{top + ph + 4}" stroke="#333333"/>')
        parts.append(f'<text x="{x:.1f}" y="{top + ph + 18}" text-anchor="middle" '
                     f'font-family="sans-serif" font-size="11">{_fmt(t)}</text>')
    for s in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = sy(s)
        parts.append(f'<line x1="{left - 4}" y1="{y:.1f}" x2="{left}" '
                     f'y2="{y:.1f}" stroke="#333333"/>')
        parts.append(f'<text x="{left - 8}" y="{y + 4:.1f}" text-anchor="end" '
                     f'font-family="sans-serif" font-size="11">{_fmt(s)}</text>')
    parts.append(f'<text x="{left + pw / 2:.1f}" y="{height - 8}" '
                 f'text-anchor="middle" font-family="sans-serif" '
                 f'font-size="12">time</text>')
    parts.append(f'<text x="16" y="{top + ph / 2:.1f}" text-anchor="middle" '
                 f'font-family="sans-serif" font-size="12" '
                 f'transform="rotate(-90 16 {top + ph / 2:.1f})">survival</text>')
    for i, curve in enumerate(curves):
        color = _PALETTE[i % len(_PALETTE)]
        pts = [(0.0, 1.0)]
        for t, s in zip(curve.times, curve.survival):
            prev_s = pts[-1][1]
            pts.append((float(t), prev_s))
            pts.append((float(t), float(s)))
        pts.append((t_max, pts[-1][1]))
        coords = " ".join(f"{sx(t):.2f},{sy(s):.2f}" for t, s in pts)
        parts.append(f'<polyline points="{coords}" fill="none" '
                     f'stroke="{color}" stroke-width="1.6"/>')
        ly = top + 16 + 16 * i
        parts.append(f'<line x1="{left + pw - 120}" y1="{ly}" '
                     f'x2="{left + pw - 96}" y2="{ly}" stroke="{color}" '
                     f'stroke-width="1.6"/>')
        parts.append(f'<text x="{left + pw - 90}" y="{ly + 4}" '
                     f'font-family="sans-serif" font-size="11">'
                     f'{curve.label}</text>')
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8") as handle:
        handle.write("\n".join(parts) + "\n")
