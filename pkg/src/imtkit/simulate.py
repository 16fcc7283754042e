"""Synthetic cohorts via permutation matching.

Outcome pairs and covariate profiles are drawn independently, then
matched: outcomes are visited in increasing observed-time order
(failure or censoring, whichever ends follow-up), and each event picks
a not-yet-matched profile with probability proportional to
``exp(b_cov * L0 + b_treat * A(t))`` where ``A(t)`` indicates the
profile would already be on treatment at the failure time; each
censoring picks uniformly.  Consuming the pool in observed-time order
makes the pool at any event time coincide with the risk set a hazard
model sees, which is what keeps the treatment coefficient unbiased
(visiting censored outcomes at their raw failure times instead leaves
phantom members in the pool and attenuates the recovered effect).

Everything is recorded at visit granularity.  Exits are observed at
the grid boundary at or past the raw exit time.  Treatment initiation
is observed as a month: a subject starting during month m is on
treatment for the whole of that month, so the recorded initiation time
is the month start m - 1 and "on treatment at t" means ``treat_init <
t`` (strict) at the recorded month-end exit times t.

Profiles fall into four buckets, (L0, on-treatment-yet), inside which
selection is uniform; the production sampler keeps a Fenwick tree per
bucket (O(n log n) overall) and :func:`_match_naive` re-derives the
buckets from scratch each step as a test oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import Subject, TimeGrid
from .errors import ParameterError

#: Distribution spellings accepted for survival times.
SURVIVAL_DISTS = ("exponential", "gamma", "weibull")


@dataclass(frozen=True)
class ScenarioSpec:
    """Generation settings for one scenario.

    ``survival_dist`` is ``("exponential", rate)``, ``("gamma", scale,
    shape)``, or ``("weibull", scale, shape)``.  Censoring times are
    uniform on ``censor_range``; the treatment initiation month is a
    uniform whole month in ``treat_range`` (inclusive); a
    ``never_treated_fraction`` of subjects gets no initiation time.
    """

    id: int
    survival_dist: tuple
    censor_range: tuple[float, float] = (1.0, 60.0)
    treat_range: tuple[float, float] = (1.0, 30.0)
    never_treated_fraction: float = 0.5
    n: int = 5000
    grid: TimeGrid = field(default_factory=lambda: TimeGrid.regular(30))
    beta_covariate: float = -0.7
    beta_treatment: float = 0.5
    covariate_success_prob: float = 0.3

    def __post_init__(self) -> None:
        if self.n < 2:
            raise ParameterError("n must be at least 2")
        if not 0.0 <= self.never_treated_fraction <= 1.0:
            raise ParameterError("never_treated_fraction must be in [0, 1]")
        if not 0.0 <= self.covariate_success_prob <= 1.0:
            raise ParameterError("covariate_success_prob must be in [0, 1]")
        kind = self.survival_dist[0]
        if kind not in SURVIVAL_DISTS:
            raise ParameterError(f"unknown survival distribution {kind!r}")
        if any(p <= 0 for p in self.survival_dist[1:]):
            raise ParameterError("survival distribution parameters must be positive")
        for lo, hi in (self.censor_range, self.treat_range):
            if not 0 <= lo < hi:
                raise ParameterError("uniform ranges need 0 <= lo < hi")
        lo, hi = self.treat_range
        if not (float(lo).is_integer() and float(hi).is_integer() and lo >= 1):
            raise ParameterError("treat_range must be whole months with lo >= 1")


def standard_scenarios() -> dict[int, ScenarioSpec]:
    """The six built-in scenarios (n = 5000, 30 monthly intervals)."""
    exp01 = ("exponential", 0.01)
    return {
        1: ScenarioSpec(1, exp01, never_treated_fraction=0.25),
        2: ScenarioSpec(2, exp01, never_treated_fraction=0.50),
        3: ScenarioSpec(3, exp01, never_treated_fraction=0.75),
        4: ScenarioSpec(4, ("exponential", 0.1)),
        5: ScenarioSpec(5, ("gamma", 100.0, 0.4)),
        6: ScenarioSpec(6, ("weibull", 100.0, 2.0)),
    }


def _draw_survival(dist: tuple, n: int, rng: np.random.Generator) -> np.ndarray:
    kind = dist[0]
    if kind == "exponential":
        return rng.exponential(1.0 / dist[1], size=n)
    if kind == "gamma":
        scale, shape = dist[1], dist[2]
        return rng.gamma(shape, scale, size=n)
    scale, shape = dist[1], dist[2]
    return scale * rng.weibull(shape, size=n)


def gen_outcomes(spec: ScenarioSpec, rng: np.random.Generator):
    """Draw (failure, censoring) pairs; return them sorted by failure time.

    Returns arrays ``(t_fail, event, followup)``.  When both times land
    beyond the grid end the censoring time is reset to the grid end
    (administrative censoring), after which ``event = t_fail <= t_cens``.
    Follow-up is recorded on the grid: exits are observed at scheduled
    visits, so ``followup`` is the first boundary at or past
    ``min(t_fail, t_cens)`` while ``t_fail`` keeps its raw value.
    """
    tf = _draw_survival(spec.survival_dist, spec.n, rng)
    tc = rng.uniform(*spec.censor_range, size=spec.n)
    end = spec.grid.end
    tc = np.where(np.minimum(tf, tc) > end, end, tc)
    event = tf <= tc
    bounds = np.asarray(spec.grid.boundaries)
    followup = bounds[np.searchsorted(bounds, np.minimum(tf, tc), side="left")]
    order = np.argsort(tf, kind="stable")
    return tf[order], event[order], followup[order]


def gen_profiles(spec: ScenarioSpec, rng: np.random.Generator):
    """Draw covariate profiles ``(L0, treat_init)``; never = +inf.

    The initiation month is uniform over ``{lo, ..., hi}`` from
    ``treat_range``; a subject starting during month m is treated from
    that month's start, so the recorded time is ``m - 1``.
    """
    l0 = (rng.random(spec.n) < spec.covariate_success_prob).astype(np.int8)
    lo, hi = spec.treat_range
    month = rng.integers(int(lo), int(hi) + 1, size=spec.n)
    ta = (month - 1).astype(float)
    never = rng.random(spec.n) < spec.never_treated_fraction
    ta[never] = np.inf
    return l0, ta


class _Fenwick:
    """Membership counts over profile slots with k-th-member selection."""

    def __init__(self, n: int) -> None:
        self.n = n
        self.tree = [0] * (n + 1)
        self.total = 0

    def add(self, i: int, delta: int) -> None:
        self.total += delta
        i += 1
        while i <= self.n:
            self.tree[i] += delta
            i += i & (-i)

    def select(self, k: int) -> int:
        """Slot of the k-th member (0-based) in slot order."""
        pos = 0
        mask = 1 << (self.n.bit_length())
        while mask:
            nxt = pos + mask
            if nxt <= self.n and self.tree[nxt] <= k:
                pos = nxt
                k -= self.tree[nxt]
            mask >>= 1
        return pos


def _pick(counts, weights, u: float):
    """Inverse-CDF over buckets: bucket b spans count*weight mass;
    returns (bucket, member rank).  Shared by both samplers so they are
    bit-for-bit comparable."""
    masses = [c * w for c, w in zip(counts, weights)]
    r = u * math.fsum(masses)
    last = -1
    for b, (c, m) in enumerate(zip(counts, masses)):
        if c == 0:
            continue
        if r < m:
            return b, min(int(r / weights[b]), c - 1)
        r -= m
        last = b
    return last, counts[last] - 1


def permute_match(outcomes, profiles, beta_covariate: float,
                  beta_treatment: float, grid: TimeGrid,
                  rng: np.random.Generator) -> list[Subject]:
    """Match sorted outcomes to profiles; emit one Subject per outcome.

    Events sample the unmatched pool proportionally to
    ``exp(b_cov * L0 + b_treat * 1[treat_init < t])`` at the recorded
    exit time t; censorings sample uniformly.  Outcomes are consumed in
    increasing observed-time order, so the pool always equals the
    at-risk set of the implied cohort, and the strict comparison makes
    "treated at the month-end t" mean "initiated during month t or
    earlier" for month-start initiation times.
    """
    t_fail, event, followup = outcomes
    l0, ta = profiles
    n = len(t_fail)
    if len(l0) != n:
        raise ParameterError("outcomes and profiles must have equal length")
    if np.any(np.diff(t_fail) < 0):
        raise ParameterError("outcomes must be sorted by failure time")
    order = np.argsort(followup, kind="stable")
    t_fail, event, followup = t_fail[order], event[order], followup[order]

    # bucket order: (L0=0, A=0), (L0=0, A=1), (L0=1, A=0), (L0=1, A=1)
    w_event = [math.exp(beta_covariate * (b >> 1) + beta_treatment * (b & 1))
               for b in range(4)]
    w_cens = [1.0, 1.0, 1.0, 1.0]
    bits = [_Fenwick(n) for _ in range(4)]
    for i in range(n):
        bits[2 * int(l0[i])].add(i, 1)
    # migration order: profiles by initiation time
    mig = np.argsort(ta, kind="stable")
    finite = int(np.isfinite(ta).sum())
    matched = np.zeros(n, dtype=bool)
    cursor = 0

    subjects: list[Subject] = []
    us = rng.random(n)
    for step in range(n):
        t = followup[step]
        while cursor < finite and ta[mig[cursor]] < t:
            j = int(mig[cursor])
            if not matched[j]:
                b = 2 * int(l0[j])
                bits[b].add(j, -1)
                bits[b + 1].add(j, 1)
            cursor += 1
        counts = [b.total for b in bits]
        w = w_event if event[step] else w_cens
        b, k = _pick(counts, w, us[step])
        j = bits[b].select(k)
        bits[b].add(j, -1)
        matched[j] = True
        t_init = float(ta[j]) if np.isfinite(ta[j]) else None
        subjects.append(Subject(
            id=step, followup_end=float(followup[step]), event=bool(event[step]),
            treat_init=t_init, baseline_covariates={"L0": float(l0[j])}))
    return subjects


def _match_naive(outcomes, profiles, beta_covariate: float,
                 beta_treatment: float, grid: TimeGrid,
                 rng: np.random.Generator) -> list[Subject]:
    """Quadratic-time reference sampler: re-derives buckets each step."""
    t_fail, event, followup = outcomes
    order = np.argsort(followup, kind="stable")
    t_fail, event, followup = t_fail[order], event[order], followup[order]
    l0, ta = profiles
    n = len(t_fail)
    w_event = [math.exp(beta_covariate * (b >> 1) + beta_treatment * (b & 1))
               for b in range(4)]
    alive = np.ones(n, dtype=bool)
    subjects: list[Subject] = []
    us = rng.random(n)
    for step in range(n):
        t = followup[step]
        bucket = 2 * l0.astype(int) + (ta < t)
        members = [np.flatnonzero(alive & (bucket == b)) for b in range(4)]
        counts = [len(m) for m in members]
        w = w_event if event[step] else [1.0] * 4
        b, k = _pick(counts, w, us[step])
        j = int(members[b][k])
        alive[j] = False
        t_init = float(ta[j]) if np.isfinite(ta[j]) else None
        subjects.append(Subject(
            id=step, followup_end=float(followup[step]), event=bool(event[step]),
            treat_init=t_init, baseline_covariates={"L0": float(l0[j])}))
    return subjects


def replicate_rng(master_seed: int, scenario_id: int,
                  replicate: int) -> np.random.Generator:
    """Independent, order-free stream for one (scenario, replicate)."""
    return np.random.default_rng(
        np.random.SeedSequence([master_seed, scenario_id, replicate]))


def generate_cohort(spec: ScenarioSpec, master_seed: int,
                    replicate: int = 0) -> list[Subject]:
    """One full synthetic cohort, deterministic in (spec, seed, replicate)."""
    rng = replicate_rng(master_seed, spec.id, replicate)
    outcomes = gen_outcomes(spec, rng)
    profiles = gen_profiles(spec, rng)
    return permute_match(outcomes, profiles, spec.beta_covariate,
                         spec.beta_treatment, spec.grid, rng)
