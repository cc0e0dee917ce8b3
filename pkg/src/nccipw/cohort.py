"""Cohort data model, risk sets, and censoring-survival estimation.

A cohort holds, for each subject, the observed follow-up time (minimum of
the event and censoring times), the event indicator, a marker vector, and
optional matching variables.  Everything downstream (sampling, weighting,
model fitting) works off this structure.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "Subject",
    "Cohort",
    "StepSurvival",
    "risk_set",
    "km_censoring_survival",
    "censoring_weight",
    "censoring_weights",
    "load_cohort_csv",
    "write_cohort_csv",
]


@dataclass(frozen=True)
class Subject:
    """One cohort member: observed time, event status, markers, matching vars."""

    id: int
    time: float
    delta: int
    markers: np.ndarray
    match_vars: Optional[np.ndarray] = None


class Cohort:
    """Immutable cohort stored as column arrays.

    Parameters
    ----------
    times : array of positive observed follow-up times.
    deltas : array of 0/1 event indicators (1 = event, 0 = censored).
    markers : (n, p) marker matrix; every entry must be finite.
    match_vars : optional (n, q) matrix of matching variables.
    marker_names, match_names : optional column labels (default z1..zp, m1..mq).
    """

    def __init__(self, times, deltas, markers, match_vars=None,
                 marker_names=None, match_names=None):
        times = np.asarray(times, dtype=float)
        deltas = np.asarray(deltas)
        markers = np.asarray(markers, dtype=float)
        if times.ndim != 1:
            raise ValueError("times must be one-dimensional")
        n = times.shape[0]
        if n < 2:
            raise ValueError("a cohort needs at least two subjects")
        if not np.all(np.isfinite(times)) or np.any(times <= 0):
            raise ValueError("times must be positive and finite")
        if deltas.shape != (n,) or not np.isin(deltas, (0, 1)).all():
            raise ValueError("deltas must be a 0/1 vector matching times")
        if markers.ndim == 1:
            markers = markers.reshape(n, 1)
        if markers.shape[0] != n:
            raise ValueError("markers must have one row per subject")
        if markers.size and not np.all(np.isfinite(markers)):
            raise ValueError("markers must be finite")
        if match_vars is not None:
            match_vars = np.asarray(match_vars, dtype=float)
            if match_vars.ndim == 1:
                match_vars = match_vars.reshape(n, 1)
            if match_vars.shape[0] != n or not np.all(np.isfinite(match_vars)):
                raise ValueError("match_vars must be finite with one row per subject")

        self.times = times
        self.deltas = deltas.astype(np.int8)
        self.markers = markers
        self.match_vars = match_vars
        p = markers.shape[1]
        self.marker_names = list(marker_names) if marker_names else [f"z{k + 1}" for k in range(p)]
        if len(self.marker_names) != p:
            raise ValueError("marker_names length must match marker columns")
        if match_vars is not None:
            q = match_vars.shape[1]
            self.match_names = list(match_names) if match_names else [f"m{k + 1}" for k in range(q)]
        else:
            self.match_names = []
        for arr in (self.times, self.deltas, self.markers):
            arr.setflags(write=False)
        if self.match_vars is not None:
            self.match_vars.setflags(write=False)
        self._km_layout_cache = None

    @property
    def n(self) -> int:
        return self.times.shape[0]

    @property
    def n_markers(self) -> int:
        return self.markers.shape[1]

    def subject(self, i: int) -> Subject:
        mv = None if self.match_vars is None else self.match_vars[i]
        return Subject(i, float(self.times[i]), int(self.deltas[i]), self.markers[i], mv)

    @property
    def subjects(self) -> list[Subject]:
        return [self.subject(i) for i in range(self.n)]

    @classmethod
    def from_subjects(cls, subjects: Sequence[Subject]) -> "Cohort":
        ids = [s.id for s in subjects]
        if sorted(ids) != list(range(len(subjects))):
            raise ValueError("subject ids must be exactly 0..n-1")
        order = np.argsort(ids)
        subs = [subjects[k] for k in order]
        times = [s.time for s in subs]
        deltas = [s.delta for s in subs]
        markers = np.array([np.atleast_1d(s.markers) for s in subs], dtype=float)
        has_mv = subs[0].match_vars is not None
        if any((s.match_vars is not None) != has_mv for s in subs):
            raise ValueError("match_vars must be present for all subjects or none")
        mv = np.array([np.atleast_1d(s.match_vars) for s in subs], dtype=float) if has_mv else None
        return cls(times, deltas, markers, mv)

    def _km_layout(self):
        # unique observed times plus each subject's group index; cached because
        # the perturbation loop re-runs the censoring KM with fresh multipliers
        if self._km_layout_cache is None:
            uniq, inverse = np.unique(self.times, return_inverse=True)
            self._km_layout_cache = (uniq, inverse)
        return self._km_layout_cache


@dataclass(frozen=True)
class StepSurvival:
    """Right-continuous-jump survival curve evaluated left-continuously.

    ``evaluate(t)`` returns the product of all jump factors at jump times
    strictly below ``t``, so the value at 0 is 1 and the curve estimates
    P(C >= t).  If the fitted curve reaches zero, evaluations are clamped to
    the smallest positive fitted value and ``hit_zero`` is set.
    """

    jump_times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        jt = np.asarray(self.jump_times, dtype=float)
        vals = np.asarray(self.values, dtype=float)
        if jt.shape != vals.shape or jt.ndim != 1:
            raise ValueError("jump_times and values must be 1-d arrays of equal length")
        if jt.size:
            if np.any(np.diff(jt) <= 0):
                raise ValueError("jump_times must be strictly increasing")
            if np.any(jt <= 0):
                raise ValueError("jump_times must be positive")
            if np.any(np.diff(vals) > 0) or np.any(vals > 1) or np.any(vals < 0):
                raise ValueError("values must be nonincreasing within [0, 1]")
        jt.setflags(write=False)
        vals.setflags(write=False)
        object.__setattr__(self, "jump_times", jt)
        object.__setattr__(self, "values", vals)
        positive = vals[vals > 0]
        object.__setattr__(self, "_floor", float(positive.min()) if positive.size else 1.0)
        object.__setattr__(self, "hit_zero", bool(vals.size and vals[-1] <= 0.0))

    def evaluate(self, t):
        """Survival value at ``t`` (scalar or array), left-continuous."""
        t_arr = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.jump_times, t_arr, side="left")
        padded = np.concatenate(([1.0], self.values))
        out = padded[idx]
        if self.hit_zero and np.any(out <= 0.0):
            warnings.warn("censoring survival reached zero; clamping to the "
                          "smallest positive fitted value", RuntimeWarning,
                          stacklevel=2)
            out = np.maximum(out, self._floor)
        if np.ndim(t) == 0:
            return float(out)
        return out

    __call__ = evaluate


def risk_set(cohort: Cohort, i: int, match_tol=None) -> np.ndarray:
    """Indices of subjects still at risk at subject ``i``'s observed time.

    The set is {k : T_k >= T_i}, optionally intersected with the subjects
    whose matching variables are within ``match_tol`` of subject i's,
    componentwise.  Subject ``i`` itself is always a member.
    """
    if not 0 <= i < cohort.n:
        raise IndexError(f"subject index {i} out of range")
    mask = cohort.times >= cohort.times[i]
    if match_tol is not None:
        tol = np.asarray(match_tol, dtype=float)
        if cohort.match_vars is None:
            raise ValueError("cohort has no matching variables")
        if tol.shape != (cohort.match_vars.shape[1],):
            raise ValueError("match_tol length must equal the number of matching variables")
        if np.any(tol < 0):
            raise ValueError("match_tol must be nonnegative")
        diff = np.abs(cohort.match_vars - cohort.match_vars[i])
        mask &= np.all(diff <= tol, axis=1)
    return np.flatnonzero(mask)


def km_censoring_survival(cohort: Cohort, multipliers=None) -> StepSurvival:
    """Kaplan-Meier estimate of the censoring survival P(C >= t).

    Censorings (delta = 0) are the "events" here.  At tied times events are
    removed from the risk set before censorings are counted.  ``multipliers``
    scale each subject's contribution to both the at-risk and censoring
    counts; all-ones multipliers reproduce the unweighted estimate exactly.
    """
    n = cohort.n
    if multipliers is None:
        mult = np.ones(n)
    else:
        mult = np.asarray(multipliers, dtype=float)
        if mult.shape != (n,):
            raise ValueError("multipliers must have one entry per subject")
        if not np.all(np.isfinite(mult)) or np.any(mult < 0):
            raise ValueError("multipliers must be finite and nonnegative")
    uniq, inverse = cohort._km_layout()
    k = uniq.shape[0]
    total = np.bincount(inverse, weights=mult, minlength=k)
    ev = cohort.deltas == 1
    d = np.bincount(inverse[ev], weights=mult[ev], minlength=k)
    c = np.bincount(inverse[~ev], weights=mult[~ev], minlength=k)
    at_risk = np.cumsum(total[::-1])[::-1]
    jumps = c > 0
    factors = 1.0 - c[jumps] / (at_risk[jumps] - d[jumps])
    values = np.clip(np.cumprod(factors), 0.0, 1.0)
    return StepSurvival(uniq[jumps], values)


def censoring_weight(subject: Subject, t0: float, G: StepSurvival) -> float:
    """Inverse-censoring weight for one subject at horizon ``t0``.

    Returns delta * 1(T <= t0) / G(T) + 1(T > t0) / G(t0).
    """
    if t0 <= 0:
        raise ValueError("t0 must be positive")
    if subject.time <= t0:
        if subject.delta == 0:
            return 0.0
        g = G.evaluate(subject.time)
        if g <= 0:
            raise ZeroDivisionError("censoring survival is zero at the subject's time")
        return 1.0 / g
    g = G.evaluate(t0)
    if g <= 0:
        raise ZeroDivisionError("censoring survival is zero at t0")
    return 1.0 / g


def censoring_weights(cohort: Cohort, t0: float, G: StepSurvival) -> np.ndarray:
    """Vector of inverse-censoring weights for the whole cohort."""
    if t0 <= 0:
        raise ValueError("t0 must be positive")
    times = cohort.times
    before = times <= t0
    g_t = G.evaluate(times)
    g_t0 = G.evaluate(t0)
    if g_t0 <= 0 or np.any(g_t[before & (cohort.deltas == 1)] <= 0):
        raise ZeroDivisionError("censoring survival is zero where a weight is needed")
    out = np.zeros(cohort.n)
    ev_before = before & (cohort.deltas == 1)
    out[ev_before] = 1.0 / g_t[ev_before]
    out[~before] = 1.0 / g_t0
    return out


def load_cohort_csv(path) -> Cohort:
    """Read a cohort from CSV with header ``id,time,delta,z1..zp[,m1..mq]``."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if header[:3] != ["id", "time", "delta"]:
            raise ValueError(f"{path}: header must start with id,time,delta")
        marker_names = [h for h in header[3:] if h.startswith("z")]
        match_names = [h for h in header[3:] if h.startswith("m")]
        if header[3:] != marker_names + match_names:
            raise ValueError(f"{path}: columns after delta must be z* markers then m* matching variables")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                vals = [float(cell) for cell in row]
            except ValueError:
                raise ValueError(f"{path}: line {lineno}: non-numeric field") from None
            rows.append((lineno, vals))
    if not rows:
        raise ValueError(f"{path}: no data rows")
    n = len(rows)
    ids = np.array([int(v[1][0]) for v in rows])
    if sorted(ids.tolist()) != list(range(n)):
        raise ValueError(f"{path}: ids must be exactly 0..{n - 1}")
    order = np.argsort(ids)
    data = np.array([rows[k][1] for k in order], dtype=float)
    for k in order:
        lineno, vals = rows[k]
        if vals[2] not in (0.0, 1.0):
            raise ValueError(f"{path}: line {lineno}: delta must be 0 or 1")
        if not np.isfinite(vals[1]) or vals[1] <= 0:
            raise ValueError(f"{path}: line {lineno}: time must be positive and finite")
    p = len(marker_names)
    markers = data[:, 3:3 + p]
    match = data[:, 3 + p:] if match_names else None
    return Cohort(data[:, 1], data[:, 2].astype(int), markers, match,
                  marker_names=marker_names, match_names=match_names)


def write_cohort_csv(cohort: Cohort, path) -> None:
    """Write a cohort in the schema accepted by :func:`load_cohort_csv`."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "time", "delta"] + cohort.marker_names + cohort.match_names)
        for i in range(cohort.n):
            row = [i, repr(float(cohort.times[i])), int(cohort.deltas[i])]
            row += [repr(float(v)) for v in cohort.markers[i]]
            if cohort.match_vars is not None:
                row += [repr(float(v)) for v in cohort.match_vars[i]]
            writer.writerow(row)
