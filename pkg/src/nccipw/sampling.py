"""Nested case-control sampling and control-inclusion probabilities.

Cases are a fixed-size simple random sample of the events (a proportion
``pi1`` of them); each case then draws ``m`` controls uniformly without
replacement from its risk set, optionally restricted by matching.  Control
draws are independent across cases, so one subject may serve several cases
and events may themselves be drawn as controls.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .cohort import Cohort, risk_set

__all__ = [
    "NccDesign",
    "NccSample",
    "draw_cases",
    "draw_controls",
    "control_inclusion_prob",
    "sample",
    "write_sample_csv",
    "load_sample_csv",
    "assignments_path_for",
]


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _as_rng(rng) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


@dataclass(frozen=True)
class NccDesign:
    """Sampling design: case fraction, controls per case, matching tolerance."""

    pi1: float
    m: int
    match_tol: Optional[np.ndarray] = None

    def __post_init__(self):
        if not 0 < self.pi1 <= 1:
            raise ValueError("pi1 must lie in (0, 1]")
        if self.m < 1:
            raise ValueError("m must be a positive integer")
        if self.match_tol is not None:
            tol = np.asarray(self.match_tol, dtype=float)
            if tol.ndim != 1 or np.any(tol < 0) or not np.all(np.isfinite(tol)):
                raise ValueError("match_tol must be a nonnegative finite vector")
            tol.setflags(write=False)
            object.__setattr__(self, "match_tol", tol)


@dataclass
class NccSample:
    """Realized NCC draw: indicators, assignments, inclusion probabilities.

    ``control_assignments`` maps each case index to the array of control
    indices it drew (in draw order).  ``v0`` flags subjects drawn as a
    control at least once, ``p0`` holds the control-inclusion probability
    for every subject given the case draw, and ``pi1_realized`` is the
    realized fraction of events selected as cases.
    """

    v1: np.ndarray
    control_assignments: dict[int, np.ndarray]
    v0: np.ndarray
    p0: np.ndarray
    pi1_realized: float
    selected: np.ndarray
    match_tol: Optional[np.ndarray] = None
    _case_structure: Optional[list] = field(default=None, repr=False, compare=False)

    def case_structure(self, cohort: Cohort) -> list:
        """Per-case risk-set layout, cached for the inclusion-probability products."""
        if self._case_structure is None:
            self._case_structure = _case_structure(
                cohort, self.v1, self.control_assignments, self.match_tol)
        return self._case_structure


def draw_cases(cohort: Cohort, design: NccDesign, rng) -> np.ndarray:
    """Select round(pi1 * D) of the D events as cases, uniformly at random."""
    rng = _as_rng(rng)
    events = np.flatnonzero(cohort.deltas == 1)
    if events.size == 0:
        raise ValueError("cohort has no events to sample cases from")
    k = _round_half_up(design.pi1 * events.size)
    v1 = np.zeros(cohort.n, dtype=np.int8)
    if k > 0:
        chosen = rng.choice(events, size=k, replace=False)
        v1[chosen] = 1
    return v1


def draw_controls(cohort: Cohort, v1: np.ndarray, design: NccDesign, rng) -> dict[int, np.ndarray]:
    """Draw controls for every case, independently across cases.

    Each case draws min(m, risk-set size - 1) controls uniformly without
    replacement from its risk set excluding itself.  A case whose risk set
    contains nobody else gets an empty control set.
    """
    rng = _as_rng(rng)
    assignments: dict[int, np.ndarray] = {}
    for i in np.flatnonzero(v1):
        members = risk_set(cohort, i, design.match_tol)
        eligible = members[members != i]
        k = min(design.m, eligible.size)
        if k > 0:
            sel = rng.choice(eligible, size=k, replace=False)
        else:
            sel = np.empty(0, dtype=np.int64)
        assignments[int(i)] = np.asarray(sel, dtype=np.int64)
    return assignments


def _case_structure(cohort, v1, assignments, match_tol):
    """For each case (ascending): (index, risk-set members, risk-set size, controls)."""
    structure = []
    for i in np.flatnonzero(v1):
        i = int(i)
        members = risk_set(cohort, i, match_tol)
        controls = assignments.get(i)
        if controls is None:
            raise ValueError(f"case {i} has no control assignment entry")
        structure.append((i, members, members.size, np.asarray(controls, dtype=np.int64)))
    return structure


def _inclusion_prob_from_counts(structure, counts, n: int) -> np.ndarray:
    """1 - prod_i {1 - count_i / (n_i - 1)} over cases whose risk set holds j.

    ``counts`` gives the per-case numerator (the realized number of selected
    controls, or its perturbed counterpart).  The factor for case i is never
    applied to i itself: a case cannot be its own control, and excluding the
    self-term keeps the formula equal to the exact inclusion probability.
    """
    prod = np.ones(n)
    for (i, members, n_i, _), cnt in zip(structure, counts):
        if cnt == 0:
            continue
        if n_i <= 1:
            raise ValueError(f"case {i} selected controls from a singleton risk set")
        factor = 1.0 - cnt / (n_i - 1)
        prod[members[members != i]] *= factor
    return 1.0 - prod


def control_inclusion_prob(cohort: Cohort, v1: np.ndarray, assignments: dict[int, np.ndarray],
                           match_tol=None) -> np.ndarray:
    """Probability of each subject being drawn as a control, given the cases.

    Uses the realized per-case control count, which equals the design ``m``
    except when a risk set was too small.  Computed for every subject,
    events included; subjects in no selected case's risk set get 0.
    """
    structure = _case_structure(cohort, v1, assignments, match_tol)
    counts = [float(controls.size) for (_, _, _, controls) in structure]
    return _inclusion_prob_from_counts(structure, counts, cohort.n)


def sample(cohort: Cohort, design: NccDesign, rng) -> NccSample:
    """Draw one complete NCC sample; deterministic given the rng seed.

    Randomness is consumed as: case draw first, then control draws per case
    in ascending case order.
    """
    rng = _as_rng(rng)
    v1 = draw_cases(cohort, design, rng)
    assignments = draw_controls(cohort, v1, design, rng)
    v0 = np.zeros(cohort.n, dtype=np.int8)
    for controls in assignments.values():
        v0[controls] = 1
    p0 = control_inclusion_prob(cohort, v1, assignments, design.match_tol)
    deltas = cohort.deltas.astype(float)
    pi1_realized = float(np.sum(deltas * v1) / np.sum(deltas))
    selected = ((v1 == 1) | (v0 == 1)).astype(np.int8)
    for arr in (v1, v0, p0, selected):
        arr.setflags(write=False)
    return NccSample(v1=v1, control_assignments=assignments, v0=v0, p0=p0,
                     pi1_realized=pi1_realized, selected=selected,
                     match_tol=design.match_tol)


def assignments_path_for(sample_path) -> str:
    """Companion assignments file path for a sample CSV path."""
    text = str(sample_path)
    if text.endswith(".csv"):
        return text[:-4] + ".assignments.csv"
    return text + ".assignments.csv"


def write_sample_csv(sample_obj: NccSample, path) -> None:
    """Write ``id,v1,v0,p0`` plus the ``case_id,control_id`` pair file."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "v1", "v0", "p0"])
        for j in range(sample_obj.v1.shape[0]):
            writer.writerow([j, int(sample_obj.v1[j]), int(sample_obj.v0[j]),
                             repr(float(sample_obj.p0[j]))])
    with open(assignments_path_for(path), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case_id", "control_id"])
        for case in sorted(sample_obj.control_assignments):
            for ctrl in sample_obj.control_assignments[case]:
                writer.writerow([case, int(ctrl)])


def load_sample_csv(path, cohort: Cohort, match_tol=None) -> NccSample:
    """Reconstruct an NccSample from the CSV pair written by :func:`write_sample_csv`.

    ``match_tol`` must repeat whatever matching tolerance was used when the
    sample was drawn, because the inclusion probabilities depend on the risk
    sets.  The stored ``p0`` column is validated against a recomputation.
    """
    n = cohort.n
    v1 = np.zeros(n, dtype=np.int8)
    v0_file = np.zeros(n, dtype=np.int8)
    p0_file = np.zeros(n)
    seen = np.zeros(n, dtype=bool)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["id", "v1", "v0", "p0"]:
            raise ValueError(f"{path}: header must be id,v1,v0,p0")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise ValueError(f"{path}: line {lineno}: expected 4 fields")
            try:
                j = int(row[0]); a = int(row[1]); b = int(row[2]); p = float(row[3])
            except ValueError:
                raise ValueError(f"{path}: line {lineno}: malformed row") from None
            if not 0 <= j < n:
                raise ValueError(f"{path}: line {lineno}: id {j} outside cohort")
            if a not in (0, 1) or b not in (0, 1):
                raise ValueError(f"{path}: line {lineno}: v1/v0 must be 0 or 1")
            v1[j], v0_file[j], p0_file[j] = a, b, p
            seen[j] = True
    if not seen.all():
        raise ValueError(f"{path}: missing rows for some cohort ids")
    if np.any((v1 == 1) & (cohort.deltas == 0)):
        raise ValueError(f"{path}: a non-event is flagged as a case")
    assignments: dict[int, np.ndarray] = {int(i): [] for i in np.flatnonzero(v1)}
    apath = assignments_path_for(path)
    with open(apath, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["case_id", "control_id"]:
            raise ValueError(f"{apath}: header must be case_id,control_id")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                case, ctrl = int(row[0]), int(row[1])
            except (ValueError, IndexError):
                raise ValueError(f"{apath}: line {lineno}: malformed row") from None
            if case not in assignments:
                raise ValueError(f"{apath}: line {lineno}: {case} is not a selected case")
            if not 0 <= ctrl < n or ctrl == case:
                raise ValueError(f"{apath}: line {lineno}: invalid control id {ctrl}")
            assignments[case].append(ctrl)
    assignments = {c: np.asarray(v, dtype=np.int64) for c, v in assignments.items()}
    tol = None if match_tol is None else np.asarray(match_tol, dtype=float)
    v0 = np.zeros(n, dtype=np.int8)
    for controls in assignments.values():
        v0[controls] = 1
    if not np.array_equal(v0, v0_file):
        raise ValueError(f"{path}: v0 column disagrees with the assignments file")
    p0 = control_inclusion_prob(cohort, v1, assignments, tol)
    if not np.allclose(p0, p0_file, rtol=0, atol=1e-9):
        raise ValueError(f"{path}: p0 column disagrees with its recomputation from the "
                         "assignments; check the --match tolerance used at sampling time")
    deltas = cohort.deltas.astype(float)
    pi1_realized = float(np.sum(deltas * v1) / np.sum(deltas))
    selected = ((v1 == 1) | (v0 == 1)).astype(np.int8)
    return NccSample(v1=v1, control_assignments=assignments, v0=v0, p0=p0,
                     pi1_realized=pi1_realized, selected=selected, match_tol=tol)
