"""Double-IPW time-dependent accuracy measures for a risk score.

Every estimator weights subject ``i`` by w_i * omega_i, the product of the
sampling weight and the inverse-censoring weight.  Classification into the
high-risk group uses the strict rule score > cutoff, and tied scores
contribute nothing to the AUC numerator.  A measure whose conditioning set
carries no weighted mass is reported as ``None``, never coerced to 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .cohort import Cohort, StepSurvival, censoring_weights

__all__ = [
    "AccuracySummary",
    "CutoffResult",
    "accuracy_at_cutoff",
    "auc",
    "cutoff_for_fpr",
    "double_weights",
]


@dataclass(frozen=True)
class AccuracySummary:
    """Point accuracy estimates at one cutoff plus the AUC."""

    t0: float
    cutoff: float
    tpr: Optional[float]
    fpr: Optional[float]
    ppv: Optional[float]
    npv: Optional[float]
    auc: Optional[float]


@dataclass(frozen=True)
class CutoffResult:
    """Cutoff solving FPR <= target, with the achieved FPR.

    ``at_max`` flags the degenerate outcome where only the largest observed
    score satisfies the target.
    """

    cutoff: float
    fpr: float
    at_max: bool


def double_weights(cohort: Cohort, w, G: StepSurvival, t0: float) -> np.ndarray:
    """Per-subject mass w_i * omega_i used by all accuracy estimators."""
    w = np.asarray(getattr(w, "values", w), dtype=float)
    if w.shape != (cohort.n,):
        raise ValueError("weights must have one entry per subject")
    return w * censoring_weights(cohort, t0, G)


def _masked_inputs(scores, cohort, w, G, t0):
    u = double_weights(cohort, w, G, t0)
    scores = np.asarray(scores, dtype=float)
    if scores.shape != (cohort.n,):
        raise ValueError("scores must have one entry per subject")
    mask = u != 0
    if np.any(~np.isfinite(scores[mask])):
        raise ValueError("a subject with nonzero weight has a non-finite score")
    return scores[mask], u[mask], cohort.times[mask] <= t0


def _ratio(num: float, den: float) -> Optional[float]:
    if den == 0:
        return None
    return num / den


def accuracy_at_cutoff(scores, cohort: Cohort, w, G: StepSurvival, t0: float, c: float):
    """(TPR, FPR, PPV, NPV) at cutoff ``c`` with strict score > c classification."""
    s, u, event = _masked_inputs(scores, cohort, w, G, t0)
    high = s > c
    nonevent = ~event
    tpr = _ratio(float(np.sum(u * high * event)), float(np.sum(u * event)))
    fpr = _ratio(float(np.sum(u * high * nonevent)), float(np.sum(u * nonevent)))
    ppv = _ratio(float(np.sum(u * high * event)), float(np.sum(u * high)))
    npv = _ratio(float(np.sum(u * ~high * nonevent)), float(np.sum(u * ~high)))
    return tpr, fpr, ppv, npv


def auc(scores, cohort: Cohort, w, G: StepSurvival, t0: float) -> Optional[float]:
    """Weighted probability that an event outranks a non-event, ties count 0.

    Computed by sorting the non-event scores once instead of forming all
    pairs; the result equals the explicit double sum over (event, non-event)
    pairs with strict inequality.
    """
    s, u, event = _masked_inputs(scores, cohort, w, G, t0)
    se, ue = s[event], u[event]
    sn, un = s[~event], u[~event]
    if se.size == 0 or sn.size == 0:
        return None
    total_e = float(np.sum(ue))
    total_n = float(np.sum(un))
    den = total_e * total_n
    if den == 0:
        return None
    order = np.argsort(sn, kind="stable")
    sn_sorted = sn[order]
    cum = np.concatenate(([0.0], np.cumsum(un[order])))
    below = cum[np.searchsorted(sn_sorted, se, side="left")]
    num = float(np.sum(ue * below))
    return num / den


def cutoff_for_fpr(scores, cohort: Cohort, w, G: StepSurvival, t0: float,
                   target: float) -> CutoffResult:
    """Smallest cutoff at which the weighted FPR does not exceed ``target``.

    Candidates are the observed score values (the estimator is a step
    function between them) plus a sentinel just below the smallest score so
    that target = 1 returns the everyone-high-risk boundary.  The achieved
    FPR at the returned cutoff is reported alongside it.
    """
    if not 0 < target <= 1:
        raise ValueError("target must lie in (0, 1]")
    s, u, event = _masked_inputs(scores, cohort, w, G, t0)
    sn, un = s[~event], u[~event]
    if sn.size == 0:
        raise ValueError("no non-event carries weight; the FPR is undefined")
    total_n = float(np.sum(un))
    if total_n == 0:
        raise ValueError("non-event class has zero weighted mass")
    uniq = np.unique(s)
    candidates = np.concatenate(([np.nextafter(uniq[0], -np.inf)], uniq))
    order = np.argsort(sn, kind="stable")
    sn_sorted = sn[order]
    cum = np.concatenate(([0.0], np.cumsum(un[order])))
    mass_le = cum[np.searchsorted(sn_sorted, candidates, side="right")]
    fpr = (total_n - mass_le) / total_n
    ok = np.flatnonzero(fpr <= target)
    if ok.size == 0:
        raise ValueError("no cutoff attains the FPR target; weighted mass is degenerate")
    idx = int(ok[0])
    cutoff = float(candidates[idx])
    return CutoffResult(cutoff=cutoff, fpr=float(fpr[idx]),
                        at_max=bool(idx == candidates.size - 1))
