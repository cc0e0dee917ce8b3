"""Sampling weights for IPW estimation on NCC samples.

Two schemes are provided.  The subsampled-case weight handles designs where
only a fraction of the events become cases: event cases are upweighted by
the inverse realized case fraction and event controls are dropped.
Samuelsen's classic weight keeps cases at weight 1 and gives every control,
event or not, the inverse of its control-inclusion probability.  The two
coincide whenever all events are cases.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .cohort import Cohort
from .sampling import NccSample

__all__ = ["WeightScheme", "SamplingWeights", "new_weight", "samuelsen_weight"]


class WeightScheme(enum.Enum):
    NEW = "new"
    SAMUELSEN = "samuelsen"


@dataclass(frozen=True)
class SamplingWeights:
    """Per-subject weight vector under one scheme; 0 for unsampled subjects."""

    values: np.ndarray
    scheme: WeightScheme

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(vals)):
            raise ValueError("weights must be finite")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)


def _control_factor(sample: NccSample) -> np.ndarray:
    """v0 / p0 with the 0/0 -> 0 convention for subjects never selected."""
    v0 = sample.v0.astype(float)
    p0 = sample.p0
    bad = (sample.v0 == 1) & (p0 <= 0)
    if np.any(bad):
        raise ValueError("a selected control has zero inclusion probability; "
                         "the sample is internally inconsistent")
    return np.where(sample.v0 == 1, v0 / np.where(p0 > 0, p0, 1.0), 0.0)


def new_weight(sample: NccSample, cohort: Cohort) -> SamplingWeights:
    """Weight for designs sampling a fraction of events as cases.

    w_j = delta_j V1_j / pi1 + (1 - delta_j) V0_j / p0_j, with pi1 the
    realized case fraction.  Event cases get 1/pi1, event controls get 0,
    non-event controls get 1/p0_j, everyone unsampled gets 0.
    """
    if sample.pi1_realized <= 0:
        raise ValueError("realized case fraction is zero; no cases were drawn")
    d = cohort.deltas.astype(float)
    case_term = d * sample.v1 / sample.pi1_realized
    values = case_term + (1.0 - d) * _control_factor(sample)
    return SamplingWeights(values=values, scheme=WeightScheme.NEW)


def samuelsen_weight(sample: NccSample, cohort: Cohort) -> SamplingWeights:
    """Samuelsen-style weight: cases at 1, every control at 1/p0_j.

    w_j = delta_j V1_j + (1 - delta_j V1_j) V0_j / p0_j.  Event controls
    therefore carry 1/p0_j, which can be very large when their event time
    is short and few cases could have drawn them.
    """
    d = cohort.deltas.astype(float)
    dv1 = d * sample.v1
    values = dv1 + (1.0 - dv1) * _control_factor(sample)
    return SamplingWeights(values=values, scheme=WeightScheme.SAMUELSEN)
