"""Perturbation resampling for variance estimation of the IPW estimators.

Each replicate draws i.i.d. unit-exponential multipliers (mean 1, variance
1): one per subject, plus one per realized (case, selected-control) pair.
The case indicators, the realized case fraction, the control indicators,
and the control-inclusion probabilities are all rebuilt with the
multipliers inserted, the censoring survival is refit with the per-subject
multipliers, and the whole estimation pipeline is re-run.  The empirical
spread of the replicates approximates the sampling variance, including the
between-subject correlations induced by the finite-population draws, which
a plain bootstrap misses.

Only the multipliers attached to realized sampling indicators are ever
materialized; every formula multiplies the others by an indicator that is
zero, so the conceptual subject-by-subject multiplier array stays sparse.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.stats import norm

from .cohort import Cohort, km_censoring_survival
from .pipeline import EstimateConfig, estimate_parameters
from .sampling import NccSample, _inclusion_prob_from_counts
from .weights import SamplingWeights, WeightScheme
from .estimators import NonConvergenceError

__all__ = [
    "MultiplierDraw",
    "PerturbationResult",
    "draw_multipliers",
    "perturb_sampling_weights",
    "perturbed_estimate",
    "run_perturbation",
    "se_ci",
]


@dataclass(frozen=True)
class MultiplierDraw:
    """One replicate's multipliers.

    ``diag`` holds the per-subject multipliers; ``pair`` maps each case
    index to the multipliers of its selected controls, aligned with
    ``sample.control_assignments[case]``.
    """

    diag: np.ndarray
    pair: dict[int, np.ndarray]

    @classmethod
    def identity(cls, sample_obj: NccSample) -> "MultiplierDraw":
        """All-ones draw; pushes every estimate through unchanged."""
        n = sample_obj.v1.shape[0]
        pair = {case: np.ones(controls.shape[0])
                for case, controls in sample_obj.control_assignments.items()}
        return cls(diag=np.ones(n), pair=pair)


def draw_multipliers(sample_obj: NccSample, rng) -> MultiplierDraw:
    """Draw unit-exponential multipliers for one perturbation replicate.

    Consumes randomness as: the per-subject block first, then per-case
    blocks in ascending case order.  Deterministic given a seeded rng.
    """
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    n = sample_obj.v1.shape[0]
    diag = rng.standard_exponential(n)
    pair = {}
    for case in sorted(sample_obj.control_assignments):
        k = sample_obj.control_assignments[case].shape[0]
        pair[case] = rng.standard_exponential(k)
    return MultiplierDraw(diag=diag, pair=pair)


def perturb_sampling_weights(sample_obj: NccSample, cohort: Cohort,
                             draw: MultiplierDraw) -> SamplingWeights:
    """Perturbed counterpart of the subsampled-case weight.

    The case indicator becomes V1_j * I_jj, the realized case fraction
    becomes sum(I_jj delta_j V1_j) / sum(I_jj delta_j), the control
    indicator becomes 1 - prod(1 - V1_i V0^i_j I_ij), and the inclusion
    probability replaces each case's control count m with the sum of that
    case's pair multipliers.  The perturbed "probability" may leave [0, 1];
    only a zero denominator under a nonzero numerator is an error.
    """
    n = cohort.n
    d = cohort.deltas.astype(float)
    diag = np.asarray(draw.diag, dtype=float)
    if diag.shape != (n,):
        raise ValueError("diag multipliers must have one entry per subject")
    num = float(np.sum(diag * d * sample_obj.v1))
    den = float(np.sum(diag * d))
    if den == 0:
        raise ValueError("no event mass after perturbation")
    pi1_star = num / den
    if pi1_star <= 0:
        raise ValueError("perturbed case fraction is not positive")

    structure = sample_obj.case_structure(cohort)
    counts = []
    prod_v0 = np.ones(n)
    for (case, _, _, controls) in structure:
        mult = np.asarray(draw.pair[case], dtype=float)
        if mult.shape != controls.shape:
            raise ValueError(f"pair multipliers for case {case} do not match its controls")
        counts.append(float(np.sum(mult)))
        np.multiply.at(prod_v0, controls, 1.0 - mult)
    v0_star = 1.0 - prod_v0
    p0_star = _inclusion_prob_from_counts(structure, counts, n)
    active = v0_star != 0
    if np.any(active & (p0_star == 0.0)):
        raise ValueError("perturbed inclusion probability vanished for a selected control")
    ctrl = np.where(active, v0_star / np.where(p0_star != 0.0, p0_star, 1.0), 0.0)
    values = d * sample_obj.v1 * diag / pi1_star + (1.0 - d) * ctrl
    return SamplingWeights(values=values, scheme=WeightScheme.NEW)


def perturbed_estimate(cohort: Cohort, sample_obj: NccSample, draw: MultiplierDraw,
                       config: EstimateConfig, cutoff: Optional[float] = None) -> np.ndarray:
    """Full parameter vector re-estimated under one multiplier draw.

    The censoring survival is refit with the per-subject multipliers, the
    sampling weights are perturbed, the model is refit, and the accuracy
    measures are re-evaluated with perturbed weights and perturbed risk
    scores.  ``cutoff`` fixes the classification cutoff; ``None`` re-solves
    it for the configured FPR target on the perturbed estimates.
    """
    g_star = km_censoring_survival(cohort, multipliers=draw.diag)
    w_star = perturb_sampling_weights(sample_obj, cohort, draw)
    result = estimate_parameters(cohort, w_star.values, g_star, config, cutoff=cutoff)
    return result.params


@dataclass(frozen=True)
class PerturbationResult:
    """Perturbation SE and normal-approximation CI for each parameter."""

    point: np.ndarray
    se: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    b_used: int
    b_total: int


def se_ci(point, replicates: Sequence, level: float, b_total: Optional[int] = None) -> PerturbationResult:
    """Empirical SE over replicates and point +/- z * SE intervals.

    Replicate vectors containing non-finite entries are dropped; fewer than
    two usable replicates is an error.
    """
    if not 0 <= level < 1:
        raise ValueError("level must lie in [0, 1)")
    point = np.atleast_1d(np.asarray(point, dtype=float))
    reps = np.asarray([np.atleast_1d(np.asarray(r, dtype=float)) for r in replicates])
    total = int(b_total) if b_total is not None else reps.shape[0]
    if reps.size:
        usable = reps[np.all(np.isfinite(reps), axis=1)]
    else:
        usable = reps
    b_used = usable.shape[0]
    if b_used < 2:
        raise ValueError("need at least two usable perturbation replicates")
    se = usable.std(axis=0, ddof=1)
    z = float(norm.ppf(0.5 * (1.0 + level)))
    half = z * se
    return PerturbationResult(point=point, se=se, ci_lower=point - half,
                              ci_upper=point + half, b_used=b_used, b_total=total)


def run_perturbation(cohort: Cohort, sample_obj: NccSample, config: EstimateConfig,
                     b: int, entropy: tuple, point, level: float = 0.95,
                     cutoff: Optional[float] = None) -> PerturbationResult:
    """Run ``b`` perturbation replicates with seeds derived from ``entropy``.

    Replicate ``k`` uses the seed sequence ``(*entropy, k + 1)``, so any
    replicate is reproducible in isolation and results do not depend on
    scheduling.  Replicates whose re-estimation fails to converge are
    dropped and show up in ``b_total - b_used``.
    """
    if b < 2:
        raise ValueError("need at least two perturbation replicates")
    reps = []
    for k in range(b):
        rng = np.random.default_rng(np.random.SeedSequence((*entropy, k + 1)))
        draw = draw_multipliers(sample_obj, rng)
        try:
            reps.append(perturbed_estimate(cohort, sample_obj, draw, config, cutoff=cutoff))
        except (NonConvergenceError, ValueError, ZeroDivisionError, np.linalg.LinAlgError):
            continue
    return se_ci(point, reps, level, b_total=b)
