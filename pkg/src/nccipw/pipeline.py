"""One-pass estimation pipeline shared by the simulator, perturbation, and CLI.

Given a weight vector and a censoring-survival curve, fit the configured
risk model, score every weighted subject, pick the cutoff (or reuse a
frozen one), and evaluate the accuracy measures.  Running the identical
code path for base and perturbed inputs is what makes the all-ones
multiplier draw reproduce the base estimates bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .accuracy import AccuracySummary, accuracy_at_cutoff, auc, cutoff_for_fpr
from .cohort import Cohort, StepSurvival
from .estimators import (Link, MODEL_COX, MODEL_GLM, ModelFit, fit_cox,
                         fit_glm, predict_risk)

__all__ = ["EstimateConfig", "EstimateResult", "estimate_parameters", "parameter_names"]


@dataclass(frozen=True)
class EstimateConfig:
    """What to fit and how to summarize it."""

    model: str
    t0: float
    link: Link = Link.LOGIT
    fpr_target: float = 0.05

    def __post_init__(self):
        if self.model not in (MODEL_COX, MODEL_GLM):
            raise ValueError(f"model must be '{MODEL_COX}' or '{MODEL_GLM}'")
        if self.t0 <= 0:
            raise ValueError("t0 must be positive")
        if not 0 < self.fpr_target < 1:
            raise ValueError("fpr_target must lie in (0, 1)")


@dataclass
class EstimateResult:
    fit: ModelFit
    scores: np.ndarray
    summary: AccuracySummary
    params: np.ndarray
    names: list[str]


def parameter_names(marker_names) -> list[str]:
    return ["alpha"] + [f"beta_{name}" for name in marker_names] + ["auc", "tpr", "ppv", "npv"]


def estimate_parameters(cohort: Cohort, weights, G: StepSurvival,
                        config: EstimateConfig, cutoff: Optional[float] = None) -> EstimateResult:
    """Fit, score, and summarize; ``cutoff=None`` solves for the FPR target."""
    w = np.asarray(getattr(weights, "values", weights), dtype=float)
    if config.model == MODEL_COX:
        fit = fit_cox(cohort, w, config.t0)
        score_link = Link.CLOGLOG
    else:
        fit = fit_glm(cohort, w, G, config.t0, config.link)
        score_link = config.link
    scores = np.full(cohort.n, np.nan)
    mask = w != 0
    scores[mask] = predict_risk(fit, cohort.markers[mask], score_link)
    if cutoff is None:
        cut = cutoff_for_fpr(scores, cohort, w, G, config.t0, config.fpr_target)
        c = cut.cutoff
    else:
        c = float(cutoff)
    tpr, fpr, ppv, npv = accuracy_at_cutoff(scores, cohort, w, G, config.t0, c)
    area = auc(scores, cohort, w, G, config.t0)
    summary = AccuracySummary(t0=config.t0, cutoff=c, tpr=tpr, fpr=fpr,
                              ppv=ppv, npv=npv, auc=area)
    params = np.array([fit.alpha, *fit.beta]
                      + [np.nan if v is None else v for v in (area, tpr, ppv, npv)])
    return EstimateResult(fit=fit, scores=scores, summary=summary, params=params,
                          names=parameter_names(cohort.marker_names))
