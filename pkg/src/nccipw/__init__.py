"""IPW estimation and perturbation inference for nested case-control studies.

Supports designs where only a fraction of the events are sampled as cases:
a sampling weight built for that setting, Samuelsen's classic weight, IPW
Cox and time-dependent GLM risk models, double-IPW accuracy measures, a
perturbation-resampling variance estimator, and a simulation harness.
"""

from .accuracy import (AccuracySummary, CutoffResult, accuracy_at_cutoff, auc,
                       cutoff_for_fpr, double_weights)
from .cohort import (Cohort, StepSurvival, Subject, censoring_weight,
                     censoring_weights, km_censoring_survival, load_cohort_csv,
                     risk_set, write_cohort_csv)
from .estimators import (Link, ModelFit, NonConvergenceError, breslow_cumhaz,
                         cox_partial_loglik, cox_score, fit_cox, fit_glm,
                         glm_estimating_equation, glm_weighted_loglik,
                         predict_risk)
from .perturbation import (MultiplierDraw, PerturbationResult, draw_multipliers,
                           perturb_sampling_weights, perturbed_estimate,
                           run_perturbation, se_ci)
from .pipeline import EstimateConfig, EstimateResult, estimate_parameters, parameter_names
from .sampling import (NccDesign, NccSample, control_inclusion_prob, draw_cases,
                       draw_controls, load_sample_csv, sample, write_sample_csv)
from .simulation import (AggregateReport, ReplicationRecord, SimConfig,
                         SimulatedCohort, aggregate, generate_cohort,
                         run_replication, run_replications, simulate_cell,
                         true_values, write_report_csv)
from .weights import SamplingWeights, WeightScheme, new_weight, samuelsen_weight

__version__ = "0.1.0"
