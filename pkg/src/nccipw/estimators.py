"""IPW model fitting: weighted Cox partial likelihood and double-IPW GLM.

Both fitters solve their weighted estimating equations by damped Newton
iteration with step halving.  Non-convergence (iteration cap, diverging
coefficients, or a non-finite objective) raises ``NonConvergenceError``
carrying the partial fit; it is never masked by returning a huge
coefficient.  Subjects whose weight is exactly zero are dropped from every
sum before fitting, so their marker values are never touched.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .cohort import Cohort, StepSurvival, censoring_weights

__all__ = [
    "Link",
    "ModelFit",
    "NonConvergenceError",
    "fit_cox",
    "fit_glm",
    "predict_risk",
    "cox_partial_loglik",
    "cox_score",
    "breslow_cumhaz",
    "glm_estimating_equation",
    "glm_weighted_loglik",
]

SCORE_TOL = 1e-8
MAX_ITER = 50
MAX_HALVINGS = 20
MAX_COEF = 50.0

MODEL_COX = "cox"
MODEL_GLM = "glm"


class Link(enum.Enum):
    """Monotone link functions mapping the linear predictor into (0, 1)."""

    LOGIT = "logit"
    CLOGLOG = "cloglog"

    def g(self, eta):
        eta = np.asarray(eta, dtype=float)
        if self is Link.LOGIT:
            return expit(eta)
        return -np.expm1(-np.exp(eta))

    def dg(self, eta):
        eta = np.asarray(eta, dtype=float)
        if self is Link.LOGIT:
            p = expit(eta)
            return p * (1.0 - p)
        return np.exp(eta - np.exp(eta))

    def inverse(self, p):
        p = np.asarray(p, dtype=float)
        if self is Link.LOGIT:
            return np.log(p / (1.0 - p))
        return np.log(-np.log1p(-p))


@dataclass(frozen=True)
class ModelFit:
    """Fitted risk model at horizon ``t0``.

    ``alpha`` is the intercept on the link scale (for the Cox model, the log
    baseline cumulative hazard at ``t0``); ``beta`` are the marker effects.
    """

    model: str
    t0: float
    alpha: float
    beta: np.ndarray
    converged: bool
    iterations: int
    score_norm: float


class NonConvergenceError(RuntimeError):
    """A fit failed to converge; ``fit`` holds the last iterate for diagnostics."""

    def __init__(self, message: str, fit: ModelFit | None = None):
        super().__init__(message)
        self.fit = fit


def _weight_values(weights) -> np.ndarray:
    return np.asarray(getattr(weights, "values", weights), dtype=float)


def _sup(x) -> float:
    return float(np.max(np.abs(x))) if np.size(x) else 0.0


# ---------------------------------------------------------------------------
# Cox partial likelihood


def _cox_sorted(times, deltas, markers, weights):
    order = np.argsort(times, kind="stable")
    ts = times[order]
    ds = deltas[order]
    zs = markers[order]
    ws = weights[order]
    # first index of each tie group: risk sums at T_i run over T_j >= T_i
    pos = np.searchsorted(ts, ts, side="left")
    return ts, ds, zs, ws, pos


def _cox_quantities(beta, ts, ds, zs, ws, pos, need_derivs=True):
    eta = zs @ beta if zs.shape[1] else np.zeros(ts.shape[0])
    with np.errstate(over="ignore", invalid="ignore"):
        r = ws * np.exp(eta)
        s0 = np.cumsum(r[::-1])[::-1]
    ev = ds == 1
    s0_at = s0[pos[ev]]
    with np.errstate(divide="ignore", invalid="ignore"):
        log_s0 = np.log(s0_at)
    ll_terms = ws[ev] * (eta[ev] - log_s0)
    ll = float(np.sum(ll_terms)) if np.all(np.isfinite(ll_terms)) else -np.inf
    if not need_derivs:
        return ll, None, None
    p = zs.shape[1]
    if p == 0:
        return ll, np.zeros(0), np.zeros((0, 0))
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        rz = r[:, None] * zs
        s1 = np.cumsum(rz[::-1], axis=0)[::-1]
        s2 = np.cumsum((rz[:, :, None] * zs[:, None, :])[::-1], axis=0)[::-1]
        s1_at = s1[pos[ev]]
        s2_at = s2[pos[ev]]
        we = ws[ev]
        zbar = s1_at / s0_at[:, None]
        score = (we[:, None] * (zs[ev] - zbar)).sum(axis=0)
        vterm = s2_at / s0_at[:, None, None] - zbar[:, :, None] * zbar[:, None, :]
        hess = -(we[:, None, None] * vterm).sum(axis=0)
    return ll, score, hess


def cox_partial_loglik(beta, times, deltas, markers, weights) -> float:
    """Weighted Cox partial log-likelihood at ``beta`` (Breslow ties)."""
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    args = _prep_cox_arrays(times, deltas, markers, weights)
    ll, _, _ = _cox_quantities(beta, *args, need_derivs=False)
    return ll


def cox_score(beta, times, deltas, markers, weights) -> np.ndarray:
    """Gradient of the weighted Cox partial log-likelihood at ``beta``."""
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    args = _prep_cox_arrays(times, deltas, markers, weights)
    _, score, _ = _cox_quantities(beta, *args)
    return score


def _prep_cox_arrays(times, deltas, markers, weights):
    times = np.asarray(times, dtype=float)
    deltas = np.asarray(deltas)
    markers = np.asarray(markers, dtype=float)
    if markers.ndim == 1:
        markers = markers.reshape(-1, 1)
    weights = np.asarray(weights, dtype=float)
    return _cox_sorted(times, deltas, markers, weights)


def breslow_cumhaz(times, deltas, markers, weights, beta, t0) -> float:
    """Weighted Breslow baseline cumulative hazard at ``t0``."""
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    ts, ds, zs, ws, pos = _prep_cox_arrays(times, deltas, markers, weights)
    eta = zs @ beta if zs.shape[1] else np.zeros(ts.shape[0])
    r = ws * np.exp(eta)
    s0 = np.cumsum(r[::-1])[::-1]
    ev = (ds == 1) & (ts <= t0)
    if not np.any(ev):
        return 0.0
    return float(np.sum(ws[ev] / s0[pos[ev]]))


def fit_cox(cohort: Cohort, weights, t0: float) -> ModelFit:
    """Maximize the IPW Cox partial likelihood; set the intercept by Breslow.

    The intercept is the log of the weighted Breslow cumulative baseline
    hazard at ``t0``, so risks are read off with the cloglog link.  Raises
    ``NonConvergenceError`` when Newton iteration hits the iteration cap,
    the coefficients pass ``MAX_COEF`` in absolute value, or the likelihood
    turns non-finite.
    """
    if t0 <= 0:
        raise ValueError("t0 must be positive")
    w_all = _weight_values(weights)
    if w_all.shape != (cohort.n,):
        raise ValueError("weights must have one entry per subject")
    mask = w_all != 0
    if not np.any((cohort.deltas == 1) & (w_all > 0)):
        raise ValueError("no event carries positive weight")
    times = cohort.times[mask]
    deltas = cohort.deltas[mask]
    z = cohort.markers[mask]
    w = w_all[mask]
    p = z.shape[1]

    mu = z.mean(axis=0) if p else np.zeros(0)
    sd = z.std(axis=0) if p else np.zeros(0)
    sd = np.where(sd > 0, sd, 1.0)
    zs_data = (z - mu) / sd
    ts, ds, zmat, ws, pos = _cox_sorted(times, deltas, zs_data, w)

    beta_s = np.zeros(p)
    iterations = 0
    ll, score, hess = _cox_quantities(beta_s, ts, ds, zmat, ws, pos)

    def orig_beta(bs):
        return bs / sd if p else bs

    def fail(msg):
        fit = ModelFit(MODEL_COX, float(t0), float("nan"), orig_beta(beta_s),
                       False, iterations, _sup(score * sd) if p else 0.0)
        raise NonConvergenceError(msg, fit)

    if not np.isfinite(ll):
        fail("partial likelihood is non-finite at the starting value")
    while True:
        score_orig_sup = _sup(score * sd) if p else 0.0
        if score_orig_sup < SCORE_TOL:
            break
        if iterations >= MAX_ITER:
            fail("maximum Newton iterations reached")
        try:
            step = np.linalg.solve(-hess, score)
        except np.linalg.LinAlgError:
            step = np.linalg.pinv(-hess) @ score
        accepted = False
        slack = 1e-10 * (1.0 + abs(ll))  # tolerate the float plateau at the optimum
        for h in range(MAX_HALVINGS + 1):
            cand = beta_s + step * (0.5 ** h)
            ll_c, score_c, hess_c = _cox_quantities(cand, ts, ds, zmat, ws, pos)
            if np.isfinite(ll_c) and ll_c >= ll - slack:
                beta_s, ll, score, hess = cand, ll_c, score_c, hess_c
                accepted = True
                break
        iterations += 1
        if not accepted:
            fail("step halving failed to improve the partial likelihood")
        if _sup(orig_beta(beta_s)) > MAX_COEF:
            fail("coefficients diverged (monotone likelihood or separation)")

    beta = orig_beta(beta_s)
    # log baseline cumulative hazard at t0 via the weighted Breslow sum;
    # computed in scaled coordinates then shifted back
    eta = zmat @ beta_s if p else np.zeros(ts.shape[0])
    r = ws * np.exp(eta)
    s0 = np.cumsum(r[::-1])[::-1]
    ev = (ds == 1) & (ts <= t0)
    lam0_s = float(np.sum(ws[ev] / s0[pos[ev]])) if np.any(ev) else 0.0
    if lam0_s <= 0:
        raise ValueError("no positively weighted events at or before t0; "
                         "the baseline hazard at t0 is degenerate")
    alpha = float(np.log(lam0_s) - (beta @ mu if p else 0.0))
    return ModelFit(MODEL_COX, float(t0), alpha, beta, True, iterations,
                    _sup(score * sd) if p else 0.0)


# ---------------------------------------------------------------------------
# Time-dependent GLM (double IPW)


def glm_estimating_equation(alpha, beta, outcomes, markers, u, link: Link) -> np.ndarray:
    """Weighted estimating function sum u * (y - g(eta)) * (1, Z).

    For the logit link this is the gradient of the weighted Bernoulli
    log-likelihood; for other links it is a quasi-score.
    """
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    markers = np.asarray(markers, dtype=float)
    if markers.ndim == 1:
        markers = markers.reshape(-1, 1)
    eta = alpha + markers @ beta
    resid = np.asarray(u, dtype=float) * (np.asarray(outcomes, dtype=float) - link.g(eta))
    return np.concatenate(([resid.sum()], resid @ markers))


def glm_weighted_loglik(alpha, beta, outcomes, markers, u, link: Link = Link.LOGIT) -> float:
    """Weighted Bernoulli log-likelihood sum u * [y log g + (1-y) log(1-g)]."""
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    markers = np.asarray(markers, dtype=float)
    if markers.ndim == 1:
        markers = markers.reshape(-1, 1)
    eta = alpha + markers @ beta
    g = np.clip(link.g(eta), 1e-300, 1.0 - 1e-16)
    y = np.asarray(outcomes, dtype=float)
    terms = np.asarray(u, dtype=float) * (y * np.log(g) + (1.0 - y) * np.log1p(-g))
    return float(np.sum(terms))


def fit_glm(cohort: Cohort, weights, G: StepSurvival, t0: float,
            link: Link = Link.LOGIT) -> ModelFit:
    """Fit the time-dependent GLM for the event-by-``t0`` outcome.

    Each subject enters with mass w_j * omega_j, the product of its sampling
    weight and its inverse-censoring weight, and the weighted estimating
    equation sum u * (1(T <= t0) - g(alpha + beta'Z)) * (1, Z) = 0 is solved
    by Newton iteration with step halving on the score norm.
    """
    if t0 <= 0:
        raise ValueError("t0 must be positive")
    w_all = _weight_values(weights)
    if w_all.shape != (cohort.n,):
        raise ValueError("weights must have one entry per subject")
    omega = censoring_weights(cohort, t0, G)
    u_all = w_all * omega
    mask = u_all != 0
    if not np.any(mask):
        raise ValueError("no subject carries positive double weight")
    u = u_all[mask]
    y = (cohort.times[mask] <= t0).astype(float)
    z = cohort.markers[mask]
    p = z.shape[1]
    if np.all(y == y[0]):
        raise ValueError("degenerate outcome: all double-weighted subjects are on one side of t0")

    mu = z.mean(axis=0) if p else np.zeros(0)
    sd = z.std(axis=0) if p else np.zeros(0)
    sd = np.where(sd > 0, sd, 1.0)
    zs = (z - mu) / sd if p else z.reshape(len(y), 0)
    x = np.column_stack([np.ones(len(y)), zs])

    pbar = float(np.sum(u * y) / np.sum(u)) if np.sum(u) != 0 else 0.5
    pbar = min(max(pbar, 1e-6), 1.0 - 1e-6)
    gamma = np.zeros(p + 1)
    gamma[0] = float(link.inverse(pbar))

    def to_orig(gam):
        beta = gam[1:] / sd if p else gam[1:]
        alpha = gam[0] - (beta @ mu if p else 0.0)
        return alpha, beta

    def orig_score_sup(score_s):
        # score in the raw parameterization: Z = sd * Zs + mu columnwise
        if not p:
            return abs(float(score_s[0]))
        raw = np.empty_like(score_s)
        raw[0] = score_s[0]
        raw[1:] = score_s[1:] * sd + mu * score_s[0]
        return _sup(raw)

    def score_info(gam):
        eta = x @ gam
        resid = u * (y - link.g(eta))
        score = x.T @ resid
        wdg = u * link.dg(eta)
        info = x.T @ (wdg[:, None] * x)
        return score, info

    iterations = 0
    score, info = score_info(gamma)
    merit = orig_score_sup(score)

    def fail(msg):
        alpha, beta = to_orig(gamma)
        fit = ModelFit(MODEL_GLM, float(t0), alpha, beta, False, iterations, merit)
        raise NonConvergenceError(msg, fit)

    while True:
        if not np.all(np.isfinite(score)):
            fail("estimating equation is non-finite")
        if merit < SCORE_TOL:
            break
        if iterations >= MAX_ITER:
            fail("maximum Newton iterations reached")
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(info, score, rcond=None)[0]
        accepted = False
        for h in range(MAX_HALVINGS + 1):
            cand = gamma + step * (0.5 ** h)
            score_c, info_c = score_info(cand)
            merit_c = orig_score_sup(score_c)
            if np.isfinite(merit_c) and (merit_c < merit or merit_c < SCORE_TOL):
                gamma, score, info, merit = cand, score_c, info_c, merit_c
                accepted = True
                break
        iterations += 1
        if not accepted:
            fail("step halving failed to reduce the score norm")
        alpha_cand, beta_cand = to_orig(gamma)
        if max(abs(alpha_cand), _sup(beta_cand)) > MAX_COEF:
            fail("coefficients diverged (separation or a dominating huge weight)")

    alpha, beta = to_orig(gamma)
    return ModelFit(MODEL_GLM, float(t0), float(alpha), beta, True, iterations, merit)


def predict_risk(fit: ModelFit, markers, link: Link):
    """Risk g(alpha + beta'Z) for one marker vector or a matrix of them."""
    z = np.asarray(markers, dtype=float)
    single = z.ndim == 1
    if single:
        z = z.reshape(1, -1)
    if z.shape[1] != fit.beta.shape[0]:
        raise ValueError("marker dimension does not match the fit")
    eta = fit.alpha + z @ fit.beta
    out = link.g(eta)
    return float(out[0]) if single else out
