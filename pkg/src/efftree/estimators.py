"""Subgroup potential-outcome-mean estimators, split contrasts, and their variances.

Three estimators of the pair (mu1, mu0) inside a subgroup w are provided:

* inverse probability weighting: weights observed outcomes by the inverse of
  the fitted (and truncated) propensity score,
* g-formula: averages outcome-model predictions at A=1 and A=0 over the
  subgroup's covariates,
* doubly robust: augments the g-formula predictions with inverse-weighted
  residuals, consistent when either nuisance model is correct.

A candidate split of a parent into children (l, r) is scored by the squared
standardized contrast  statistic = t_hat^2 / var_hat  where t_hat is the
difference of the two child effects. Variances come either from sandwich
(M-estimation) formulas that account for nuisance estimation, or from the
empirical variance of pooled per-observation influence contributions.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg

from .data import Dataset, SubgroupMask
from .glm import (
    AnyFit,
    DesignSpec,
    FitError,
    LogisticFit,
    build_design,
    build_design_difference,
    fit_logistic,
    fit_ols,
    predict_mean,
)

# Relative floor distinguishing true degenerate contrasts (identical
# contributions, variance exactly zero up to rounding) from genuinely tiny
# but meaningful variances.
REL_VAR_TOL = 1e-12


class EstimatorKind(str, enum.Enum):
    IPW = "ipw"
    GFORMULA = "g"
    DR = "dr"


class NuisanceScope(str, enum.Enum):
    WHOLE = "whole"
    PARENT = "parent"
    CHILD = "child"


class VarianceMethod(str, enum.Enum):
    POOLED_SANDWICH = "pooled-sandwich"
    PER_CHILD_SANDWICH = "per-child-sandwich"
    INFLUENCE = "influence"


def default_variance_method(kind: EstimatorKind, scope: NuisanceScope) -> VarianceMethod:
    """IPW uses the sandwich matching its fitting scope; g-formula uses the
    pooled sandwich; the doubly robust estimator uses the influence variance
    (its M-estimation variance carries no design-matrix correction)."""
    if kind == EstimatorKind.IPW:
        if scope == NuisanceScope.CHILD:
            return VarianceMethod.PER_CHILD_SANDWICH
        return VarianceMethod.POOLED_SANDWICH
    if kind == EstimatorKind.GFORMULA:
        if scope == NuisanceScope.CHILD:
            return VarianceMethod.INFLUENCE
        return VarianceMethod.POOLED_SANDWICH
    return VarianceMethod.INFLUENCE


class InadmissibleSplitError(RuntimeError):
    """A candidate split cannot be scored (fit failure, singular information
    matrix, degenerate variance, or an empty child arm)."""


@dataclass(frozen=True)
class NuisanceModels:
    """Fitted nuisance models plus the propensity truncation bound."""

    propensity: Optional[LogisticFit] = None
    outcome: Optional[AnyFit] = None
    epsilon: float = 0.01

    def __post_init__(self):
        if not 0.0 < self.epsilon < 0.5:
            raise ValueError("epsilon must lie in (0, 0.5)")


@dataclass
class NodeEffect:
    """Subgroup effect estimate with per-observation influence contributions.

    ``influence`` holds, for each subgroup row, the centered contribution
    delta_i - effect, where delta_i is the estimator's per-row effect term.
    ``second_moment`` is mean(delta_i^2), kept for degeneracy detection.
    """

    mu1: float
    mu0: float
    effect: float
    influence: np.ndarray
    kind: EstimatorKind
    n: int
    n_treated: int
    n_control: int
    second_moment: float

    @property
    def arm_empty(self) -> bool:
        return self.n_treated == 0 or self.n_control == 0


@dataclass(frozen=True)
class SplitContrast:
    """Effect difference between two children, its variance, and the statistic."""

    t_hat: float
    variance: float
    statistic: float


def truncated_propensity(models: NuisanceModels, data: Dataset, mask: SubgroupMask) -> np.ndarray:
    """Fitted treated-arm propensity on the masked rows, clipped to [eps, 1-eps]."""
    if models.propensity is None:
        raise ValueError("propensity model required")
    e = predict_mean(models.propensity, data, mask)
    return np.clip(e, models.epsilon, 1.0 - models.epsilon)


def _node_effect(kind: EstimatorKind, mask: SubgroupMask, A: np.ndarray,
                 d1: np.ndarray, d0: np.ndarray) -> NodeEffect:
    mu1 = float(d1.mean())
    mu0 = float(d0.mean())
    effect = mu1 - mu0
    delta = d1 - d0
    n_treated = int(A.sum())
    return NodeEffect(
        mu1=mu1,
        mu0=mu0,
        effect=effect,
        influence=delta - effect,
        kind=kind,
        n=mask.size,
        n_treated=n_treated,
        n_control=mask.size - n_treated,
        second_moment=float(np.mean(delta**2)),
    )


def estimate_ipw(data: Dataset, mask: SubgroupMask, models: NuisanceModels) -> NodeEffect:
    """Inverse-probability-weighted subgroup means: each arm's outcomes are
    weighted by the inverse truncated propensity and averaged over the whole
    subgroup."""
    if mask.size == 0:
        raise ValueError("empty subgroup")
    rows = mask.indices()
    A = data.treatment[rows].astype(np.float64)
    Y = data.outcome[rows]
    e1 = truncated_propensity(models, data, mask)
    d1 = A * Y / e1
    d0 = (1.0 - A) * Y / (1.0 - e1)
    return _node_effect(EstimatorKind.IPW, mask, A, d1, d0)


def estimate_g(data: Dataset, mask: SubgroupMask, models: NuisanceModels) -> NodeEffect:
    """G-formula subgroup means: outcome-model predictions at A=1 and A=0
    averaged over the subgroup's covariates."""
    if mask.size == 0:
        raise ValueError("empty subgroup")
    if models.outcome is None:
        raise ValueError("outcome model required")
    rows = mask.indices()
    A = data.treatment[rows].astype(np.float64)
    g1 = predict_mean(models.outcome, data, mask, treatment_override=1)
    g0 = predict_mean(models.outcome, data, mask, treatment_override=0)
    return _node_effect(EstimatorKind.GFORMULA, mask, A, g1, g0)


def estimate_dr(data: Dataset, mask: SubgroupMask, models: NuisanceModels) -> NodeEffect:
    """Doubly robust subgroup means: g-formula predictions augmented with
    inverse-weighted residuals of the observed arm."""
    if mask.size == 0:
        raise ValueError("empty subgroup")
    if models.outcome is None:
        raise ValueError("outcome model required")
    rows = mask.indices()
    A = data.treatment[rows].astype(np.float64)
    Y = data.outcome[rows]
    e1 = truncated_propensity(models, data, mask)
    g1 = predict_mean(models.outcome, data, mask, treatment_override=1)
    g0 = predict_mean(models.outcome, data, mask, treatment_override=0)
    d1 = g1 + A * (Y - g1) / e1
    d0 = g0 + (1.0 - A) * (Y - g0) / (1.0 - e1)
    return _node_effect(EstimatorKind.DR, mask, A, d1, d0)


ESTIMATE = {
    EstimatorKind.IPW: estimate_ipw,
    EstimatorKind.GFORMULA: estimate_g,
    EstimatorKind.DR: estimate_dr,
}


def if_variance(effect_l: NodeEffect, effect_r: NodeEffect, n_union: int) -> float:
    """Variance of t_hat from pooled per-observation influence contributions.

    Left contributions are scaled by 1/p_l, right by -1/p_r (p_s the child
    share of the union); the sample variance of the pooled vector divided by
    n_union estimates Var[t_hat]. Degenerate pools (fewer than two
    contributions, or variance at the rounding floor) are inadmissible.
    """
    n_l, n_r = effect_l.n, effect_r.n
    if n_l + n_r < 2:
        raise InadmissibleSplitError("fewer than 2 influence contributions")
    pooled = np.concatenate([
        effect_l.influence * (n_union / n_l),
        -effect_r.influence * (n_union / n_r),
    ])
    var = float(pooled.var(ddof=1)) / n_union
    scale = (n_l * effect_l.second_moment + n_r * effect_r.second_moment) / n_union
    if not np.isfinite(var) or var <= REL_VAR_TOL * scale / n_union:
        raise InadmissibleSplitError("degenerate influence variance")
    return var


def _sandwich_wrap(sum_sq_infl: float, n_p: int, p_l: float, p_r: float,
                   t_l: float, t_r: float, scale: float) -> float:
    """Common tail of the sandwich estimators: subtract the subgroup-share
    centering term and apply the degeneracy floor."""
    var = (sum_sq_infl / n_p - (p_r * t_l + p_l * t_r) ** 2 / (p_l * p_r)) / n_p
    if not np.isfinite(var) or var <= REL_VAR_TOL * scale / n_p:
        raise InadmissibleSplitError("non-positive sandwich variance")
    return var


def _design_kept(fit: AnyFit, data: Dataset, mask: SubgroupMask) -> np.ndarray:
    Z, _ = build_design(data, mask, fit.spec)
    return Z[:, fit.kept]


def ipw_variance_pooled(
    data: Dataset,
    mask_l: SubgroupMask,
    mask_r: SubgroupMask,
    fit: LogisticFit,
    epsilon: float,
) -> float:
    """Sandwich variance of the IPW contrast with one propensity fit on the union.

    Each observation's influence combines its inverse-weighted outcome terms
    with a correction for propensity estimation: the score (A - e)X is
    projected through the inverse information matrix onto the difference of
    the child-specific outcome-by-score means.
    """
    union = SubgroupMask(mask_l.bits | mask_r.bits)
    rows = union.indices()
    in_l = mask_l.bits[rows]
    A = data.treatment[rows].astype(np.float64)
    Y = data.outcome[rows]
    X = _design_kept(fit, data, union)
    e = np.clip(predict_mean(fit, data, union), epsilon, 1.0 - epsilon)

    n_p = union.size
    n_l = int(in_l.sum())
    n_r = n_p - n_l
    if n_l == 0 or n_r == 0:
        raise InadmissibleSplitError("empty child")
    p_l, p_r = n_l / n_p, n_r / n_p

    w1 = A * Y / e
    w0 = (1.0 - A) * Y / (1.0 - e)
    delta = w1 - w0
    t_l = float(delta[in_l].mean())
    t_r = float(delta[~in_l].mean())
    t_hat = t_l - t_r

    h = A * Y * (1.0 - e) / e + (1.0 - A) * Y * e / (1.0 - e)
    H_l = (h[in_l, None] * X[in_l]).mean(axis=0)
    H_r = (h[~in_l, None] * X[~in_l]).mean(axis=0)
    info = (X * (e * (1.0 - e))[:, None]).T @ X / n_p
    try:
        c = scipy.linalg.cho_solve(scipy.linalg.cho_factor(info), H_l - H_r)
    except scipy.linalg.LinAlgError:
        raise InadmissibleSplitError("singular information matrix")

    base = np.where(in_l, delta / p_l, -delta / p_r) - t_hat
    infl = base - (A - e) * (X @ c)
    return _sandwich_wrap(float(np.sum(infl**2)), n_p, p_l, p_r, t_l, t_r,
                          float(np.mean(delta**2)))


def ipw_variance_per_child(
    data: Dataset,
    mask_l: SubgroupMask,
    mask_r: SubgroupMask,
    fit_l: LogisticFit,
    fit_r: LogisticFit,
    epsilon: float,
) -> float:
    """Sandwich variance of the IPW contrast with separate propensity fits per child.

    Each child's score correction is scaled by that child's share of the
    union and enters with the sign of the child's term in the contrast, so
    the per-observation influence is antisymmetric under relabeling the
    children (the child score blocks of the estimating-equation Jacobian
    carry the subgroup shares).
    """
    n_l, n_r = mask_l.size, mask_r.size
    n_p = n_l + n_r
    if n_l == 0 or n_r == 0:
        raise InadmissibleSplitError("empty child")
    p_l, p_r = n_l / n_p, n_r / n_p

    t_s = {}
    scale_num = 0.0
    corr_parts = {}
    delta_parts = {}
    for name, mask, fit in (("l", mask_l, fit_l), ("r", mask_r, fit_r)):
        rows = mask.indices()
        A = data.treatment[rows].astype(np.float64)
        Y = data.outcome[rows]
        X = _design_kept(fit, data, mask)
        e = np.clip(predict_mean(fit, data, mask), epsilon, 1.0 - epsilon)
        delta = A * Y / e - (1.0 - A) * Y / (1.0 - e)
        h = A * Y * (1.0 - e) / e + (1.0 - A) * Y * e / (1.0 - e)
        H = (h[:, None] * X).mean(axis=0)
        info = (X * (e * (1.0 - e))[:, None]).T @ X / len(rows)
        try:
            c = scipy.linalg.cho_solve(scipy.linalg.cho_factor(info), H)
        except scipy.linalg.LinAlgError:
            raise InadmissibleSplitError("singular information matrix")
        t_s[name] = float(delta.mean())
        corr_parts[name] = (A - e) * (X @ c)
        delta_parts[name] = delta
        scale_num += float(np.sum(delta**2))

    t_hat = t_s["l"] - t_s["r"]
    infl_l = (delta_parts["l"] - corr_parts["l"]) / p_l - t_hat
    infl_r = -(delta_parts["r"] - corr_parts["r"]) / p_r - t_hat
    sum_sq = float(np.sum(infl_l**2) + np.sum(infl_r**2))
    return _sandwich_wrap(sum_sq, n_p, p_l, p_r, t_s["l"], t_s["r"], scale_num / n_p)


def g_variance_pooled(
    data: Dataset,
    mask_l: SubgroupMask,
    mask_r: SubgroupMask,
    fit: AnyFit,
    epsilon: float = 0.0,
) -> float:
    """Sandwich variance of the g-formula contrast with one outcome fit on the union.

    Mirrors the pooled IPW sandwich: the outcome-model score Z(Y - g) is
    projected through the inverse of the design quadratic form onto the
    difference of child-mean prediction gradients. The base influence is
    centered within each child, which absorbs the subgroup-share centering
    term exactly and keeps the estimate a nonnegative mean of squares (the
    explicit-subtraction form is numerically fragile here because the
    g-formula contrast has little per-row noise relative to the between-
    child separation).
    """
    union = SubgroupMask(mask_l.bits | mask_r.bits)
    rows = union.indices()
    in_l = mask_l.bits[rows]
    Y = data.outcome[rows]
    Z = _design_kept(fit, data, union)
    beta = fit.coefficients[fit.kept]

    n_p = union.size
    n_l = int(in_l.sum())
    n_r = n_p - n_l
    if n_l == 0 or n_r == 0:
        raise InadmissibleSplitError("empty child")
    p_l, p_r = n_l / n_p, n_r / n_p

    if fit.family == "binomial":
        g1 = predict_mean(fit, data, union, treatment_override=1)
        g0 = predict_mean(fit, data, union, treatment_override=0)
        delta = g1 - g0
        ghat = predict_mean(fit, data, union)
        Z1, _ = build_design(data, union, fit.spec, treatment_override=1)
        Z0, _ = build_design(data, union, fit.spec, treatment_override=0)
        ddiff = (g1 * (1 - g1))[:, None] * Z1[:, fit.kept] - (g0 * (1 - g0))[:, None] * Z0[:, fit.kept]
        info = (Z * (ghat * (1 - ghat))[:, None]).T @ Z / n_p
        resid = Y - ghat
    else:
        zdiff = build_design_difference(data, union, fit.spec)[:, fit.kept]
        delta = zdiff @ beta
        ddiff = zdiff
        info = Z.T @ Z / n_p
        resid = Y - Z @ beta

    t_l = float(delta[in_l].mean())
    t_r = float(delta[~in_l].mean())
    D_l = ddiff[in_l].mean(axis=0)
    D_r = ddiff[~in_l].mean(axis=0)
    try:
        c = scipy.linalg.cho_solve(scipy.linalg.cho_factor(info), D_l - D_r)
    except scipy.linalg.LinAlgError:
        raise InadmissibleSplitError("singular design quadratic form")

    base = np.where(in_l, (delta - t_l) / p_l, -(delta - t_r) / p_r)
    infl = base + resid * (Z @ c)
    var = float(np.sum(infl**2)) / n_p / n_p
    scale = float(np.mean(delta**2))
    if not np.isfinite(var) or var <= REL_VAR_TOL * scale / n_p:
        raise InadmissibleSplitError("degenerate sandwich variance")
    return var


def fit_nuisance(
    data: Dataset,
    mask: SubgroupMask,
    kind: EstimatorKind,
    propensity_spec: Optional[DesignSpec],
    outcome_spec: Optional[DesignSpec],
    epsilon: float,
    outcome_family: str = "gaussian",
) -> NuisanceModels:
    """Fit the nuisance models an estimator needs on the masked rows."""
    propensity = None
    outcome = None
    if kind in (EstimatorKind.IPW, EstimatorKind.DR):
        if propensity_spec is None:
            raise ValueError("propensity spec required for IPW/DR")
        propensity = fit_logistic(data, mask, propensity_spec)
    if kind in (EstimatorKind.GFORMULA, EstimatorKind.DR):
        if outcome_spec is None:
            raise ValueError("outcome spec required for g-formula/DR")
        if outcome_family == "binomial":
            outcome = fit_logistic(data, mask, outcome_spec, response=data.outcome)
        else:
            outcome = fit_ols(data, mask, outcome_spec)
    return NuisanceModels(propensity=propensity, outcome=outcome, epsilon=epsilon)


def split_contrast(
    data: Dataset,
    mask_l: SubgroupMask,
    mask_r: SubgroupMask,
    kind: EstimatorKind,
    scope: NuisanceScope,
    propensity_spec: Optional[DesignSpec] = None,
    outcome_spec: Optional[DesignSpec] = None,
    epsilon: float = 0.01,
    variance_method: Optional[VarianceMethod] = None,
    outcome_family: str = "gaussian",
    whole_models: Optional[NuisanceModels] = None,
    min_per_arm: int = 1,
) -> SplitContrast:
    """Score one candidate split; raises InadmissibleSplitError when it cannot be scored."""
    if (mask_l.bits & mask_r.bits).any():
        raise ValueError("child masks must be disjoint")
    if mask_l.size == 0 or mask_r.size == 0:
        raise InadmissibleSplitError("empty child")
    variance_method = variance_method or default_variance_method(kind, scope)
    n_union = mask_l.size + mask_r.size

    try:
        if scope == NuisanceScope.CHILD:
            models_l = fit_nuisance(data, mask_l, kind, propensity_spec, outcome_spec,
                                    epsilon, outcome_family)
            models_r = fit_nuisance(data, mask_r, kind, propensity_spec, outcome_spec,
                                    epsilon, outcome_family)
        else:
            if scope == NuisanceScope.WHOLE:
                models = whole_models
                if models is None:
                    models = fit_nuisance(data, SubgroupMask.full(data.n), kind,
                                          propensity_spec, outcome_spec, epsilon, outcome_family)
            else:
                union = SubgroupMask(mask_l.bits | mask_r.bits)
                models = fit_nuisance(data, union, kind, propensity_spec, outcome_spec,
                                      epsilon, outcome_family)
            models_l = models_r = models
    except FitError as err:
        raise InadmissibleSplitError(f"nuisance fit failed: {err}") from err

    effect_l = ESTIMATE[kind](data, mask_l, models_l)
    effect_r = ESTIMATE[kind](data, mask_r, models_r)
    if kind in (EstimatorKind.IPW, EstimatorKind.DR) and (effect_l.arm_empty or effect_r.arm_empty):
        raise InadmissibleSplitError("empty child arm")
    for eff in (effect_l, effect_r):
        if min(eff.n_treated, eff.n_control) < min_per_arm:
            raise InadmissibleSplitError("child arm below minimum size")

    t_hat = effect_l.effect - effect_r.effect

    if variance_method == VarianceMethod.INFLUENCE:
        variance = if_variance(effect_l, effect_r, n_union)
    elif variance_method == VarianceMethod.PER_CHILD_SANDWICH:
        if kind != EstimatorKind.IPW:
            raise ValueError("per-child sandwich variance applies to the IPW estimator only")
        if scope != NuisanceScope.CHILD:
            raise ValueError("per-child sandwich variance requires child-scope fits")
        variance = ipw_variance_per_child(data, mask_l, mask_r,
                                          models_l.propensity, models_r.propensity, epsilon)
    else:
        if scope == NuisanceScope.CHILD:
            raise ValueError("pooled sandwich variance requires a shared fit (whole or parent scope)")
        if kind == EstimatorKind.IPW:
            variance = ipw_variance_pooled(data, mask_l, mask_r, models_l.propensity, epsilon)
        elif kind == EstimatorKind.GFORMULA:
            variance = g_variance_pooled(data, mask_l, mask_r, models_l.outcome)
        else:
            # The DR M-estimation variance has no design-matrix correction
            # term; it coincides with the influence-based estimator.
            variance = if_variance(effect_l, effect_r, n_union)

    statistic = t_hat**2 / variance
    if not np.isfinite(statistic):
        raise InadmissibleSplitError("non-finite statistic")
    return SplitContrast(t_hat=t_hat, variance=variance, statistic=statistic)
