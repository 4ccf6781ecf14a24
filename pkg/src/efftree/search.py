"""Vectorized split search: scores every candidate split of a node in batch.

For a node with fixed nuisance models (whole or parent scope), the splitting
statistic of every threshold / level-subset / ordinal-cut candidate is a
function of left-child aggregates of a small set of per-row quantities.
Those aggregates come from cumulative sums along each covariate's sort order
(or per-level sums for categorical covariates), so a node with n rows and C
candidates costs O(n log n + C) for the influence variance and
O(n q + C q^2) for the sandwich variances (q = design width), instead of
O(n C).

Child-scope fitting cannot be batched (each candidate refits its own
models); that path loops over candidates and scores each one via
``split_contrast``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Iterator, Optional

import numpy as np
import scipy.linalg

from .data import Categorical, Continuous, Dataset, SubgroupMask
from .estimators import (
    REL_VAR_TOL,
    EstimatorKind,
    InadmissibleSplitError,
    NuisanceModels,
    NuisanceScope,
    VarianceMethod,
    split_contrast,
    truncated_propensity,
)
from .glm import build_design, build_design_difference, predict_mean

MAX_CATEGORICAL_LEVELS = 15


class CategoricalCardinalityError(ValueError):
    """Categorical covariate has too many levels to enumerate subsets."""


@dataclass(frozen=True)
class SplitRule:
    """A binary split on one covariate.

    kind "threshold": left = {x < threshold}.
    kind "subset": left = {level in left_levels}; right_levels is the
    complement among the levels present when the rule was made.
    kind "ordinal_cut": left = {declared level index <= cut}.
    """

    column: str
    column_index: int
    kind: str
    threshold: Optional[float] = None
    left_levels: Optional[tuple[str, ...]] = None
    right_levels: Optional[tuple[str, ...]] = None
    cut: Optional[int] = None

    def describe(self, schema=None) -> str:
        if self.kind == "threshold":
            return f"{self.column} < {self.threshold:g}"
        if self.kind == "subset":
            return f"{self.column} in {{{','.join(self.left_levels)}}}"
        return f"{self.column} <= {self.cut}"

    def goes_left(self, data: Dataset, rows: np.ndarray) -> np.ndarray:
        """Left membership for the given rows; a categorical level matching
        neither side (unseen during training) is reported as right here and
        rerouted by the tree's larger-child policy."""
        values = data.covariates[self.column][rows]
        if self.kind == "threshold":
            return values < self.threshold
        if self.kind == "ordinal_cut":
            return values <= self.cut
        kind = data.schema.kind_of(self.column)
        left_codes = [kind.levels.index(lv) for lv in self.left_levels]
        return np.isin(values, left_codes)

    def is_known(self, data: Dataset, rows: np.ndarray) -> np.ndarray:
        """False for rows whose level matched neither recorded side."""
        if self.kind != "subset":
            return np.ones(len(rows), dtype=bool)
        kind = data.schema.kind_of(self.column)
        codes = [kind.levels.index(lv) for lv in self.left_levels + self.right_levels]
        return np.isin(data.covariates[self.column][rows], codes)


@dataclass
class _CovariateBlock:
    """Candidates of one covariate plus the left-aggregation map.

    ``aggregate(mat)`` turns an (n x m) per-row matrix into the (C x m)
    matrix of left-child column sums, one row per candidate. Rule objects
    are built on demand (only the winning candidate needs one).
    """

    n_rules: int
    make_rule: Callable[[int], SplitRule]
    aggregate: Callable[[np.ndarray], np.ndarray]

    def rules(self) -> list[SplitRule]:
        return [self.make_rule(j) for j in range(self.n_rules)]


def _categorical_subsets(present: list[int]) -> list[tuple[int, ...]]:
    """Canonical left-side subsets: every unordered binary partition of the
    present levels exactly once, smaller side (ties: the side holding the
    first present level) on the left, ordered by size then level indices."""
    k = len(present)
    if k > MAX_CATEGORICAL_LEVELS:
        raise CategoricalCardinalityError(
            f"{k} levels present; subset enumeration capped at {MAX_CATEGORICAL_LEVELS}"
        )
    subsets: list[tuple[int, ...]] = []
    for size in range(1, k // 2 + 1):
        for combo in itertools.combinations(present, size):
            if 2 * size == k and combo[0] != present[0]:
                continue
            subsets.append(combo)
    return subsets


def iter_candidate_blocks(data: Dataset, rows: np.ndarray) -> Iterator[_CovariateBlock]:
    """Per-covariate candidate blocks in deterministic enumeration order:
    column order, then ascending threshold / canonical subset order / cut."""
    schema = data.schema
    for col_idx, (name, kind) in enumerate(schema.columns):
        values = data.covariates[name][rows]
        if isinstance(kind, Continuous):
            order = np.argsort(values, kind="stable")
            v = values[order]
            boundaries = np.nonzero(np.diff(v) > 0)[0]
            if len(boundaries) == 0:
                continue
            thresholds = (v[boundaries] + v[boundaries + 1]) / 2.0

            def rule_cont(j, name=name, col_idx=col_idx, thresholds=thresholds):
                return SplitRule(name, col_idx, "threshold", threshold=float(thresholds[j]))

            def agg_cont(mat, order=order, boundaries=boundaries):
                return np.cumsum(mat[order], axis=0)[boundaries]

            yield _CovariateBlock(len(thresholds), rule_cont, agg_cont)
        else:
            counts = np.bincount(values, minlength=len(kind.levels))
            present = [c for c in range(len(kind.levels)) if counts[c] > 0]
            if len(present) < 2:
                continue
            if isinstance(kind, Categorical):
                subsets = _categorical_subsets(present)
                sel = np.zeros((len(subsets), len(kind.levels)))
                for j, left in enumerate(subsets):
                    sel[j, list(left)] = 1.0

                def rule_cat(j, name=name, col_idx=col_idx, subsets=subsets,
                             present=present, levels=kind.levels):
                    left = subsets[j]
                    right = tuple(c for c in present if c not in left)
                    return SplitRule(
                        name, col_idx, "subset",
                        left_levels=tuple(levels[c] for c in left),
                        right_levels=tuple(levels[c] for c in right),
                    )

                def agg_cat(mat, values=values, sel=sel, n_levels=len(kind.levels)):
                    level_sums = np.zeros((n_levels, mat.shape[1]))
                    np.add.at(level_sums, values, mat)
                    return sel @ level_sums

                yield _CovariateBlock(len(subsets), rule_cat, agg_cat)
            else:
                cuts = present[:-1]

                def rule_ord(j, name=name, col_idx=col_idx, cuts=cuts):
                    return SplitRule(name, col_idx, "ordinal_cut", cut=int(cuts[j]))

                def agg_ord(mat, values=values, cuts=cuts, n_levels=len(kind.levels)):
                    level_sums = np.zeros((n_levels, mat.shape[1]))
                    np.add.at(level_sums, values, mat)
                    return np.cumsum(level_sums, axis=0)[cuts]

                yield _CovariateBlock(len(cuts), rule_ord, agg_ord)


def enumerate_splits(data: Dataset, mask: SubgroupMask) -> list[SplitRule]:
    """All permissible split rules for the masked rows, in scan order."""
    rules: list[SplitRule] = []
    for block in iter_candidate_blocks(data, mask.indices()):
        rules.extend(block.rules())
    return rules


@dataclass
class BestSplit:
    rule: SplitRule
    statistic: float
    t_hat: float
    variance: float
    left_local: np.ndarray  # bool over node rows
    n_candidates: int
    n_admissible: int


@dataclass
class _NodeTables:
    """Per-row quantities entering every candidate statistic at one node."""

    delta: np.ndarray              # per-row effect contribution
    treated: np.ndarray            # A as float
    grad: Optional[np.ndarray]     # rows whose child means form the projected vector
    score: Optional[np.ndarray]    # per-row model score
    info_factor: Optional[tuple]   # Cholesky factor of the information matrix
    score_outer: Optional[np.ndarray]
    score_total: Optional[np.ndarray]
    dscore_total: Optional[np.ndarray]
    grad_total: Optional[np.ndarray]
    corr_sign: float
    centered: bool                 # center the base influence within children
    msq: float                     # mean(delta^2), degeneracy scale


def node_tables(
    data: Dataset,
    rows: np.ndarray,
    kind: EstimatorKind,
    variance_method: VarianceMethod,
    models: NuisanceModels,
) -> _NodeTables:
    mask = SubgroupMask.from_indices(data.n, rows)
    A = data.treatment[rows].astype(np.float64)
    Y = data.outcome[rows]

    if kind in (EstimatorKind.IPW, EstimatorKind.DR):
        e = truncated_propensity(models, data, mask)
    if kind in (EstimatorKind.GFORMULA, EstimatorKind.DR):
        g1 = predict_mean(models.outcome, data, mask, treatment_override=1)
        g0 = predict_mean(models.outcome, data, mask, treatment_override=0)
        if models.outcome.family != "binomial":
            # computed from the design difference so that specs without
            # treatment interactions give an exactly constant contrast
            zdiff = build_design_difference(data, mask, models.outcome.spec)[:, models.outcome.kept]
            gdelta = zdiff @ models.outcome.coefficients[models.outcome.kept]
        else:
            gdelta = g1 - g0

    if kind == EstimatorKind.IPW:
        delta = A * Y / e - (1.0 - A) * Y / (1.0 - e)
    elif kind == EstimatorKind.GFORMULA:
        delta = gdelta
    else:
        delta = gdelta + A * (Y - g1) / e - (1.0 - A) * (Y - g0) / (1.0 - e)

    grad = score = info_factor = score_outer = score_total = None
    corr_sign = 0.0
    if variance_method == VarianceMethod.POOLED_SANDWICH:
        if kind == EstimatorKind.IPW:
            fit = models.propensity
            X = build_design(data, mask, fit.spec)[0][:, fit.kept]
            h = A * Y * (1.0 - e) / e + (1.0 - A) * Y * e / (1.0 - e)
            grad = h[:, None] * X
            score = (A - e)[:, None] * X
            info = (X * (e * (1.0 - e))[:, None]).T @ X / len(rows)
            corr_sign = -1.0
        else:
            fit = models.outcome
            Z = build_design(data, mask, fit.spec)[0][:, fit.kept]
            if fit.family == "binomial":
                ghat = predict_mean(fit, data, mask)
                Z1 = build_design(data, mask, fit.spec, treatment_override=1)[0][:, fit.kept]
                Z0 = build_design(data, mask, fit.spec, treatment_override=0)[0][:, fit.kept]
                grad = (g1 * (1 - g1))[:, None] * Z1 - (g0 * (1 - g0))[:, None] * Z0
                info = (Z * (ghat * (1 - ghat))[:, None]).T @ Z / len(rows)
                resid = Y - ghat
            else:
                grad = build_design_difference(data, mask, fit.spec)[:, fit.kept]
                info = Z.T @ Z / len(rows)
                resid = Y - Z @ fit.coefficients[fit.kept]
            score = resid[:, None] * Z
            corr_sign = 1.0
        try:
            info_factor = scipy.linalg.cho_factor(info)
        except scipy.linalg.LinAlgError:
            raise InadmissibleSplitError("singular information matrix")
        score_outer = score.T @ score
        score_total = score.sum(axis=0)

    return _NodeTables(
        delta=delta,
        treated=A,
        grad=grad,
        score=score,
        info_factor=info_factor,
        score_outer=score_outer,
        score_total=score_total,
        dscore_total=(score * delta[:, None]).sum(axis=0) if score is not None else None,
        grad_total=grad.sum(axis=0) if grad is not None else None,
        corr_sign=corr_sign,
        centered=(kind != EstimatorKind.IPW),
        msq=float(np.mean(delta**2)),
    )


def _packed_matrix(tables: _NodeTables, sandwich: bool) -> np.ndarray:
    """Per-row matrix whose left-child column sums drive every statistic."""
    n = len(tables.delta)
    cols = [np.ones(n), tables.treated, tables.delta, tables.delta**2]
    if sandwich:
        parts = cols + [tables.grad, tables.score * tables.delta[:, None]]
        if tables.centered:
            parts.append(tables.score)
        return np.column_stack(parts)
    return np.column_stack(cols)


def candidate_statistics(
    tables: _NodeTables,
    left_agg: np.ndarray,
    n_p: int,
    min_node: int,
    min_per_arm: int,
    variance_method: VarianceMethod,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """(statistic, admissible, t_hat, variance) arrays for one candidate batch."""
    sandwich = variance_method != VarianceMethod.INFLUENCE
    q = tables.grad.shape[1] if sandwich else 0

    left_counts = left_agg[:, 0]
    left_treated = left_agg[:, 1]
    left_delta = left_agg[:, 2]
    left_delta_sq = left_agg[:, 3]

    total_treated = float(tables.treated.sum())
    total_delta = float(tables.delta.sum())
    total_delta_sq = float(np.sum(tables.delta**2))

    n_l = left_counts
    n_r = n_p - n_l
    m1_l = left_treated
    m1_r = total_treated - m1_l
    admissible = (
        (n_l >= min_node)
        & (n_r >= min_node)
        & (m1_l >= min_per_arm)
        & (n_l - m1_l >= min_per_arm)
        & (m1_r >= min_per_arm)
        & (n_r - m1_r >= min_per_arm)
    )

    with np.errstate(divide="ignore", invalid="ignore"):
        p_l = n_l / n_p
        p_r = n_r / n_p
        t_l = left_delta / n_l
        t_r = (total_delta - left_delta) / n_r
        t_hat = t_l - t_r

        if not sandwich:
            ss_l = left_delta_sq - n_l * t_l**2
            ss_r = (total_delta_sq - left_delta_sq) - n_r * t_r**2
            pooled_ss = ss_l / p_l**2 + ss_r / p_r**2
            variance = pooled_ss / (n_p - 1) / n_p
        else:
            left_grad = left_agg[:, 4:4 + q]
            left_dscore = left_agg[:, 4 + q:4 + 2 * q]
            d_diff = left_grad / n_l[:, None] - (tables.grad_total[None, :] - left_grad) / n_r[:, None]
            c = scipy.linalg.cho_solve(tables.info_factor, d_diff.T).T  # (C, q)
            corr_sq = np.einsum("cq,qk,ck->c", c, tables.score_outer, c)
            if tables.centered:
                # base influence centered within each child: nonnegative
                # mean of squares, no explicit centering subtraction
                base_sq = (
                    (left_delta_sq - n_l * t_l**2) / p_l**2
                    + ((total_delta_sq - left_delta_sq) - n_r * t_r**2) / p_r**2
                )
                left_score = left_agg[:, 4 + 2 * q:4 + 3 * q]
                right_score = tables.score_total[None, :] - left_score
                base_score = (
                    (left_dscore - t_l[:, None] * left_score) / p_l[:, None]
                    - ((tables.dscore_total[None, :] - left_dscore) - t_r[:, None] * right_score)
                    / p_r[:, None]
                )
                cross = np.einsum("cq,cq->c", base_score, c)
                variance = (base_sq + 2.0 * tables.corr_sign * cross + corr_sq) / n_p / n_p
            else:
                base_sq = (
                    left_delta_sq / p_l**2
                    - 2.0 * t_hat * left_delta / p_l
                    + n_l * t_hat**2
                    + (total_delta_sq - left_delta_sq) / p_r**2
                    + 2.0 * t_hat * (total_delta - left_delta) / p_r
                    + n_r * t_hat**2
                )
                base_score = (
                    left_dscore / p_l[:, None]
                    - (tables.dscore_total[None, :] - left_dscore) / p_r[:, None]
                    - t_hat[:, None] * tables.score_total[None, :]
                )
                cross = np.einsum("cq,cq->c", base_score, c)
                sum_sq = base_sq + 2.0 * tables.corr_sign * cross + corr_sq
                variance = (sum_sq / n_p - (p_r * t_l + p_l * t_r) ** 2 / (p_l * p_r)) / n_p

        floor = REL_VAR_TOL * tables.msq / n_p
        ok = admissible & np.isfinite(variance) & (variance > floor)
        statistic = np.where(ok, t_hat**2 / np.where(ok, variance, 1.0), -np.inf)
    ok &= np.isfinite(statistic)
    statistic = np.where(ok, statistic, -np.inf)
    return statistic, ok, t_hat, variance


def find_best_split(
    data: Dataset,
    rows: np.ndarray,
    kind: EstimatorKind,
    scope: NuisanceScope,
    variance_method: VarianceMethod,
    models: Optional[NuisanceModels],
    min_node: int,
    min_per_arm: int,
    propensity_spec=None,
    outcome_spec=None,
    epsilon: float = 0.01,
    outcome_family: str = "gaussian",
) -> Optional[BestSplit]:
    """Best admissible candidate split of the node, or None.

    Ties on the statistic keep the earlier candidate in enumeration order
    (column order, then threshold / canonical subset / cut order).
    """
    if scope == NuisanceScope.CHILD:
        return _find_best_split_childfit(
            data, rows, kind, variance_method, min_node, min_per_arm,
            propensity_spec, outcome_spec, epsilon, outcome_family,
        )

    n_p = len(rows)
    tables = node_tables(data, rows, kind, variance_method, models)
    sandwich = variance_method != VarianceMethod.INFLUENCE
    mat = _packed_matrix(tables, sandwich)

    best = None  # (stat, rule, t_hat, var)
    n_cand = 0
    n_adm = 0
    for block in iter_candidate_blocks(data, rows):
        left_agg = block.aggregate(mat)
        stats, adm, t_hats, variances = candidate_statistics(
            tables, left_agg, n_p, min_node, min_per_arm, variance_method,
        )
        n_cand += block.n_rules
        n_adm += int(adm.sum())
        if not adm.any():
            continue
        j = int(np.argmax(stats))
        if stats[j] > 0.0 and (best is None or stats[j] > best[0]):
            best = (float(stats[j]), block.make_rule(j), float(t_hats[j]), float(variances[j]))
    if best is None:
        return None

    stat, rule, t_hat, variance = best
    # Rebuild the winner from its rule and rescore from the realized
    # partition, so the stored values match the partition exactly even if a
    # midpoint threshold rounded onto a data value.
    left_local = rule.goes_left(data, rows)
    left_agg = _packed_matrix(tables, sandwich)[left_local].sum(axis=0)[None, :]
    stats, adm, t_hats, variances = candidate_statistics(
        tables, left_agg, n_p, min_node, min_per_arm, variance_method,
    )
    if not adm[0] or stats[0] <= 0.0:
        return None
    return BestSplit(
        rule=rule,
        statistic=float(stats[0]),
        t_hat=float(t_hats[0]),
        variance=float(variances[0]),
        left_local=left_local,
        n_candidates=n_cand,
        n_admissible=n_adm,
    )


def _find_best_split_childfit(
    data, rows, kind, variance_method, min_node, min_per_arm,
    propensity_spec, outcome_spec, epsilon, outcome_family,
) -> Optional[BestSplit]:
    """Candidate loop with per-child nuisance refits (child scope)."""
    n = data.n
    best = None
    n_cand = 0
    n_adm = 0
    for block in iter_candidate_blocks(data, rows):
        for rule in block.rules():
            n_cand += 1
            left_local = rule.goes_left(data, rows)
            n_l = int(left_local.sum())
            if n_l < min_node or len(rows) - n_l < min_node:
                continue
            mask_l = SubgroupMask.from_indices(n, rows[left_local])
            mask_r = SubgroupMask.from_indices(n, rows[~left_local])
            try:
                contrast = split_contrast(
                    data, mask_l, mask_r, kind, NuisanceScope.CHILD,
                    propensity_spec=propensity_spec, outcome_spec=outcome_spec,
                    epsilon=epsilon, variance_method=variance_method,
                    outcome_family=outcome_family, min_per_arm=min_per_arm,
                )
            except InadmissibleSplitError:
                continue
            n_adm += 1
            if contrast.statistic > 0.0 and (best is None or contrast.statistic > best[0]):
                best = (contrast.statistic, rule, left_local, contrast.t_hat, contrast.variance)
    if best is None:
        return None
    stat, rule, left_local, t_hat, variance = best
    return BestSplit(rule, stat, t_hat, variance, left_local, n_cand, n_adm)
