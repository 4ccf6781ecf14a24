"""Final tree selection on a validation set, and bootstrap intervals for a fixed tree.

Each candidate subtree is scored by recomputing its internal-node splitting
statistics from validation rows routed down the tree and penalizing the
internal-node count; the candidate maximizing this validation split
complexity wins, ties going to the smaller tree. Bootstrap intervals
re-estimate terminal effects on resamples while keeping the structure fixed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import Dataset, SubgroupMask
from .estimators import (
    ESTIMATE,
    EstimatorKind,
    FitError,
    InadmissibleSplitError,
    NuisanceModels,
    NuisanceScope,
    VarianceMethod,
    fit_nuisance,
    split_contrast,
)
from .prune import PruneSequence
from .tree import GrowConfig, Tree

__all__ = [
    "validation_complexity",
    "validation_statistics",
    "select_final",
    "SelectionTrace",
    "bootstrap_effects",
    "TerminalInterval",
]


def _route_rows_per_node(tree: Tree, data: Dataset) -> dict[int, np.ndarray]:
    """Row indices of `data` reaching each node of the tree."""
    reach: dict[int, np.ndarray] = {tree.root_id: np.arange(data.n)}
    order = [tree.root_id]
    for node_id in order:
        nd = tree.node(node_id)
        if nd.is_terminal:
            continue
        rows = reach[node_id]
        left = nd.rule.goes_left(data, rows)
        known = nd.rule.is_known(data, rows)
        if not known.all():
            bigger_left = tree.node(nd.left).n >= tree.node(nd.right).n
            left = np.where(known, left, bigger_left)
        reach[nd.left] = rows[left]
        reach[nd.right] = rows[~left]
        order.extend([nd.left, nd.right])
    return reach


def validation_statistics(
    tree: Tree,
    validation: Dataset,
    config: Optional[GrowConfig] = None,
    whole_models: Optional[NuisanceModels] = None,
    reuse_training_fits: bool = False,
) -> dict[int, float]:
    """Splitting statistic of each internal node recomputed on validation rows.

    Nuisance models are refit on the validation rows per the configured
    scope unless ``reuse_training_fits`` is set, in which case each node's
    training-time models are used to score validation rows. A node whose
    statistic cannot be computed (empty child arm, failed fit, degenerate
    variance) contributes 0.
    """
    config = config or tree.config
    reach = _route_rows_per_node(tree, validation)
    stats: dict[int, float] = {}
    if config.scope == NuisanceScope.WHOLE and whole_models is None and not reuse_training_fits:
        try:
            whole_models = fit_nuisance(
                validation, SubgroupMask.full(validation.n), config.estimator,
                config.propensity_spec, config.outcome_spec, config.epsilon,
                config.outcome_family,
            )
        except FitError:
            whole_models = None

    for node_id in tree.internal_ids():
        nd = tree.node(node_id)
        rows = reach[node_id]
        left_rows = reach[nd.left]
        right_rows = reach[nd.right]
        if len(left_rows) == 0 or len(right_rows) == 0:
            stats[node_id] = 0.0
            continue
        mask_l = SubgroupMask.from_indices(validation.n, left_rows)
        mask_r = SubgroupMask.from_indices(validation.n, right_rows)
        try:
            if reuse_training_fits:
                contrast = _contrast_with_models(
                    validation, mask_l, mask_r, config, nd.models or whole_models
                )
            else:
                contrast = split_contrast(
                    validation, mask_l, mask_r, config.estimator, config.scope,
                    propensity_spec=config.propensity_spec,
                    outcome_spec=config.outcome_spec,
                    epsilon=config.epsilon,
                    variance_method=config.variance_method,
                    outcome_family=config.outcome_family,
                    whole_models=whole_models,
                    min_per_arm=1,
                )
            stats[node_id] = contrast.statistic
        except (InadmissibleSplitError, FitError, ValueError):
            stats[node_id] = 0.0
    return stats


def _contrast_with_models(validation, mask_l, mask_r, config, models):
    """Validation statistic from stored training-time models."""
    from .estimators import (
        SplitContrast,
        g_variance_pooled,
        if_variance,
        ipw_variance_pooled,
    )

    if models is None:
        raise InadmissibleSplitError("no stored models for node")
    effect_l = ESTIMATE[config.estimator](validation, mask_l, models)
    effect_r = ESTIMATE[config.estimator](validation, mask_r, models)
    if config.estimator in (EstimatorKind.IPW, EstimatorKind.DR):
        if effect_l.arm_empty or effect_r.arm_empty:
            raise InadmissibleSplitError("empty child arm")
    t_hat = effect_l.effect - effect_r.effect
    n_union = mask_l.size + mask_r.size
    if config.variance_method == VarianceMethod.INFLUENCE or config.estimator == EstimatorKind.DR:
        variance = if_variance(effect_l, effect_r, n_union)
    elif config.estimator == EstimatorKind.IPW:
        variance = ipw_variance_pooled(validation, mask_l, mask_r, models.propensity, config.epsilon)
    else:
        variance = g_variance_pooled(validation, mask_l, mask_r, models.outcome)
    return SplitContrast(t_hat=t_hat, variance=variance, statistic=t_hat**2 / variance)


def validation_complexity(
    tree: Tree,
    validation: Dataset,
    lam: float,
    config: Optional[GrowConfig] = None,
    reuse_training_fits: bool = False,
) -> float:
    """Validation-set split complexity: recomputed statistics minus lam per internal node."""
    stats = validation_statistics(tree, validation, config, reuse_training_fits=reuse_training_fits)
    return sum(stats.values()) - lam * len(stats)


@dataclass
class SelectionTrace:
    """Per-candidate validation complexities and the chosen index."""

    n_internal: list[int]
    complexities: list[float]
    chosen: int

    def to_dict(self) -> dict:
        return {
            "candidates": [
                {"index": i, "internal_nodes": n, "validation_complexity": c}
                for i, (n, c) in enumerate(zip(self.n_internal, self.complexities))
            ],
            "chosen": self.chosen,
        }


def select_final(
    sequence: PruneSequence,
    validation: Dataset,
    lam: float,
    config: Optional[GrowConfig] = None,
    reuse_training_fits: bool = False,
) -> tuple[Tree, SelectionTrace]:
    """Candidate maximizing validation split complexity; ties prefer fewer internal nodes.

    A node's validation statistic is the same in every candidate that
    contains it (pruning preserves ancestors), so the statistics are
    computed once on the full tree and summed per candidate.
    """
    if not sequence.trees:
        raise ValueError("empty prune sequence")
    full_stats = validation_statistics(
        sequence.trees[0], validation, config, reuse_training_fits=reuse_training_fits
    )
    complexities = [
        sum(full_stats[i] for i in t.internal_ids()) - lam * t.n_internal()
        for t in sequence.trees
    ]
    sizes = [t.n_internal() for t in sequence.trees]
    chosen = 0
    for i in range(1, len(sequence.trees)):
        better = complexities[i] > complexities[chosen]
        tie_smaller = complexities[i] == complexities[chosen] and sizes[i] < sizes[chosen]
        if better or tie_smaller:
            chosen = i
    return sequence.trees[chosen], SelectionTrace(sizes, complexities, chosen)


@dataclass
class TerminalInterval:
    node_id: int
    point: float
    lower: float
    upper: float
    n_replicates: int
    n_dropped: int


def bootstrap_effects(
    tree: Tree,
    data: Dataset,
    B: int = 1000,
    level: float = 0.95,
    seed: int = 0,
    config: Optional[GrowConfig] = None,
) -> list[TerminalInterval]:
    """Percentile bootstrap intervals for each terminal effect of a fixed tree.

    Rows are resampled with replacement; terminal effects are re-estimated
    with the configured estimator on each resample, structure unchanged. A
    replicate leaving some terminal with an empty treatment arm (or an
    unfittable model) is redrawn up to 10 times, then dropped and counted.
    Replicate b draws from an independent substream of (seed, b), so results
    do not depend on evaluation order.
    """
    if B < 1:
        raise ValueError("B must be >= 1")
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    config = config or tree.config
    terminal_ids = tree.terminal_ids()
    draws: dict[int, list[float]] = {t: [] for t in terminal_ids}
    n_dropped = 0
    for b in range(B):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(b,)))
        effects = None
        for _ in range(10):
            idx = rng.integers(0, data.n, size=data.n)
            effects = _terminal_effects(tree, data.take(idx), config, terminal_ids)
            if effects is not None:
                break
        if effects is None:
            n_dropped += 1
            continue
        for t in terminal_ids:
            draws[t].append(effects[t])

    alpha = (1.0 - level) / 2.0
    out = []
    for t in terminal_ids:
        values = np.asarray(draws[t])
        if len(values) == 0:
            raise RuntimeError("all bootstrap replicates were dropped")
        out.append(
            TerminalInterval(
                node_id=t,
                point=tree.node(t).effect.effect,
                lower=float(np.quantile(values, alpha)),
                upper=float(np.quantile(values, 1.0 - alpha)),
                n_replicates=len(values),
                n_dropped=n_dropped,
            )
        )
    return out


def _terminal_effects(tree: Tree, sample: Dataset, config: GrowConfig,
                      terminal_ids: list[int]) -> Optional[dict[int, float]]:
    """Terminal effects on one bootstrap sample, or None if the replicate is unusable."""
    reach = _route_rows_per_node(tree, sample)
    whole_models = None
    if config.scope == NuisanceScope.WHOLE:
        try:
            whole_models = fit_nuisance(
                sample, SubgroupMask.full(sample.n), config.estimator,
                config.propensity_spec, config.outcome_spec, config.epsilon,
                config.outcome_family,
            )
        except FitError:
            return None
    effects: dict[int, float] = {}
    for t in terminal_ids:
        rows = reach[t]
        if len(rows) == 0:
            return None
        mask = SubgroupMask.from_indices(sample.n, rows)
        if whole_models is not None:
            models = whole_models
        else:
            try:
                models = fit_nuisance(
                    sample, mask, config.estimator, config.propensity_spec,
                    config.outcome_spec, config.epsilon, config.outcome_family,
                )
            except FitError:
                return None
        effect = ESTIMATE[config.estimator](sample, mask, models)
        if config.estimator in (EstimatorKind.IPW, EstimatorKind.DR) and effect.arm_empty:
            return None
        effects[t] = effect.effect
    return effects
