"""Greedy growth of the maximum-sized effect tree, prediction, and serialization.

Growth recursively splits nodes on the candidate with the largest splitting
statistic, stopping when no admissible candidate remains, the depth cap is
reached, or children would fall below the node- or arm-size minimums. Node
effects are computed with the configured estimator; under parent scope each
node's models are fit on its own rows (falling back to the parent's models
if that fit fails), under whole scope a single pre-growth fit is shared.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .data import Categorical, Continuous, Dataset, Ordinal, Schema, SubgroupMask
from .estimators import (
    ESTIMATE,
    EstimatorKind,
    FitError,
    NodeEffect,
    NuisanceModels,
    NuisanceScope,
    VarianceMethod,
    default_variance_method,
    fit_nuisance,
)
from .glm import DesignSpec, parse_spec
from .search import SplitRule, find_best_split

logger = logging.getLogger(__name__)

TREE_FORMAT = "cit-tree/1"


@dataclass
class GrowConfig:
    """Everything growth needs: estimator, nuisance specs, scope, variance
    method, stopping limits, truncation bound, and the seed recorded with
    the tree."""

    estimator: EstimatorKind
    propensity_spec: Optional[DesignSpec] = None
    outcome_spec: Optional[DesignSpec] = None
    scope: NuisanceScope = NuisanceScope.PARENT
    variance_method: Optional[VarianceMethod] = None
    min_node: int = 30
    min_per_arm: int = 10
    max_depth: int = 10
    epsilon: float = 0.01
    seed: int = 0
    outcome_family: str = "gaussian"

    def __post_init__(self):
        self.estimator = EstimatorKind(self.estimator)
        self.scope = NuisanceScope(self.scope)
        if self.variance_method is None:
            self.variance_method = default_variance_method(self.estimator, self.scope)
        else:
            self.variance_method = VarianceMethod(self.variance_method)
        if not (self.min_node >= 2 * self.min_per_arm >= 2):
            raise ValueError("require min_node >= 2*min_per_arm >= 2")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if not 0.0 < self.epsilon < 0.5:
            raise ValueError("epsilon must lie in (0, 0.5)")
        if self.outcome_family not in ("gaussian", "binomial"):
            raise ValueError("outcome_family must be gaussian or binomial")
        if self.estimator in (EstimatorKind.IPW, EstimatorKind.DR) and self.propensity_spec is None:
            raise ValueError(f"estimator {self.estimator.value} requires a propensity spec")
        if self.estimator in (EstimatorKind.GFORMULA, EstimatorKind.DR) and self.outcome_spec is None:
            raise ValueError(f"estimator {self.estimator.value} requires an outcome spec")
        if self.variance_method == VarianceMethod.PER_CHILD_SANDWICH:
            if self.estimator != EstimatorKind.IPW or self.scope != NuisanceScope.CHILD:
                raise ValueError("per-child sandwich variance requires the IPW estimator with child scope")
        if self.variance_method == VarianceMethod.POOLED_SANDWICH:
            if self.scope == NuisanceScope.CHILD:
                raise ValueError("pooled sandwich variance requires whole or parent scope")
            if self.estimator == EstimatorKind.DR:
                # the DR M-estimation variance reduces to the influence form
                self.variance_method = VarianceMethod.INFLUENCE

    @classmethod
    def from_strings(cls, estimator: str, treatment_name: str,
                     propensity: Optional[str] = None, outcome: Optional[str] = None,
                     **kwargs) -> "GrowConfig":
        return cls(
            estimator=EstimatorKind(estimator),
            propensity_spec=parse_spec(propensity, treatment_name) if propensity else None,
            outcome_spec=parse_spec(outcome, treatment_name) if outcome else None,
            **kwargs,
        )


@dataclass
class TreeNode:
    id: int
    depth: int
    n: int
    effect: NodeEffect
    rule: Optional[SplitRule] = None
    statistic: Optional[float] = None
    left: Optional[int] = None
    right: Optional[int] = None
    # training-time attachments, not serialized
    rows: Optional[np.ndarray] = None
    models: Optional[NuisanceModels] = None
    n_candidates: int = 0
    n_admissible: int = 0

    @property
    def is_terminal(self) -> bool:
        return self.rule is None


class Tree:
    """Binary effect tree over a dataset schema."""

    def __init__(self, nodes: dict[int, TreeNode], root_id: int, config: GrowConfig,
                 schema: Schema):
        self.nodes = nodes
        self.root_id = root_id
        self.config = config
        self.schema = schema

    def node(self, node_id: int) -> TreeNode:
        return self.nodes[node_id]

    def internal_ids(self) -> list[int]:
        return sorted(i for i, nd in self.nodes.items() if not nd.is_terminal)

    def terminal_ids(self) -> list[int]:
        return sorted(i for i, nd in self.nodes.items() if nd.is_terminal)

    def n_internal(self) -> int:
        return sum(1 for nd in self.nodes.values() if not nd.is_terminal)

    def descendants(self, node_id: int) -> list[int]:
        """Strict descendants of a node, preorder."""
        out: list[int] = []
        nd = self.nodes[node_id]
        for child in (nd.left, nd.right):
            if child is not None:
                out.append(child)
                out.extend(self.descendants(child))
        return out

    def branch_internal(self, node_id: int) -> list[int]:
        """Internal nodes of the subtree rooted at node_id, itself included."""
        return [i for i in [node_id] + self.descendants(node_id) if not self.nodes[i].is_terminal]

    def prune_at(self, node_id: int) -> "Tree":
        """Copy of the tree with all descendants of node_id removed; the node
        keeps its effect estimate and becomes terminal."""
        drop = set(self.descendants(node_id))
        nodes = {}
        for i, nd in self.nodes.items():
            if i in drop:
                continue
            nd = replace(nd)
            if i == node_id:
                nd.rule = None
                nd.statistic = None
                nd.left = None
                nd.right = None
            nodes[i] = nd
        return Tree(nodes, self.root_id, self.config, self.schema)

    def route(self, data: Dataset, rows: Optional[np.ndarray] = None) -> np.ndarray:
        """Terminal node id reached by each row.

        Rows with a categorical level unseen at the split are sent to the
        child with the larger training membership.
        """
        if data.schema != self.schema:
            raise ValueError("dataset schema does not match the tree's schema")
        if rows is None:
            rows = np.arange(data.n)
        out = np.empty(len(rows), dtype=np.int64)
        self._route_into(self.root_id, data, rows, np.arange(len(rows)), out)
        return out

    def _route_into(self, node_id, data, rows, positions, out):
        nd = self.nodes[node_id]
        if nd.is_terminal:
            out[positions] = node_id
            return
        sub = rows[positions]
        left = nd.rule.goes_left(data, sub)
        known = nd.rule.is_known(data, sub)
        if not known.all():
            bigger_left = self.nodes[nd.left].n >= self.nodes[nd.right].n
            logger.info(
                "%d rows with unseen level for %s routed to the larger child",
                int((~known).sum()), nd.rule.column,
            )
            left = np.where(known, left, bigger_left)
        self._route_into(nd.left, data, rows, positions[left], out)
        self._route_into(nd.right, data, rows, positions[~left], out)

    def predict(self, data: Dataset, rows: Optional[np.ndarray] = None) -> np.ndarray:
        """Estimated subgroup effect of the terminal node reached by each row."""
        terminal = self.route(data, rows)
        effects = {i: self.nodes[i].effect.effect for i in self.terminal_ids()}
        return np.vectorize(effects.get, otypes=[np.float64])(terminal)

    # ------------------------------------------------------------------
    # serialization

    def to_dict(self) -> dict:
        nodes = []
        for i in sorted(self.nodes):
            nd = self.nodes[i]
            rule = None
            if nd.rule is not None:
                rule = {
                    "column": nd.rule.column,
                    "column_index": nd.rule.column_index,
                    "kind": nd.rule.kind,
                }
                if nd.rule.kind == "threshold":
                    rule["threshold"] = nd.rule.threshold
                elif nd.rule.kind == "subset":
                    rule["left_levels"] = list(nd.rule.left_levels)
                    rule["right_levels"] = list(nd.rule.right_levels)
                else:
                    rule["cut"] = nd.rule.cut
            nodes.append(
                {
                    "id": nd.id,
                    "depth": nd.depth,
                    "n": nd.n,
                    "effect": nd.effect.effect,
                    "mu1": nd.effect.mu1,
                    "mu0": nd.effect.mu0,
                    "rule": rule,
                    "statistic": nd.statistic,
                    "left": nd.left,
                    "right": nd.right,
                }
            )
        return {
            "format": TREE_FORMAT,
            "root": self.root_id,
            "estimator": self.config.estimator.value,
            "nodes": nodes,
            "schema": schema_to_dict(self.schema),
            "config": config_to_dict(self.config, self.schema.treatment),
        }

    def to_json(self, indent: Optional[int] = None) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=indent)

    def render_text(self) -> str:
        lines: list[str] = []

        def walk(node_id: int, prefix: str) -> None:
            nd = self.nodes[node_id]
            head = f"node {nd.id}: n={nd.n} effect={nd.effect.effect:.4f}"
            if not nd.is_terminal:
                head += f" | split {nd.rule.describe()} (G={nd.statistic:.3f})"
            lines.append(prefix + head)
            if not nd.is_terminal:
                walk(nd.left, prefix + "  ")
                walk(nd.right, prefix + "  ")

        walk(self.root_id, "")
        return "\n".join(lines) + "\n"


def schema_to_dict(schema: Schema) -> dict:
    cols = []
    for name, kind in schema.columns:
        if isinstance(kind, Continuous):
            cols.append({"name": name, "kind": "continuous"})
        elif isinstance(kind, Categorical):
            cols.append({"name": name, "kind": "categorical", "levels": list(kind.levels)})
        else:
            cols.append({"name": name, "kind": "ordinal", "levels": list(kind.levels)})
    return {"covariates": cols, "treatment": schema.treatment, "outcome": schema.outcome}


def schema_from_dict(payload: dict) -> Schema:
    cols = []
    for col in payload["covariates"]:
        if col["kind"] == "continuous":
            kind = Continuous()
        elif col["kind"] == "categorical":
            kind = Categorical(tuple(col["levels"]))
        elif col["kind"] == "ordinal":
            kind = Ordinal(tuple(col["levels"]))
        else:
            raise ValueError(f"unknown covariate kind {col['kind']!r}")
        cols.append((col["name"], kind))
    return Schema(tuple(cols), payload["treatment"], payload["outcome"])


def config_to_dict(config: GrowConfig, treatment_name: str) -> dict:
    return {
        "estimator": config.estimator.value,
        "scope": config.scope.value,
        "variance_method": config.variance_method.value,
        "propensity_spec": None if config.propensity_spec is None
        else config.propensity_spec.to_string(treatment_name),
        "outcome_spec": None if config.outcome_spec is None
        else config.outcome_spec.to_string(treatment_name),
        "min_node": config.min_node,
        "min_per_arm": config.min_per_arm,
        "max_depth": config.max_depth,
        "epsilon": config.epsilon,
        "seed": config.seed,
        "outcome_family": config.outcome_family,
    }


def tree_from_dict(payload: dict, treatment_name: Optional[str] = None) -> Tree:
    """Rebuild a tree from its JSON document (effects only, no models)."""
    if payload.get("format") != TREE_FORMAT:
        raise ValueError(f"unsupported tree format {payload.get('format')!r}")
    schema = schema_from_dict(payload["schema"])
    treat = schema.treatment
    cfg = payload["config"]
    config = GrowConfig(
        estimator=EstimatorKind(cfg["estimator"]),
        propensity_spec=parse_spec(cfg["propensity_spec"], treat) if cfg["propensity_spec"] else None,
        outcome_spec=parse_spec(cfg["outcome_spec"], treat) if cfg["outcome_spec"] else None,
        scope=NuisanceScope(cfg["scope"]),
        variance_method=VarianceMethod(cfg["variance_method"]),
        min_node=cfg["min_node"],
        min_per_arm=cfg["min_per_arm"],
        max_depth=cfg["max_depth"],
        epsilon=cfg["epsilon"],
        seed=cfg["seed"],
        outcome_family=cfg["outcome_family"],
    )
    nodes: dict[int, TreeNode] = {}
    for nd in payload["nodes"]:
        rule = None
        if nd["rule"] is not None:
            r = nd["rule"]
            rule = SplitRule(
                column=r["column"],
                column_index=r["column_index"],
                kind=r["kind"],
                threshold=r.get("threshold"),
                left_levels=tuple(r["left_levels"]) if "left_levels" in r else None,
                right_levels=tuple(r["right_levels"]) if "right_levels" in r else None,
                cut=r.get("cut"),
            )
        effect = NodeEffect(
            mu1=nd["mu1"], mu0=nd["mu0"], effect=nd["effect"],
            influence=np.empty(0), kind=config.estimator,
            n=nd["n"], n_treated=0, n_control=0, second_moment=0.0,
        )
        nodes[nd["id"]] = TreeNode(
            id=nd["id"], depth=nd["depth"], n=nd["n"], effect=effect,
            rule=rule, statistic=nd["statistic"], left=nd["left"], right=nd["right"],
        )
    return Tree(nodes, payload["root"], config, schema)


# ----------------------------------------------------------------------
# growth


def _node_models(data: Dataset, rows: np.ndarray, config: GrowConfig,
                 whole_models: Optional[NuisanceModels],
                 parent_models: Optional[NuisanceModels]) -> Optional[NuisanceModels]:
    """Models used for a node's own effect and (parent scope) its split search.

    Returns None when the node's own fit fails; the caller then falls back
    to the parent's models for the effect and stops splitting the node.
    """
    if config.scope == NuisanceScope.WHOLE:
        return whole_models
    try:
        return fit_nuisance(
            data, SubgroupMask.from_indices(data.n, rows), config.estimator,
            config.propensity_spec, config.outcome_spec, config.epsilon,
            config.outcome_family,
        )
    except FitError:
        return None


def grow_max_tree(data: Dataset, mask: SubgroupMask, config: GrowConfig) -> Tree:
    """Grow the maximum-sized tree by repeatedly taking the largest-statistic split."""
    rows = mask.indices()
    if mask.size < config.min_node:
        raise ValueError("root below min_node")
    whole_models = None
    if config.scope == NuisanceScope.WHOLE:
        whole_models = fit_nuisance(
            data, mask, config.estimator, config.propensity_spec,
            config.outcome_spec, config.epsilon, config.outcome_family,
        )

    nodes: dict[int, TreeNode] = {}
    counter = [0]

    def build(node_rows: np.ndarray, depth: int,
              parent_models: Optional[NuisanceModels]) -> int:
        node_id = counter[0]
        counter[0] += 1
        models = _node_models(data, node_rows, config, whole_models, parent_models)
        effect_models = models if models is not None else parent_models
        if effect_models is None:
            raise FitError("cannot fit nuisance models on the root node")
        node_mask = SubgroupMask.from_indices(data.n, node_rows)
        effect = ESTIMATE[config.estimator](data, node_mask, effect_models)
        node = TreeNode(
            id=node_id, depth=depth, n=len(node_rows), effect=effect,
            rows=node_rows, models=effect_models,
        )
        nodes[node_id] = node

        treated = int(effect.n_treated)
        can_split = (
            depth < config.max_depth
            and len(node_rows) >= 2 * config.min_node
            and min(treated, len(node_rows) - treated) >= 2 * config.min_per_arm
            and (models is not None or config.scope == NuisanceScope.CHILD)
        )
        if not can_split:
            return node_id

        best = find_best_split(
            data, node_rows, config.estimator, config.scope, config.variance_method,
            models, config.min_node, config.min_per_arm,
            propensity_spec=config.propensity_spec, outcome_spec=config.outcome_spec,
            epsilon=config.epsilon, outcome_family=config.outcome_family,
        )
        node.n_candidates = 0 if best is None else best.n_candidates
        node.n_admissible = 0 if best is None else best.n_admissible
        if best is None:
            return node_id

        node.rule = best.rule
        node.statistic = best.statistic
        node.left = build(node_rows[best.left_local], depth + 1, effect_models)
        node.right = build(node_rows[~best.left_local], depth + 1, effect_models)
        return node_id

    root_id = build(rows, 0, None)
    return Tree(nodes, root_id, config, data.schema)
