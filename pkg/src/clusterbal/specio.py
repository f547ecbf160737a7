"""JSON spec documents for counterfactual weights and propensity models.

Every document carries a "kind" discriminator; the schemas are documented in
docs/formats.md. Structure documents are handled by structures.build_structure.
"""

from __future__ import annotations

import numpy as np

from .core import (
    BernoulliIntervention,
    DeterministicTarget,
    DirectEffect,
    Gate,
    IndependentBernoulli,
    JointTable,
    RandomSelection,
    SparseTable,
    UnknownPropensity,
    probit_intervention,
    probit_propensity,
    uniform_intervention,
)
from .errors import InvalidSpec


def _bernoulli_probs_fn(doc):
    if "prob" in doc:
        prob = float(doc["prob"])
        return lambda c: np.full(c.size, prob)
    if doc.get("family") == "probit_mean":
        kappa = float(doc.get("kappa", 0.0))
        from .core import probit_mean_probs

        return lambda c: probit_mean_probs(c, kappa)
    raise InvalidSpec("bernoulli spec needs 'prob' or family 'probit_mean'")


def _rank_selector(column, count, largest=True):
    def select(cluster):
        vals = cluster.covariates[:, column]
        order = np.argsort(-vals if largest else vals, kind="stable")
        return order[: min(count, cluster.size)].tolist()

    return select


def weight_from_json(doc):
    """Counterfactual weight from a JSON spec document."""
    if not isinstance(doc, dict) or "kind" not in doc:
        raise InvalidSpec("weight spec must be a dict with a 'kind' key")
    kind = doc["kind"]
    if kind == "gate":
        return Gate()
    if kind == "uniform":
        return uniform_intervention()
    if kind == "bernoulli":
        if doc.get("family") == "probit_mean":
            return probit_intervention(float(doc.get("kappa", 0.0)))
        return BernoulliIntervention(_bernoulli_probs_fn(doc))
    if kind == "random_selection":
        return RandomSelection(int(doc["count"]))
    if kind == "deterministic":
        if "units" in doc:
            return DeterministicTarget([int(u) for u in doc["units"]])
        if "units_by_cluster" in doc:
            return DeterministicTarget(
                {k: [int(u) for u in v] for k, v in doc["units_by_cluster"].items()}
            )
        if "rank_column" in doc:
            return DeterministicTarget(
                _rank_selector(
                    int(doc["rank_column"]),
                    int(doc["count"]),
                    largest=bool(doc.get("largest", True)),
                )
            )
        raise InvalidSpec("deterministic spec needs units, units_by_cluster, or rank_column")
    if kind == "sparse":
        entries = {}
        for row in doc["entries"]:
            entries.setdefault(row["cluster_id"], []).append(
                (row["pattern"], float(row["weight"]))
            )
        return SparseTable(entries)
    if kind == "direct_effect":
        return DirectEffect(weight_from_json(doc["base"]))
    raise InvalidSpec(f"unknown weight kind {kind!r}")


def propensity_from_json(doc):
    """Propensity model from a JSON spec document (or the string 'unknown')."""
    if doc == "unknown":
        return UnknownPropensity()
    if not isinstance(doc, dict) or "kind" not in doc:
        raise InvalidSpec("propensity spec must be a dict with a 'kind' key")
    kind = doc["kind"]
    if kind == "unknown":
        return UnknownPropensity()
    if kind == "bernoulli":
        if doc.get("family") == "probit_mean":
            return probit_propensity(float(doc.get("kappa", 0.0)))
        return IndependentBernoulli(_bernoulli_probs_fn(doc))
    if kind == "joint_table":
        tables = {}
        for cid, table in doc["tables"].items():
            tables[cid] = {
                tuple(int(ch) for ch in key): float(v) for key, v in table.items()
            }
        return JointTable(tables)
    raise InvalidSpec(f"unknown propensity kind {kind!r}")
