"""Brute-force oracles: exhaustive assignment enumeration and direct estimand
sums, independent of the estimator code paths they check."""

import itertools

import numpy as np

from clusterbal.core import ClusterSample, Dataset, enumerate_patterns, eval_propensity, eval_weight


def reassign(dataset, assignments, outcome_fn):
    """Dataset with new treatments and outcomes y = outcome_fn(cluster_idx, cluster, a)."""
    clusters = []
    for ci, (c, a) in enumerate(zip(dataset.clusters, assignments)):
        y = outcome_fn(ci, c, np.asarray(a))
        clusters.append(
            ClusterSample(
                covariates=c.covariates,
                treatments=np.asarray(a),
                outcomes=y,
                cluster_id=c.cluster_id,
            )
        )
    return Dataset(clusters=tuple(clusters))


def joint_assignments(dataset):
    """Every joint treatment assignment across all clusters with its probability factorized later."""
    per_cluster = [enumerate_patterns(c.size) for c in dataset.clusters]
    for combo in itertools.product(*[range(p.shape[0]) for p in per_cluster]):
        yield [per_cluster[ci][j] for ci, j in enumerate(combo)]


def joint_probability(dataset, assignment, propensity):
    p = 1.0
    for c, a in zip(dataset.clusters, assignment):
        p *= eval_propensity(propensity, a, c)
    return p


def expectation_over_assignments(dataset, propensity, outcome_fn, statistic):
    """E[statistic(dataset with A=a)] over the joint assignment law.

    statistic maps the reassigned dataset to (value, include_flag); excluded
    draws condition the expectation on the inclusion event.
    """
    total, mass = 0.0, 0.0
    for assignment in joint_assignments(dataset):
        prob = joint_probability(dataset, assignment, propensity)
        ds = reassign(dataset, assignment, outcome_fn)
        value, include = statistic(ds)
        if include:
            total += prob * value
            mass += prob
    return total / mass, mass


def mu_f_direct(dataset, weight, outcome_fn):
    """(1/n) sum_c (1/M_c) sum_i sum_a g_ci(a) f(a, X_c) with g from outcome_fn."""
    total = 0.0
    for ci, c in enumerate(dataset.clusters):
        for a in enumerate_patterns(c.size):
            w = eval_weight(weight, a, c)
            if w == 0.0:
                continue
            g = outcome_fn(ci, c, a)
            total += w * g.sum() / c.size
    return total / dataset.n
