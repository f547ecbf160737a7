"""Weighting estimators: IPW, balancing, projection, weighted projection,
and the exposure-collapsed IPW closed form, plus the OLS plug-in."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import PATTERN_CAP, enumerate_patterns, eval_propensity, pattern_index
from .errors import PositivityViolation
from .numerics import FEAS_TOL, DesignOps, project_colspace
from .structures import design_matrix, target_contributions

__all__ = [
    "WeightSet",
    "EstimateReport",
    "DesignSystem",
    "build_design",
    "ipw_weights",
    "ipw_fit",
    "balancing_fit",
    "ols_plugin",
    "projection_fit",
    "weighted_projection_fit",
    "exposure_collapsed_ipw",
]


@dataclass(frozen=True)
class WeightSet:
    """Per-unit estimator weights in dataset unit order."""

    values: np.ndarray
    kind: str
    feasible: bool = True

    def norm(self):
        return float(np.linalg.norm(self.values))


@dataclass(frozen=True)
class EstimateReport:
    """Point estimate with the weights and design evidence that produced it."""

    point: float
    weights: WeightSet
    imbalance: np.ndarray | None = None
    target: np.ndarray | None = None
    design_rank: int | None = None
    _context: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def feasible(self):
        return self.weights.feasible

    @property
    def kind(self):
        return self.weights.kind

    def to_dict(self):
        return {
            "kind": self.kind,
            "point": self.point,
            "feasible": self.feasible,
            "weights": self.weights.values.tolist(),
            "imbalance": None if self.imbalance is None else self.imbalance.tolist(),
            "target": None if self.target is None else self.target.tolist(),
            "design_rank": self.design_rank,
        }


@dataclass(frozen=True)
class DesignSystem:
    """Observed design matrix and per-cluster target contributions."""

    phi: np.ndarray
    contributions: np.ndarray  # (n, d_h)
    slices: tuple
    label: str
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def target(self):
        return self.contributions.sum(axis=0)

    def ops(self, feas_tol=FEAS_TOL):
        if "ops" not in self._cache:
            self._cache["ops"] = DesignOps(self.phi, feas_tol=feas_tol)
        return self._cache["ops"]


def build_design(structure, dataset, weight, cap=PATTERN_CAP):
    return DesignSystem(
        phi=design_matrix(structure, dataset),
        contributions=target_contributions(structure, dataset, weight, cap),
        slices=tuple(dataset.cluster_slices()),
        label=structure.label,
    )


def _point(dataset, values):
    return float(values @ dataset.stacked_outcomes() / dataset.n)


def ipw_weights(dataset, weight, propensity):
    """Observed-pattern IPW weights f(A_c)/(M_c e(A_c)), one entry per unit."""
    out = np.empty(dataset.total_units)
    for (start, stop), c in zip(dataset.cluster_slices(), dataset.clusters):
        e_obs = eval_propensity(propensity, c.treatments, c)
        if e_obs <= 0.0:
            raise PositivityViolation(
                f"propensity {e_obs} <= 0 at the observed pattern of cluster {c.cluster_id!r}"
            )
        out[start:stop] = weight.weight(c.treatments, c) / (c.size * e_obs)
    return out


def ipw_fit(dataset, weight, propensity):
    """Standard inverse-probability-weighting estimator."""
    w = ipw_weights(dataset, weight, propensity)
    return EstimateReport(
        point=_point(dataset, w),
        weights=WeightSet(values=w, kind="ipw"),
    )


def balancing_fit(dataset, structure, weight, design=None, feas_tol=FEAS_TOL, cap=PATTERN_CAP):
    """Minimum-norm solution of the balancing equations phi^T w = t.

    The point estimate is reported even when the equations are infeasible
    (feasible=False); the imbalance vector is always attached so the fit can
    be assessed per the imbalance diagnostics.
    """
    if design is None:
        design = build_design(structure, dataset, weight, cap)
    ops = design.ops(feas_tol)
    t = design.target
    report = ops.min_norm_row_solve(t)
    w = report.solution
    nu = (design.phi.T @ w - t) / dataset.n
    return EstimateReport(
        point=_point(dataset, w),
        weights=WeightSet(values=w, kind="balancing", feasible=report.feasible(feas_tol)),
        imbalance=nu,
        target=t,
        design_rank=report.rank,
        _context={"design": design},
    )


def ols_plugin(dataset, structure, weight, design=None, cap=PATTERN_CAP):
    """Plug-in estimate (1/n) t^T (phi^+ y) from the fitted coefficient vector."""
    if design is None:
        design = build_design(structure, dataset, weight, cap)
    h_hat = design.ops().ols_coefficients(dataset.stacked_outcomes())
    return float(design.target @ h_hat / dataset.n)


def fit_h_hat(dataset, structure, design=None):
    """OLS coefficient vector phi^+ y of the observed design."""
    if design is None:
        phi = design_matrix(structure, dataset)
        return DesignOps(phi).ols_coefficients(dataset.stacked_outcomes())
    return design.ops().ols_coefficients(dataset.stacked_outcomes())


def projection_fit(dataset, structure, weight, propensity, design=None, cap=PATTERN_CAP):
    """IPW weights projected onto the observed design's column space."""
    if design is None:
        design = build_design(structure, dataset, weight, cap)
    w_ipw = ipw_weights(dataset, weight, propensity)
    w = design.ops().project(w_ipw)
    return EstimateReport(
        point=_point(dataset, w),
        weights=WeightSet(values=w, kind="projection"),
        target=design.target,
        design_rank=design.ops().rank,
        _context={"design": design, "w_ipw": w_ipw},
    )


def weighted_projection_fit(dataset, structure, weight, propensity, cap=PATTERN_CAP):
    """Per-unit propensity-weighted projection of the potential IPW weights.

    For each unit, the 2^{M_c} potential IPW weights are projected onto the
    propensity-scaled span of the unit's per-pattern feature matrix; the
    observed-pattern entry is that unit's weight.
    """
    out = np.empty(dataset.total_units)
    for (start, stop), c in zip(dataset.cluster_slices(), dataset.clusters):
        bits = enumerate_patterns(c.size, cap)
        e_all = np.asarray(propensity.probabilities_for(bits, c), dtype=np.float64)
        if (e_all <= 0.0).any():
            raise PositivityViolation(
                f"propensity has non-positive pattern mass in cluster {c.cluster_id!r}"
            )
        f_all = np.asarray(weight.weights_for(bits, c), dtype=np.float64)
        w_tilde = f_all / (c.size * e_all)
        sqrt_e = np.sqrt(e_all)
        obs = pattern_index(c.treatments)
        for i in range(c.size):
            lam = structure.all_pattern_rows(c, i, cap)
            scaled = project_colspace(sqrt_e[:, None] * lam, sqrt_e * w_tilde)
            out[start + i] = scaled[obs] / sqrt_e[obs]
    return EstimateReport(
        point=_point(dataset, out),
        weights=WeightSet(values=out, kind="weighted_projection"),
    )


def exposure_collapsed_ipw(dataset, mapping, weight, propensity, cap=PATTERN_CAP):
    """IPW on exposure classes: w_ci = f_class / (M_c * e_class).

    Class sums run over the counterfactual weight's sparse support for the
    numerator; the denominator uses the propensity model's analytic class
    probability when available and full enumeration otherwise.
    """
    out = np.empty(dataset.total_units)
    for (start, stop), c in zip(dataset.cluster_slices(), dataset.clusters):
        support = weight.support(c, cap)
        bits_cache = None
        e_cache = None
        for i in range(c.size):
            obs_class = mapping.class_of(c, i, c.treatments)
            f_class = sum(
                w for pat, w in support if mapping.class_of(c, i, pat) == obs_class
            )
            e_class = mapping.class_probability(c, i, c.treatments, propensity)
            if e_class is None:
                if bits_cache is None:
                    bits_cache = enumerate_patterns(c.size, cap)
                    e_cache = np.asarray(
                        propensity.probabilities_for(bits_cache, c), dtype=np.float64
                    )
                classes = mapping.classes_for(c, i, bits_cache)
                e_class = float(e_cache[classes == obs_class].sum())
            if e_class <= 0.0:
                raise PositivityViolation(
                    f"exposure-class probability is 0 for unit {i} of cluster {c.cluster_id!r}"
                )
            out[start + i] = f_class / (c.size * e_class)
    return EstimateReport(
        point=_point(dataset, out),
        weights=WeightSet(values=out, kind="exposure_ipw"),
    )
