import numpy as np
import pytest

from clusterbal.core import (
    BernoulliIntervention,
    ClusterSample,
    Dataset,
    Gate,
    IndependentBernoulli,
    UnknownPropensity,
    uniform_intervention,
)
from clusterbal.errors import PositivityViolation, PropensityUnavailable
from clusterbal.estimators import (
    balancing_fit,
    exposure_collapsed_ipw,
    ipw_fit,
    ipw_weights,
    ols_plugin,
    projection_fit,
    weighted_projection_fit,
)
from clusterbal.structures import (
    FromExposureMapping,
    IdentityMapping,
    ConstantMapping,
    NoInterference,
    OwnTreatment,
    StratifiedCount,
    TensorWithCovariates,
    design_matrix,
    target_vector,
)

from conftest import make_cluster, make_dataset
from oracles import expectation_over_assignments, mu_f_direct


def singleton(a, y, cid=0, x=0.0):
    return ClusterSample(covariates=[[x]], treatments=[a], outcomes=[y], cluster_id=cid)


def half_bernoulli():
    return IndependentBernoulli(lambda c: np.full(c.size, 0.5))


# ---------- IPW ----------


def test_ipw_singleton_example():
    d = Dataset(clusters=(singleton(1, 3.0),))
    fit = ipw_fit(d, Gate(), half_bernoulli())
    assert np.allclose(fit.weights.values, [2.0])
    assert fit.point == pytest.approx(6.0)


def test_ipw_zero_weight_everywhere():
    d = Dataset(clusters=(singleton(1, 3.0, 0), singleton(0, 5.0, 1)))

    class ZeroGate(Gate):
        def weight(self, pattern, cluster):
            return 0.0

    assert ipw_fit(d, ZeroGate(), half_bernoulli()).point == 0.0


def test_ipw_needs_propensity():
    d = Dataset(clusters=(singleton(1, 3.0),))
    with pytest.raises(PropensityUnavailable):
        ipw_fit(d, Gate(), UnknownPropensity())


def _linear_outcomes(structure, h):
    def outcome_fn(ci, cluster, a):
        return structure.rows_at(cluster, a) @ h

    return outcome_fn


def test_ipw_exact_unbiasedness_bruteforce(rng):
    """E[T_IPW] over the exhaustive joint assignment law equals mu_f."""
    d = make_dataset(rng, 2, sizes=(2, 3), p=2)
    structure = TensorWithCovariates(StratifiedCount(1))
    h = rng.standard_normal(structure.inner.dim() * 2)
    outcome_fn = _linear_outcomes(structure, h)
    probs = {c.cluster_id: rng.uniform(0.3, 0.7, c.size) for c in d.clusters}
    e = IndependentBernoulli(lambda c: probs[c.cluster_id])
    for f in (Gate(), BernoulliIntervention(lambda c: np.full(c.size, 0.4))):
        got, mass = expectation_over_assignments(
            d, e, outcome_fn, lambda ds: (ipw_fit(ds, f, e).point, True)
        )
        assert mass == pytest.approx(1.0, abs=1e-12)
        assert got == pytest.approx(mu_f_direct(d, f, outcome_fn), abs=1e-10)


# ---------- balancing ----------


def two_singletons(a1, a2, y1=1.0, y2=2.0):
    return Dataset(clusters=(singleton(a1, y1, 0), singleton(a2, y2, 1)))


def test_balancing_two_singletons_difference_in_means():
    d = two_singletons(1, 0, y1=5.0, y2=2.0)
    fit = balancing_fit(d, NoInterference(), Gate())
    assert fit.feasible
    assert np.allclose(fit.weights.values, [2.0, -2.0])
    assert fit.point == pytest.approx(5.0 - 2.0)
    assert np.allclose(fit.imbalance, 0.0, atol=1e-12)


def test_balancing_infeasible_all_treated():
    d = two_singletons(1, 1)
    fit = balancing_fit(d, NoInterference(), Gate())
    assert not fit.feasible
    assert np.abs(fit.imbalance).max() > 0
    # point still reported
    assert np.isfinite(fit.point)


def test_balancing_noiseless_linear_recovery(rng):
    d = make_dataset(rng, 6, sizes=(2, 4), p=2)
    structure = TensorWithCovariates(StratifiedCount(1))
    h = rng.standard_normal(structure.inner.dim() * 2)
    ds = Dataset(
        clusters=tuple(
            ClusterSample(
                covariates=c.covariates,
                treatments=c.treatments,
                outcomes=structure.rows_at(c, c.treatments) @ h,
                cluster_id=c.cluster_id,
            )
            for c in d.clusters
        )
    )
    f = uniform_intervention()
    fit = balancing_fit(ds, structure, f)
    assert fit.feasible
    t = target_vector(structure, ds, f)
    assert fit.point == pytest.approx(t @ h / ds.n, abs=1e-8)


def test_balancing_conditional_unbiasedness_bruteforce(rng):
    """E[T_bal | feasible] = (1/n) E[t^T h | feasible] over exhaustive assignments."""
    d = make_dataset(rng, 2, sizes=(2, 2), p=1)
    structure = NoInterference()
    h = rng.standard_normal(2)
    outcome_fn = _linear_outcomes(structure, h)
    e = half_bernoulli()
    f = Gate()
    t = target_vector(structure, d, f)  # depends on covariates only

    def stat(ds):
        fit = balancing_fit(ds, structure, f)
        return fit.point, fit.feasible

    got, mass = expectation_over_assignments(d, e, outcome_fn, stat)
    assert 0 < mass < 1  # some assignments are infeasible
    assert got == pytest.approx(t @ h / d.n, abs=1e-10)


# ---------- OLS plug-in ----------


def test_ols_equals_balancing_when_feasible(rng):
    for trial in range(20):
        d = make_dataset(rng, 5, sizes=(2, 4), p=2)
        structure = TensorWithCovariates(StratifiedCount(1))
        f = uniform_intervention()
        fit = balancing_fit(d, structure, f)
        if not fit.feasible:
            continue
        plug = ols_plugin(d, structure, f)
        assert abs(fit.point - plug) <= 1e-8 * (1 + abs(fit.point))


def test_ols_zero_outcomes(rng):
    d = make_dataset(rng, 3, sizes=(2, 3), p=2)
    ds = Dataset(
        clusters=tuple(
            ClusterSample(c.covariates, c.treatments, np.zeros(c.size), cluster_id=c.cluster_id)
            for c in d.clusters
        )
    )
    assert ols_plugin(ds, NoInterference(), Gate()) == pytest.approx(0.0, abs=1e-14)


def test_ols_square_invertible_design():
    d = two_singletons(1, 0, y1=3.0, y2=7.0)
    structure = NoInterference()
    f = Gate()
    phi = design_matrix(structure, d)
    t = target_vector(structure, d, f)
    y = d.stacked_outcomes()
    expected = t @ np.linalg.inv(phi) @ y / d.n
    assert ols_plugin(d, structure, f) == pytest.approx(expected, abs=1e-12)


# ---------- projection ----------


def test_projection_full_row_rank_is_identity(rng):
    # 2 singletons, design [[0,1],[1,0]] has full row rank
    d = two_singletons(1, 0)
    e = half_bernoulli()
    fit = projection_fit(d, NoInterference(), Gate(), e)
    assert np.allclose(fit.weights.values, ipw_weights(d, Gate(), e), atol=1e-12)


def test_projection_intercept_column_gives_mean(rng):
    d = make_dataset(rng, 3, sizes=(2, 3), p=1)

    class Intercept(NoInterference):
        def dim(self, cluster=None, i=None):
            return 1

        def rows_at(self, cluster, pattern):
            return np.ones((cluster.size, 1))

    e = half_bernoulli()
    fit = projection_fit(d, Intercept(), Gate(), e)
    w_ipw = ipw_weights(d, Gate(), e)
    assert np.allclose(fit.weights.values, w_ipw.mean(), atol=1e-12)


def test_projection_orthogonality_and_contraction(rng):
    for trial in range(20):
        d = make_dataset(rng, 4, sizes=(2, 4), p=2)
        structure = TensorWithCovariates(StratifiedCount(1))
        probs = {c.cluster_id: rng.uniform(0.3, 0.7, c.size) for c in d.clusters}
        e = IndependentBernoulli(lambda c: probs[c.cluster_id])
        fit = projection_fit(d, structure, uniform_intervention(), e)
        w_ipw = fit._context["w_ipw"]
        phi = design_matrix(structure, d)
        resid = phi.T @ (fit.weights.values - w_ipw)
        assert np.linalg.norm(resid) <= 1e-8 * (1 + np.linalg.norm(phi.T @ w_ipw))
        assert fit.weights.norm() <= np.linalg.norm(w_ipw) + 1e-10


def test_projection_exact_unbiasedness_bruteforce(rng):
    """E[T_proj] = mu_f under a correctly specified structure."""
    d = make_dataset(rng, 2, sizes=(2, 3), p=1)
    structure = NoInterference()
    h = rng.standard_normal(2)
    outcome_fn = _linear_outcomes(structure, h)
    probs = {c.cluster_id: rng.uniform(0.3, 0.7, c.size) for c in d.clusters}
    e = IndependentBernoulli(lambda c: probs[c.cluster_id])
    f = Gate()
    got, _ = expectation_over_assignments(
        d, e, outcome_fn, lambda ds: (projection_fit(ds, structure, f, e).point, True)
    )
    assert got == pytest.approx(mu_f_direct(d, f, outcome_fn), abs=1e-10)


# ---------- weighted projection ----------


def test_wproj_saturated_basis_reduces_to_ipw(rng):
    d = make_dataset(rng, 2, sizes=(2, 3), p=1)
    probs = {c.cluster_id: rng.uniform(0.3, 0.7, c.size) for c in d.clusters}
    e = IndependentBernoulli(lambda c: probs[c.cluster_id])
    f = uniform_intervention()
    saturated = FromExposureMapping(IdentityMapping())
    fit = weighted_projection_fit(d, saturated, f, e)
    assert np.allclose(fit.weights.values, ipw_weights(d, f, e), atol=1e-10)


def test_wproj_own_treatment_hand_value():
    # M_c=2, e=0.5 i.i.d., GATE, own-treatment classes, observed a_ci=1 -> weight 1
    c = ClusterSample(covariates=[[0.0], [0.0]], treatments=[1, 0], outcomes=[0.0, 0.0], cluster_id=0)
    d = Dataset(clusters=(c,))
    fit = weighted_projection_fit(d, FromExposureMapping(OwnTreatment()), Gate(), half_bernoulli())
    assert fit.weights.values[0] == pytest.approx(1.0, abs=1e-10)
    assert fit.weights.values[1] == pytest.approx(-1.0, abs=1e-10)


def test_wproj_matches_exposure_collapsed_ipw(rng):
    d = make_dataset(rng, 3, sizes=(2, 4), p=2)
    probs = {c.cluster_id: rng.uniform(0.3, 0.7, c.size) for c in d.clusters}
    e = IndependentBernoulli(lambda c: probs[c.cluster_id])
    for mapping in (OwnTreatment(), ConstantMapping()):
        for f in (Gate(), uniform_intervention()):
            w1 = weighted_projection_fit(d, FromExposureMapping(mapping), f, e)
            w2 = exposure_collapsed_ipw(d, mapping, f, e)
            assert np.allclose(w1.weights.values, w2.weights.values, atol=1e-8)


# ---------- exposure-collapsed IPW ----------


def test_exposure_identity_reduces_to_ipw(rng):
    d = make_dataset(rng, 3, sizes=(2, 3), p=1)
    probs = {c.cluster_id: rng.uniform(0.3, 0.7, c.size) for c in d.clusters}
    e = IndependentBernoulli(lambda c: probs[c.cluster_id])
    f = uniform_intervention()
    fit = exposure_collapsed_ipw(d, IdentityMapping(), f, e)
    assert np.allclose(fit.weights.values, ipw_weights(d, f, e), atol=1e-12)


def test_exposure_constant_mapping_gate_is_zero(rng):
    d = make_dataset(rng, 2, sizes=(2, 3), p=1)
    e = half_bernoulli()
    fit = exposure_collapsed_ipw(d, ConstantMapping(), Gate(), e)
    assert np.allclose(fit.weights.values, 0.0, atol=1e-12)
    assert fit.point == 0.0


def test_exposure_own_treatment_hand_value():
    c = ClusterSample(covariates=[[0.0], [0.0]], treatments=[1, 1], outcomes=[0.0, 0.0], cluster_id=0)
    d = Dataset(clusters=(c,))
    fit = exposure_collapsed_ipw(d, OwnTreatment(), Gate(), half_bernoulli())
    # f_class = f(1,0)+f(1,1) = 1, e_class = 0.5, M_c = 2 -> weight 1
    assert np.allclose(fit.weights.values, [1.0, 1.0], atol=1e-12)


def test_exposure_enumeration_matches_analytic(rng):
    """Force the enumeration path and compare with the analytic class probability."""
    d = make_dataset(rng, 2, sizes=(3, 4), p=2)
    probs = {c.cluster_id: rng.uniform(0.3, 0.7, c.size) for c in d.clusters}
    e = IndependentBernoulli(lambda c: probs[c.cluster_id])

    class NoAnalytic(OwnTreatment):
        def class_probability(self, cluster, i, pattern, propensity):
            return None

    f = uniform_intervention()
    w_fast = exposure_collapsed_ipw(d, OwnTreatment(), f, e)
    w_slow = exposure_collapsed_ipw(d, NoAnalytic(), f, e)
    assert np.allclose(w_fast.weights.values, w_slow.weights.values, atol=1e-12)
