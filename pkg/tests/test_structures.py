import numpy as np
import pytest

from clusterbal.core import (
    BernoulliIntervention,
    ClusterSample,
    Dataset,
    Gate,
    SparseTable,
    enumerate_patterns,
    uniform_intervention,
)
from clusterbal.errors import CapExceeded, DimensionMismatch, InvalidSpec
from clusterbal.structures import (
    AdditiveTypes,
    CoarsenedCount,
    Compose,
    FromExposureMapping,
    KnnPattern,
    NeighborCount,
    NeighborPattern,
    NoInterference,
    OwnTreatment,
    StratifiedCount,
    TensorWithCovariates,
    build_structure,
    design_matrix,
    feature_row,
    knn_graph,
    nested_rank_check,
    target_vector,
)

from conftest import make_cluster, make_dataset


def cluster_with(x, a):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[0] == 1 and len(a) > 1:
        x = x.T
    return ClusterSample(covariates=x, treatments=a, outcomes=np.zeros(len(a)), cluster_id=0)


# ---------- feature rows of the named encodings ----------


def test_no_interference_rows():
    c = cluster_with([[0.0], [0.0]], [0, 1])
    assert feature_row(NoInterference(), c, 0, [0, 1]).tolist() == [1.0, 0.0]
    assert feature_row(NoInterference(), c, 1, [0, 1]).tolist() == [0.0, 1.0]


def test_stratified_count_one_treated_neighbor():
    # three units on a line; unit 0's 2 nearest neighbors are 1 and 2
    c = cluster_with([[0.0], [1.0], [2.0]], [0, 0, 0])
    s = StratifiedCount(2, include_own=False)
    row = feature_row(s, c, 0, [0, 1, 0])
    assert row.tolist() == [0.0, 1.0, 0.0]


def test_tensor_with_covariates_kron():
    c = cluster_with([[1.0, 2.0]], [1])
    s = TensorWithCovariates(NoInterference())
    assert feature_row(s, c, 0, [1]).tolist() == [0.0, 0.0, 1.0, 2.0]


def test_knn_pattern_neighbor_treated():
    c = cluster_with([[0.0], [0.1]], [0, 0])
    s = KnnPattern(1)
    assert feature_row(s, c, 0, [0, 1]).tolist() == [0.0, 1.0]
    assert feature_row(s, c, 0, [0, 0]).tolist() == [1.0, 0.0]


def test_knn_pattern_slot_is_binary_encoding(rng):
    # active slot index equals the binary encoding of neighbor treatments
    c = make_cluster(rng, 6)
    s = KnnPattern(3)
    nbrs = s._neighbors(c)
    for _ in range(10):
        a = rng.integers(0, 2, 6).astype(np.int8)
        for i in range(6):
            row = feature_row(s, c, i, a)
            assert row.sum() == 1.0
            expected_slot = int("".join(str(int(a[j])) for j in nbrs[i]), 2)
            assert row[expected_slot] == 1.0


def test_feature_row_index_errors(rng):
    c = make_cluster(rng, 3)
    with pytest.raises(DimensionMismatch):
        feature_row(NoInterference(), c, 5, [0, 0, 0])
    with pytest.raises(DimensionMismatch):
        feature_row(NoInterference(), c, 0, [0, 0])


def test_additive_types_encoding():
    c = cluster_with([[0.0], [0.0], [0.0]], [1, 0, 1])
    s = AdditiveTypes(4, type_source="unit_index")
    row = feature_row(s, c, 0, [1, 0, 1])
    # types 1..3 present (status 1, 0, 1), type 4 absent
    assert row.tolist() == [0, 1, 1, 0, 0, 1, 0, 0]
    # rows identical across units
    assert np.array_equal(s.rows_at(c, c.treatments), np.tile(row, (3, 1)))


def test_additive_types_column_source():
    x = np.array([[3.0], [1.0]])
    c = ClusterSample(covariates=x, treatments=[1, 0], outcomes=[0, 0], cluster_id=0)
    s = AdditiveTypes(3, type_source={"column": 0})
    row = feature_row(s, c, 0, [1, 0])
    assert row.tolist() == [1, 0, 0, 0, 0, 1]


def test_additive_types_duplicate_type_rejected():
    x = np.array([[2.0], [2.0]])
    c = ClusterSample(covariates=x, treatments=[0, 0], outcomes=[0, 0], cluster_id=0)
    with pytest.raises(InvalidSpec):
        feature_row(AdditiveTypes(3, type_source={"column": 0}), c, 0, [0, 0])


def test_coarsened_count_bins():
    c = cluster_with([[0.0], [1.0], [2.0], [3.0]], [0, 0, 0, 0])
    s = CoarsenedCount(order=1, thresholds=(0, 1), k=3)
    row = feature_row(s, c, 0, [1, 1, 0, 0])  # own=1, one treated neighbor
    assert row.tolist() == [0, 1, 0, 1, 0]
    row = feature_row(s, c, 0, [0, 1, 1, 1])  # three treated neighbors -> high
    assert row.tolist() == [1, 0, 0, 0, 1]


def test_coarsened_count_threshold_validation():
    with pytest.raises(InvalidSpec):
        CoarsenedCount(order=1, thresholds=(2, 1), k=3)


def test_coarsened_count_fit_thresholds(rng):
    d = make_dataset(rng, 8, sizes=(4, 6))
    s = CoarsenedCount(order=2, k=2)
    t = s.fit_thresholds(d)
    assert t.shape == (2, 2)
    assert (t[:, 0] <= t[:, 1]).all()
    row = feature_row(s, d.clusters[0], 0, d.clusters[0].treatments)
    assert row.shape == (8,)
    assert row[:2].sum() == 1.0 and row[2:5].sum() == 1.0 and row[5:8].sum() == 1.0


# ---------- one-hot block invariant ----------


@pytest.mark.parametrize(
    "builder",
    [
        lambda: NoInterference(),
        lambda: StratifiedCount(2),
        lambda: StratifiedCount(3, include_own=True),
        lambda: KnnPattern(2),
        lambda: CoarsenedCount(order=1, thresholds=(0, 1), k=2),
    ],
)
def test_indicator_rows_one_hot_per_block(rng, builder):
    s = builder()
    c = make_cluster(rng, 5)
    for _ in range(5):
        a = rng.integers(0, 2, 5).astype(np.int8)
        rows = s.rows_at(c, a)
        assert set(np.unique(rows)) <= {0.0, 1.0}
        if isinstance(s, CoarsenedCount):
            assert np.allclose(rows[:, :2].sum(axis=1), 1.0)
            assert np.allclose(rows[:, 2:].sum(axis=1), 1.0)
        else:
            assert np.allclose(rows.sum(axis=1), 1.0)


def test_feature_purity(rng):
    s = TensorWithCovariates(KnnPattern(2))
    c = make_cluster(rng, 4)
    a = c.treatments
    r1 = feature_row(s, c, 1, a).copy()
    other = make_cluster(rng, 6, cluster_id=99)
    s.rows_at(other, other.treatments)
    assert np.array_equal(feature_row(s, c, 1, a), r1)


# ---------- expected rows agree with enumeration ----------


@pytest.mark.parametrize(
    "builder",
    [
        lambda: NoInterference(),
        lambda: StratifiedCount(2),
        lambda: StratifiedCount(2, include_own=True),
        lambda: KnnPattern(3),
        lambda: AdditiveTypes(6),
        lambda: CoarsenedCount(order=2, thresholds=(0, 1), k=2),
        lambda: TensorWithCovariates(KnnPattern(2)),
        lambda: FromExposureMapping(OwnTreatment()),
        lambda: FromExposureMapping(NeighborCount(2)),
    ],
)
def test_expected_rows_match_enumeration(rng, builder):
    s = builder()
    c = make_cluster(rng, 5)
    probs = rng.uniform(0.1, 0.9, size=5)
    bits = enumerate_patterns(5)
    masses = np.prod(np.where(bits == 1, probs, 1 - probs), axis=1)
    d = s.dim(c)
    brute = np.zeros((5, d))
    for r in range(bits.shape[0]):
        brute += masses[r] * s.rows_at(c, bits[r])
    assert np.allclose(s.expected_rows(c, probs), brute, atol=1e-12)


def test_pattern_totals_match_enumeration(rng):
    c = make_cluster(rng, 4)
    for s in (StratifiedCount(2), KnnPattern(2), AdditiveTypes(5)):
        for i in range(c.size):
            brute = s.all_pattern_rows(c, i).sum(axis=0)
            assert np.allclose(s.pattern_totals(c, i), brute, atol=1e-10)


def test_all_pattern_rows_match_feature_row(rng):
    c = make_cluster(rng, 4)
    bits = enumerate_patterns(4)
    for s in (NoInterference(), StratifiedCount(2), KnnPattern(2), AdditiveTypes(5),
              CoarsenedCount(order=1, thresholds=(0, 1), k=2)):
        for i in range(4):
            rows = s.all_pattern_rows(c, i)
            for r in range(16):
                assert np.allclose(rows[r], feature_row(s, c, i, bits[r]))


# ---------- composition ----------


def test_compose_matches_matrix_product_oracle(rng):
    """Composed rows equal the product of the two encodings on a size-4 cluster."""
    c = make_cluster(rng, 4)
    inner = KnnPattern(2)
    outer = AdditiveTypes(2)
    composed = Compose(outer, inner)
    bits = enumerate_patterns(4)
    for i in range(4):
        lam1 = inner.all_pattern_rows(c, i)  # (16, 4) neighbor-pattern indicators
        # additive encoding of the 2 neighbor slots for each neighbor pattern
        slot_bits = enumerate_patterns(2)
        lam2 = np.stack([outer.row_on_bits(b) for b in slot_bits])  # (4, 4)
        product = lam1 @ lam2
        got = np.stack([composed.feature_row(c, i, bits[r]) for r in range(16)])
        assert np.allclose(got, product, atol=1e-12)


def test_compose_associativity(rng):
    for trial in range(3):
        c = make_cluster(rng, 4, cluster_id=trial)
        d = Dataset(clusters=(c,))
        a_s, b_s, c_s = AdditiveTypes(2), KnnPattern(2), KnnPattern(3)
        left = Compose(a_s, Compose(b_s, c_s))
        right = Compose(Compose(a_s, b_s), c_s)
        assert np.allclose(design_matrix(left, d), design_matrix(right, d), atol=1e-12)


def test_compose_expected_rows_match_enumeration(rng):
    c = make_cluster(rng, 4)
    s = Compose(AdditiveTypes(2), KnnPattern(2))
    probs = rng.uniform(0.2, 0.8, 4)
    bits = enumerate_patterns(4)
    masses = np.prod(np.where(bits == 1, probs, 1 - probs), axis=1)
    brute = sum(masses[r] * s.rows_at(c, bits[r]) for r in range(16))
    assert np.allclose(s.expected_rows(c, probs), brute, atol=1e-12)


def test_compose_rejects_unsupported():
    with pytest.raises(InvalidSpec):
        Compose(NoInterference(), StratifiedCount(2))


# ---------- design matrices ----------


def test_design_matrix_singletons():
    c1 = cluster_with([[0.0]], [1])
    c2 = ClusterSample(covariates=[[0.0]], treatments=[0], outcomes=[0.0], cluster_id=1)
    d = Dataset(clusters=(c1, c2))
    assert design_matrix(NoInterference(), d).tolist() == [[0.0, 1.0], [1.0, 0.0]]


def test_design_matrix_shape(rng):
    d = make_dataset(rng, 3, sizes=(2, 2), p=2)
    s = TensorWithCovariates(NoInterference())  # d_h = 2*2 = 4
    assert design_matrix(s, d).shape == (6, 4)


def test_design_matrix_rows_match_feature_row(rng):
    d = make_dataset(rng, 4, sizes=(2, 5))
    s = TensorWithCovariates(StratifiedCount(2))
    phi = design_matrix(s, d)
    r = 0
    for c in d.clusters:
        for i in range(c.size):
            assert np.allclose(phi[r], feature_row(s, c, i, c.treatments))
            r += 1


# ---------- target vectors ----------


def test_target_vector_singleton_gate():
    d = Dataset(clusters=(cluster_with([[0.0]], [1]),))
    t = target_vector(NoInterference(), d, Gate())
    assert np.allclose(t, [-1.0, 1.0])


def test_target_vector_pair_gate():
    d = Dataset(clusters=(cluster_with([[0.0], [0.0]], [1, 0]),))
    t = target_vector(NoInterference(), d, Gate())
    assert np.allclose(t, [-1.0, 1.0])


def test_target_vector_zero_weight():
    d = Dataset(clusters=(cluster_with([[0.0], [0.0]], [1, 0]),))
    f = SparseTable({0: []})
    assert np.allclose(target_vector(NoInterference(), d, f), [0.0, 0.0])


def test_target_vector_product_path_matches_support_path(rng):
    """The intervention's closed product form must agree with support enumeration."""
    d = make_dataset(rng, 3, sizes=(2, 5))
    s = TensorWithCovariates(StratifiedCount(2))
    probs_by_id = {c.cluster_id: rng.uniform(0.2, 0.8, c.size) for c in d.clusters}
    fast = BernoulliIntervention(lambda c: probs_by_id[c.cluster_id])

    class NoProductForm(BernoulliIntervention):
        def marginal_probs(self, cluster):
            return None

    slow = NoProductForm(lambda c: probs_by_id[c.cluster_id])
    assert np.allclose(
        target_vector(s, d, fast), target_vector(s, d, slow), atol=1e-10
    )


def test_target_vector_cap_propagates(rng):
    d = make_dataset(rng, 1, sizes=(6, 6))
    # enumeration path of a structure without a closed product form
    with pytest.raises(CapExceeded):
        target_vector(FromExposureMapping(OwnTreatment()), d, uniform_intervention(), cap=4)

    # enumeration path of a weight without a product form
    class NoProductForm(BernoulliIntervention):
        def marginal_probs(self, cluster):
            return None

    slow = NoProductForm(lambda c: np.full(c.size, 0.5))
    with pytest.raises(CapExceeded):
        target_vector(NoInterference(), d, slow, cap=4)


# ---------- knn graph ----------


def test_knn_graph_hand_example():
    c = cluster_with([[0.0], [1.0], [10.0]], [0, 0, 0])
    d = Dataset(clusters=(c,))
    g = knn_graph(d, 1)
    lists = g.neighbors(c)
    assert lists[0].tolist() == [1]
    assert lists[1].tolist() == [0]
    assert lists[2].tolist() == [1]


def test_knn_graph_saturation(rng):
    c = make_cluster(rng, 4)
    d = Dataset(clusters=(c,))
    lists = knn_graph(d, 10).neighbors(c)
    for i in range(4):
        assert sorted(lists[i].tolist()) == sorted(set(range(4)) - {i})


def test_knn_graph_tie_break():
    c = cluster_with([[0.0], [1.0], [1.0], [1.0]], [0, 0, 0, 0])
    d = Dataset(clusters=(c,))
    lists = knn_graph(d, 2).neighbors(c)
    assert lists[0].tolist() == [1, 2]  # ties by lower unit index


# ---------- nesting ----------


def test_nested_rank_check_identity(rng):
    d = make_dataset(rng, 4, sizes=(3, 5))
    s = TensorWithCovariates(StratifiedCount(2))
    assert nested_rank_check(s, s, d)


def test_nested_rank_check_true_nestings(rng):
    d = make_dataset(rng, 8, sizes=(4, 6), p=3)
    # counts are functions of the neighbor pattern
    assert nested_rank_check(
        TensorWithCovariates(StratifiedCount(2)), TensorWithCovariates(KnnPattern(2)), d
    )
    # knn ladder
    assert nested_rank_check(
        TensorWithCovariates(KnnPattern(1)), TensorWithCovariates(KnnPattern(2)), d
    )
    # own-treatment block is part of the coarsened structure
    assert nested_rank_check(
        NoInterference(), CoarsenedCount(order=1, thresholds=(0, 1), k=2), d
    )


def test_nested_rank_check_orthogonal_columns():
    c1 = cluster_with([[1.0]], [1])
    c2 = ClusterSample(covariates=[[1.0]], treatments=[0], outcomes=[0.0], cluster_id=1)
    d = Dataset(clusters=(c1, c2))

    class FirstColumn(NoInterference):
        def rows_at(self, cluster, pattern):
            return super().rows_at(cluster, pattern)[:, :1]

        def dim(self, cluster=None, i=None):
            return 1

    class SecondColumn(NoInterference):
        def rows_at(self, cluster, pattern):
            return super().rows_at(cluster, pattern)[:, 1:]

        def dim(self, cluster=None, i=None):
            return 1

    assert not nested_rank_check(FirstColumn(), SecondColumn(), d)


# ---------- exposure mappings ----------


def test_exposure_class_probabilities_match_enumeration(rng):
    c = make_cluster(rng, 5)
    probs = rng.uniform(0.2, 0.8, 5)

    class P:
        def unit_probs(self, cluster):
            return probs

        def probabilities_for(self, bits, cluster):
            return np.prod(np.where(bits == 1, probs, 1 - probs), axis=1)

    e = P()
    bits = enumerate_patterns(5)
    masses = e.probabilities_for(bits, c)
    for mapping in (OwnTreatment(), NeighborCount(2), NeighborPattern(2)):
        for i in range(5):
            obs = c.treatments
            analytic = mapping.class_probability(c, i, obs, e)
            classes = mapping.classes_for(c, i, bits)
            brute = masses[classes == mapping.class_of(c, i, obs)].sum()
            assert analytic == pytest.approx(brute, abs=1e-12)


# ---------- builder ----------


def test_build_structure_from_specs(rng):
    d = make_dataset(rng, 4, sizes=(3, 5), p=3)
    specs = [
        {"kind": "no_interference"},
        {"kind": "stratified_count", "k": 2, "include_own": True},
        {"kind": "knn_pattern", "k": 2},
        {"kind": "additive_types", "s": 5},
        {"kind": "coarsened_count", "order": 1, "k": 2},
        {"kind": "exposure", "mapping": {"name": "neighbor_count", "k": 2}},
        {"kind": "compose", "outer": {"kind": "additive_types", "s": 2}, "inner": {"kind": "knn_pattern", "k": 2}},
        {"kind": "tensor", "inner": {"kind": "knn_pattern", "k": 1}, "columns": [0, 1, {"cluster_mean": 2}]},
    ]
    for spec in specs:
        s = build_structure(spec, d)
        phi = design_matrix(s, d)
        assert phi.shape[0] == d.total_units


def test_build_structure_knn_cap():
    with pytest.raises(CapExceeded):
        build_structure({"kind": "knn_pattern", "k": 25})


def test_tensor_cluster_mean_column(rng):
    d = make_dataset(rng, 2, sizes=(3, 3), p=2)
    s = TensorWithCovariates(NoInterference(), columns=[0, {"cluster_mean": 1}])
    c = d.clusters[0]
    row = feature_row(s, c, 0, c.treatments)
    xbar = c.covariates[:, 1].mean()
    expected_block = [c.covariates[0, 0], xbar]
    a0 = int(c.treatments[0])
    assert np.allclose(row[2 * a0 : 2 * a0 + 2], expected_block)
    assert np.allclose(row[2 * (1 - a0) : 2 * (1 - a0) + 2], [0.0, 0.0])
