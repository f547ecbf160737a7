"""Low-rank structure feature maps, neighbor graphs, and design assembly.

A structure maps (cluster, unit, treatment pattern) to a feature row; the
observed rows stacked across units form the design matrix whose column space
encodes the assumed interference pattern. Per-unit rows depend on the pattern
only through the unit's own cluster (partial interference).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .core import PATTERN_CAP, as_pattern, enumerate_patterns
from .errors import CapExceeded, DimensionMismatch, InvalidSpec

# ---------- neighbor graphs ----------


def _knn_lists(cluster, k):
    """Per-unit k-nearest-neighbor index lists (within cluster, self excluded).

    Euclidean metric on covariate rows; ties broken by lower unit index.
    """
    key = ("knn", int(k))
    if key in cluster._cache:
        return cluster._cache[key]
    m = cluster.size
    k_eff = min(int(k), m - 1)
    x = cluster.covariates
    d2 = ((x[:, None, :] - x[None, :, :]) ** 2).sum(axis=2)
    np.fill_diagonal(d2, np.inf)
    order = np.argsort(d2, axis=1, kind="stable")[:, :k_eff].astype(np.int64)
    cluster._cache[key] = order
    return order


@dataclass(frozen=True)
class NeighborGraph:
    """Per-cluster, per-unit ordered neighbor lists."""

    order: int
    lists: dict  # cluster_id -> (M_c, k_eff) int64 array

    def neighbors(self, cluster):
        if cluster.cluster_id not in self.lists:
            raise InvalidSpec(f"graph has no entry for cluster {cluster.cluster_id!r}")
        return self.lists[cluster.cluster_id]


def knn_graph(dataset, k):
    """k-nearest-neighbor graph for every cluster of a dataset."""
    if k < 1:
        raise InvalidSpec("k must be >= 1")
    return NeighborGraph(
        order=int(k),
        lists={c.cluster_id: _knn_lists(c, k) for c in dataset.clusters},
    )


def second_order_lists(cluster, nbrs):
    """Units at graph distance exactly two, per unit, sorted ascending."""
    m = cluster.size
    out = []
    sets = [set(row.tolist()) for row in nbrs]
    for i in range(m):
        two = set()
        for j in nbrs[i]:
            two |= sets[int(j)]
        two -= sets[i]
        two.discard(i)
        out.append(np.array(sorted(two), dtype=np.int64))
    return out


# ---------- structure base ----------


class LowRankStructure:
    """Feature map phi_ci(a_c); regime 'fixed' shares one coefficient vector."""

    regime = "fixed"
    label = "structure"
    block_layout = None  # (n_blocks, width) for tensor structures

    def dim(self, cluster=None, i=None):
        raise NotImplementedError

    def feature_row(self, cluster, i, pattern):
        a = self._check(cluster, i, pattern)
        return self.rows_at(cluster, a)[i]

    def rows_at(self, cluster, pattern):
        """Feature rows of every unit at one pattern: (M_c, d)."""
        raise NotImplementedError

    def all_pattern_rows(self, cluster, i, cap=PATTERN_CAP):
        """Feature rows of unit i at every pattern: (2^m, d)."""
        bits = enumerate_patterns(cluster.size, cap)
        return np.stack([self.rows_at(cluster, bits[r])[i] for r in range(bits.shape[0])])

    def expected_rows(self, cluster, probs, cap=PATTERN_CAP):
        """E[phi_ci(A)] under independent Bernoulli(probs) treatments: (M_c, d)."""
        bits = enumerate_patterns(cluster.size, cap)
        masses = _kernels.pattern_masses(np.ascontiguousarray(bits), np.asarray(probs, float))
        out = np.zeros((cluster.size, self.dim(cluster)))
        for r in range(bits.shape[0]):
            if masses[r] != 0.0:
                out += masses[r] * self.rows_at(cluster, bits[r])
        return out

    def pattern_totals(self, cluster, i, cap=PATTERN_CAP):
        """Sum of phi_ci(a) over all 2^m patterns (float)."""
        half = np.full(cluster.size, 0.5)
        return self.expected_rows(cluster, half, cap)[i] * 2.0 ** cluster.size

    def active_blocks(self, cluster, i, pattern):
        """Indices of nonzero feature blocks at a pattern (tensor structures)."""
        if self.block_layout is None:
            raise InvalidSpec(f"structure {self.label!r} has no block layout")
        n_blocks, width = self.block_layout
        row = self.feature_row(cluster, i, pattern)
        return np.nonzero(row.reshape(n_blocks, width).any(axis=1))[0]

    def _check(self, cluster, i, pattern):
        self._check_index(cluster, i)
        a = as_pattern(pattern)
        if a.size != cluster.size:
            raise DimensionMismatch(
                f"pattern length {a.size} != cluster size {cluster.size}"
            )
        return a

    @staticmethod
    def _check_index(cluster, i):
        if not 0 <= int(i) < cluster.size:
            raise DimensionMismatch(f"unit index {i} out of range for size {cluster.size}")


class _SegmentedIndicator(LowRankStructure):
    """Concatenation of one-hot indicator segments with vectorized assembly.

    Subclasses describe segments via `_segment_dims()` and three vectorized
    primitives; everything else (rows, enumeration, expectations) follows.
    """

    def _segment_dims(self):
        raise NotImplementedError  # list of slot counts, cluster independent

    def _segment_slots_at(self, cluster, pattern):
        raise NotImplementedError  # list of (M_c,) slot vectors

    def _segment_slots_all(self, cluster, i, bits):
        raise NotImplementedError  # list of (P,) slot vectors

    def _segment_slot_probs(self, cluster, probs):
        raise NotImplementedError  # list of (M_c, n_slots) probability matrices

    def dim(self, cluster=None, i=None):
        return int(sum(self._segment_dims()))

    def rows_at(self, cluster, pattern):
        a = as_pattern(pattern)
        if a.size != cluster.size:
            raise DimensionMismatch("pattern length != cluster size")
        m = cluster.size
        dims = self._segment_dims()
        out = np.zeros((m, sum(dims)))
        offset = 0
        rows = np.arange(m)
        for d, slots in zip(dims, self._segment_slots_at(cluster, a)):
            out[rows, offset + slots] = 1.0
            offset += d
        return out

    def all_pattern_rows(self, cluster, i, cap=PATTERN_CAP):
        self._check_index(cluster, i)
        bits = enumerate_patterns(cluster.size, cap)
        dims = self._segment_dims()
        out = np.zeros((bits.shape[0], sum(dims)))
        offset = 0
        rows = np.arange(bits.shape[0])
        for d, slots in zip(dims, self._segment_slots_all(cluster, i, bits)):
            out[rows, offset + slots] = 1.0
            offset += d
        return out

    def expected_rows(self, cluster, probs, cap=PATTERN_CAP):
        probs = np.asarray(probs, dtype=np.float64)
        return np.hstack(self._segment_slot_probs(cluster, probs))


def _pad_neighbor_probs(nbrs, probs, k):
    """(M, k) per-slot probabilities; missing neighbor slots get probability 0."""
    m = nbrs.shape[0]
    out = np.zeros((m, k))
    if nbrs.shape[1]:
        out[:, : nbrs.shape[1]] = probs[nbrs]
    return out


class NoInterference(LowRankStructure):
    """Outcome depends on the unit's own treatment only: rows (1-a_i, a_i)."""

    label = "no_interference"

    def dim(self, cluster=None, i=None):
        return 2

    def rows_at(self, cluster, pattern):
        a = as_pattern(pattern)
        if a.size != cluster.size:
            raise DimensionMismatch("pattern length != cluster size")
        out = np.zeros((cluster.size, 2))
        out[np.arange(cluster.size), a.astype(np.int64)] = 1.0
        return out

    def all_pattern_rows(self, cluster, i, cap=PATTERN_CAP):
        self._check_index(cluster, i)
        bits = enumerate_patterns(cluster.size, cap)
        out = np.zeros((bits.shape[0], 2))
        out[np.arange(bits.shape[0]), bits[:, i].astype(np.int64)] = 1.0
        return out

    def expected_rows(self, cluster, probs, cap=PATTERN_CAP):
        pi = np.asarray(probs, dtype=np.float64)
        return np.column_stack([1.0 - pi, pi])

    # composition roles: own bit in, own-treatment indicator out
    def dep_units(self, cluster, i):
        return np.array([i], dtype=np.int64)


class StratifiedCount(LowRankStructure):
    """Count-of-treated indicator over each unit's neighborhood.

    Counts run over the k nearest neighbors (optionally the unit itself too);
    slot r of k+1 (or k+2) is active when exactly r counted units are treated.
    """

    label = "stratified_count"

    def __init__(self, k, include_own=False, graph=None):
        if k < 1:
            raise InvalidSpec("k must be >= 1")
        self.k = int(k)
        self.include_own = bool(include_own)
        self.graph = graph

    def _neighbors(self, cluster):
        if self.graph is not None:
            return self.graph.neighbors(cluster)[:, : self.k]
        return _knn_lists(cluster, self.k)

    def _counted_units(self, cluster):
        nbrs = self._neighbors(cluster)
        if not self.include_own:
            return nbrs
        own = np.arange(cluster.size, dtype=np.int64)[:, None]
        return np.hstack([own, nbrs])

    def dim(self, cluster=None, i=None):
        return self.k + 1 + (1 if self.include_own else 0)

    def rows_at(self, cluster, pattern):
        a = as_pattern(pattern)
        if a.size != cluster.size:
            raise DimensionMismatch("pattern length != cluster size")
        units = self._counted_units(cluster)
        counts = a[units].sum(axis=1).astype(np.int64) if units.shape[1] else np.zeros(
            cluster.size, dtype=np.int64
        )
        out = np.zeros((cluster.size, self.dim()))
        out[np.arange(cluster.size), counts] = 1.0
        return out

    def all_pattern_rows(self, cluster, i, cap=PATTERN_CAP):
        self._check_index(cluster, i)
        bits = enumerate_patterns(cluster.size, cap)
        deps = np.ascontiguousarray(self._counted_units(cluster)[i])
        counts = _kernels.count_slots(np.ascontiguousarray(bits), deps)
        out = np.zeros((bits.shape[0], self.dim()))
        out[np.arange(bits.shape[0]), counts] = 1.0
        return out

    def expected_rows(self, cluster, probs, cap=PATTERN_CAP):
        probs = np.asarray(probs, dtype=np.float64)
        units = self._counted_units(cluster)
        d = self.dim()
        out = np.zeros((cluster.size, d))
        if units.shape[1] == 0:
            out[:, 0] = 1.0
            return out
        pmf = _kernels.pb_pmf_batch(np.ascontiguousarray(probs[units]))
        out[:, : pmf.shape[1]] = pmf
        return out


class KnnPattern(LowRankStructure):
    """Indicator of the exact treatment pattern among the k nearest neighbors.

    Slot index is the binary encoding of the neighbors' treatments in
    neighbor-list order (first neighbor = most significant bit); clusters with
    fewer than k neighbors leave the missing low bits at zero.
    """

    label = "knn_pattern"

    def __init__(self, k, graph=None, cap_bits=PATTERN_CAP):
        if k < 1:
            raise InvalidSpec("k must be >= 1")
        if k > cap_bits:
            raise CapExceeded(k, cap_bits)
        self.k = int(k)
        self.graph = graph

    def _neighbors(self, cluster):
        if self.graph is not None:
            return self.graph.neighbors(cluster)[:, : self.k]
        return _knn_lists(cluster, self.k)

    def dim(self, cluster=None, i=None):
        return 2**self.k

    def _slots_at(self, cluster, a):
        nbrs = self._neighbors(cluster)
        k_eff = nbrs.shape[1]
        if k_eff == 0:
            return np.zeros(cluster.size, dtype=np.int64)
        weights = 2 ** np.arange(self.k - 1, self.k - 1 - k_eff, -1, dtype=np.int64)
        return a[nbrs].astype(np.int64) @ weights

    def rows_at(self, cluster, pattern):
        a = as_pattern(pattern)
        if a.size != cluster.size:
            raise DimensionMismatch("pattern length != cluster size")
        out = np.zeros((cluster.size, self.dim()))
        out[np.arange(cluster.size), self._slots_at(cluster, a)] = 1.0
        return out

    def all_pattern_rows(self, cluster, i, cap=PATTERN_CAP):
        self._check_index(cluster, i)
        bits = enumerate_patterns(cluster.size, cap)
        nbrs = self._neighbors(cluster)[i]
        slots = _kernels.slot_indices(np.ascontiguousarray(bits), np.ascontiguousarray(nbrs))
        slots <<= self.k - nbrs.shape[0]
        out = np.zeros((bits.shape[0], self.dim()))
        out[np.arange(bits.shape[0]), slots] = 1.0
        return out

    def expected_rows(self, cluster, probs, cap=PATTERN_CAP):
        probs = np.asarray(probs, dtype=np.float64)
        nbrs = self._neighbors(cluster)
        slot_probs = _pad_neighbor_probs(nbrs, probs, self.k)
        bits = enumerate_patterns(self.k, max(self.k, PATTERN_CAP))
        mass = np.ones((cluster.size, bits.shape[0]))
        for t in range(self.k):
            p_t = slot_probs[:, t : t + 1]
            mass *= np.where(bits[:, t][None, :] == 1, p_t, 1.0 - p_t)
        return mass

    # composition roles
    def dep_units(self, cluster, i):
        return self._neighbors(cluster)[i]

    def slot_dim(self, k_in):
        return 2**self.k

    def row_on_bits(self, bits_vec):
        b = np.zeros(self.k, dtype=np.int64)
        take = min(self.k, bits_vec.size)
        b[:take] = bits_vec[:take]
        idx = 0
        for t in range(self.k):
            idx = (idx << 1) | int(b[t])
        row = np.zeros(self.dim())
        row[idx] = 1.0
        return row

    def expected_row_on_probs(self, probs_vec):
        p = np.zeros(self.k)
        take = min(self.k, probs_vec.size)
        p[:take] = probs_vec[:take]
        bits = enumerate_patterns(self.k, max(self.k, PATTERN_CAP))
        return _kernels.pattern_masses(np.ascontiguousarray(bits), p)

    def bits_out_on_bits(self, bits_vec):
        b = np.zeros(self.k, dtype=np.int8)
        take = min(self.k, bits_vec.size)
        b[:take] = bits_vec[:take]
        return b


class AdditiveTypes(LowRankStructure):
    """Additive per-type contribution encoding.

    Each of s types contributes a two-slot (untreated, treated) block when a
    unit of that type is present in the cluster; a type occurs at most once
    per cluster. Rows do not vary across units within a cluster.
    """

    label = "additive_types"

    def __init__(self, s, type_source="unit_index"):
        if s < 1:
            raise InvalidSpec("type count must be >= 1")
        self.s = int(s)
        self.type_source = type_source

    def _type_units(self, cluster):
        """(s,) array: unit index carrying each type, -1 when absent."""
        key = ("additive_types", self.s, str(self.type_source))
        if key in cluster._cache:
            return cluster._cache[key]
        out = np.full(self.s, -1, dtype=np.int64)
        if self.type_source == "unit_index":
            types = np.arange(1, cluster.size + 1)
        elif isinstance(self.type_source, dict) and "column" in self.type_source:
            col = int(self.type_source["column"])
            types = cluster.covariates[:, col].astype(np.int64)
        else:
            raise InvalidSpec(f"unknown type_source {self.type_source!r}")
        for u, t in enumerate(types):
            if not 1 <= t <= self.s:
                raise InvalidSpec(f"type {t} outside 1..{self.s}")
            if out[t - 1] != -1:
                raise InvalidSpec(f"type {t} occurs more than once in a cluster")
            out[t - 1] = u
        cluster._cache[key] = out
        return out

    def dim(self, cluster=None, i=None):
        return 2 * self.s

    def _row(self, cluster, a):
        units = self._type_units(cluster)
        row = np.zeros(2 * self.s)
        present = np.nonzero(units >= 0)[0]
        row[2 * present + a[units[present]].astype(np.int64)] = 1.0
        return row

    def rows_at(self, cluster, pattern):
        a = as_pattern(pattern)
        if a.size != cluster.size:
            raise DimensionMismatch("pattern length != cluster size")
        return np.tile(self._row(cluster, a), (cluster.size, 1))

    def all_pattern_rows(self, cluster, i, cap=PATTERN_CAP):
        self._check_index(cluster, i)
        bits = enumerate_patterns(cluster.size, cap)
        units = self._type_units(cluster)
        out = np.zeros((bits.shape[0], 2 * self.s))
        rows = np.arange(bits.shape[0])
        for t in np.nonzero(units >= 0)[0]:
            out[rows, 2 * t + bits[:, units[t]].astype(np.int64)] = 1.0
        return out

    def expected_rows(self, cluster, probs, cap=PATTERN_CAP):
        probs = np.asarray(probs, dtype=np.float64)
        units = self._type_units(cluster)
        row = np.zeros(2 * self.s)
        present = np.nonzero(units >= 0)[0]
        row[2 * present] = 1.0 - probs[units[present]]
        row[2 * present + 1] = probs[units[present]]
        return np.tile(row, (cluster.size, 1))

    # composition role: additive encoding of ordered slot bits
    def slot_dim(self, k_in):
        return 2 * self.s

    def row_on_bits(self, bits_vec):
        row = np.zeros(2 * self.s)
        for t in range(min(self.s, bits_vec.size)):
            row[2 * t + int(bits_vec[t])] = 1.0
        return row

    def expected_row_on_probs(self, probs_vec):
        row = np.zeros(2 * self.s)
        for t in range(min(self.s, probs_vec.size)):
            row[2 * t] = 1.0 - probs_vec[t]
            row[2 * t + 1] = probs_vec[t]
        return row


class CoarsenedCount(_SegmentedIndicator):
    """Own-treatment block plus binned treated-neighbor counts.

    Order 1 bins the count of treated direct neighbors into three categories
    (low/medium/high by thresholds); order 2 adds the same for units at graph
    distance exactly two. Default thresholds are the 33rd/67th percentiles of
    the observed raw counts across all units (supply a dataset at build time).
    """

    label = "coarsened_count"

    def __init__(self, order=1, thresholds=None, k=None, graph=None):
        if order not in (1, 2):
            raise InvalidSpec("order must be 1 or 2")
        if graph is None and k is None:
            raise InvalidSpec("CoarsenedCount needs a neighbor graph or k")
        self.order = int(order)
        self.k = int(k) if k is not None else None
        self.graph = graph
        if thresholds is not None:
            thresholds = self._norm_thresholds(thresholds)
        self.thresholds = thresholds

    def _norm_thresholds(self, thresholds):
        arr = np.asarray(thresholds, dtype=np.float64)
        if arr.ndim == 1:
            arr = np.tile(arr, (self.order, 1))
        if arr.shape != (self.order, 2):
            raise InvalidSpec("thresholds must be one or `order` (low, high) pairs")
        if (arr[:, 0] > arr[:, 1]).any():
            raise InvalidSpec("thresholds must be non-decreasing")
        return arr

    def _neighbors(self, cluster):
        if self.graph is not None:
            return self.graph.neighbors(cluster)
        return _knn_lists(cluster, self.k)

    def _level_units(self, cluster):
        key = ("coarsened_units", self.order, self.k, id(self.graph))
        if key in cluster._cache:
            return cluster._cache[key]
        nbrs = self._neighbors(cluster)
        levels = [[np.asarray(row, dtype=np.int64) for row in nbrs]]
        if self.order == 2:
            levels.append(second_order_lists(cluster, nbrs))
        cluster._cache[key] = levels
        return levels

    def fit_thresholds(self, dataset):
        """33rd/67th percentile thresholds of observed raw counts, per level."""
        counts = [[] for _ in range(self.order)]
        for c in dataset.clusters:
            for lvl, units in enumerate(self._level_units(c)):
                for i in range(c.size):
                    counts[lvl].append(int(c.treatments[units[i]].sum()))
        self.thresholds = np.array(
            [np.percentile(np.asarray(v, float), [33, 67]) for v in counts]
        )
        return self.thresholds

    def _require_thresholds(self):
        if self.thresholds is None:
            raise InvalidSpec(
                "CoarsenedCount thresholds not set; pass thresholds or fit from a dataset"
            )
        return self.thresholds

    def _bin(self, counts, lvl):
        t1, t2 = self._require_thresholds()[lvl]
        return np.where(counts <= t1, 0, np.where(counts <= t2, 1, 2)).astype(np.int64)

    def _segment_dims(self):
        return [2] + [3] * self.order

    def _segment_slots_at(self, cluster, a):
        slots = [a.astype(np.int64)]
        for lvl, units in enumerate(self._level_units(cluster)):
            counts = np.array([a[u].sum() for u in units], dtype=np.int64)
            slots.append(self._bin(counts, lvl))
        return slots

    def _segment_slots_all(self, cluster, i, bits):
        slots = [bits[:, i].astype(np.int64)]
        for lvl, units in enumerate(self._level_units(cluster)):
            counts = _kernels.count_slots(
                np.ascontiguousarray(bits), np.ascontiguousarray(units[i])
            )
            slots.append(self._bin(counts, lvl))
        return slots

    def _segment_slot_probs(self, cluster, probs):
        m = cluster.size
        own = np.column_stack([1.0 - probs, probs])
        mats = [own]
        for lvl, units in enumerate(self._level_units(cluster)):
            t1, t2 = self._require_thresholds()[lvl]
            mat = np.zeros((m, 3))
            for i in range(m):
                u = units[i]
                if u.size == 0:
                    pmf = np.array([1.0])
                else:
                    pmf = _kernels.pb_pmf(np.ascontiguousarray(probs[u]))
                counts = np.arange(pmf.size)
                mat[i, 0] = pmf[counts <= t1].sum()
                mat[i, 1] = pmf[(counts > t1) & (counts <= t2)].sum()
                mat[i, 2] = pmf[counts > t2].sum()
            mats.append(mat)
        return mats


# ---------- exposure mappings ----------


class ExposureMapping:
    """Finite-valued function of the cluster pattern, per unit."""

    label = "exposure"

    def n_classes(self, cluster, i):
        raise NotImplementedError

    def class_of(self, cluster, i, pattern):
        raise NotImplementedError

    def classes_for(self, cluster, i, bits):
        return np.array(
            [self.class_of(cluster, i, bits[r]) for r in range(bits.shape[0])],
            dtype=np.int64,
        )

    def class_probability(self, cluster, i, pattern, propensity):
        """Analytic probability of the observed pattern's class, when available."""
        return None

    fixed_dim = None  # class count when it does not vary with (cluster, i)


class OwnTreatment(ExposureMapping):
    label = "own_treatment"
    fixed_dim = 2

    def n_classes(self, cluster, i):
        return 2

    def class_of(self, cluster, i, pattern):
        return int(as_pattern(pattern)[i])

    def classes_for(self, cluster, i, bits):
        return bits[:, i].astype(np.int64)

    def class_probability(self, cluster, i, pattern, propensity):
        if not hasattr(propensity, "unit_probs"):
            return None
        pi = propensity.unit_probs(cluster)[i]
        return pi if as_pattern(pattern)[i] == 1 else 1.0 - pi


class NeighborPattern(ExposureMapping):
    """Exact treatment pattern of the k nearest neighbors."""

    label = "neighbor_pattern"

    def __init__(self, k, graph=None):
        self.inner = KnnPattern(k, graph=graph)
        self.k = int(k)
        self.fixed_dim = 2**self.k

    def n_classes(self, cluster, i):
        return 2**self.k

    def class_of(self, cluster, i, pattern):
        a = as_pattern(pattern)
        return int(self.inner._slots_at(cluster, a)[i])

    def classes_for(self, cluster, i, bits):
        nbrs = self.inner._neighbors(cluster)[i]
        slots = _kernels.slot_indices(np.ascontiguousarray(bits), np.ascontiguousarray(nbrs))
        return slots << (self.k - nbrs.shape[0])

    def class_probability(self, cluster, i, pattern, propensity):
        if not hasattr(propensity, "unit_probs"):
            return None
        pi = propensity.unit_probs(cluster)
        nbrs = self.inner._neighbors(cluster)[i]
        a = as_pattern(pattern)[nbrs]
        return float(np.prod(np.where(a == 1, pi[nbrs], 1.0 - pi[nbrs])))


class NeighborCount(ExposureMapping):
    """Number of treated units among the k nearest neighbors."""

    label = "neighbor_count"

    def __init__(self, k, include_own=False, graph=None):
        self.inner = StratifiedCount(k, include_own=include_own, graph=graph)
        self.k = int(k)
        self.fixed_dim = self.inner.dim()

    def n_classes(self, cluster, i):
        return self.inner.dim()

    def class_of(self, cluster, i, pattern):
        a = as_pattern(pattern)
        units = self.inner._counted_units(cluster)[i]
        return int(a[units].sum())

    def classes_for(self, cluster, i, bits):
        units = self.inner._counted_units(cluster)[i]
        return _kernels.count_slots(np.ascontiguousarray(bits), np.ascontiguousarray(units))

    def class_probability(self, cluster, i, pattern, propensity):
        if not hasattr(propensity, "unit_probs"):
            return None
        pi = propensity.unit_probs(cluster)
        units = self.inner._counted_units(cluster)[i]
        pmf = _kernels.pb_pmf(np.ascontiguousarray(pi[units]))
        return float(pmf[self.class_of(cluster, i, pattern)])


class IdentityMapping(ExposureMapping):
    """Each pattern is its own class (lexicographic index)."""

    label = "identity"

    def n_classes(self, cluster, i):
        return 2**cluster.size

    def class_of(self, cluster, i, pattern):
        a = as_pattern(pattern)
        idx = 0
        for b in a:
            idx = (idx << 1) | int(b)
        return idx

    def classes_for(self, cluster, i, bits):
        deps = np.arange(cluster.size, dtype=np.int64)
        return _kernels.slot_indices(np.ascontiguousarray(bits), deps)

    def class_probability(self, cluster, i, pattern, propensity):
        return propensity.probability(pattern, cluster)


class ConstantMapping(ExposureMapping):
    label = "constant"
    fixed_dim = 1

    def n_classes(self, cluster, i):
        return 1

    def class_of(self, cluster, i, pattern):
        return 0

    def classes_for(self, cluster, i, bits):
        return np.zeros(bits.shape[0], dtype=np.int64)

    def class_probability(self, cluster, i, pattern, propensity):
        return 1.0


class FromExposureMapping(LowRankStructure):
    """Indicator structure over an exposure mapping's classes."""

    def __init__(self, mapping):
        self.mapping = mapping
        self.label = f"exposure[{mapping.label}]"
        if mapping.fixed_dim is None:
            self.regime = "per_unit"

    def dim(self, cluster=None, i=None):
        if self.mapping.fixed_dim is not None:
            return self.mapping.fixed_dim
        if cluster is None or i is None:
            raise InvalidSpec("per-unit structure dimension needs (cluster, i)")
        return self.mapping.n_classes(cluster, i)

    def feature_row(self, cluster, i, pattern):
        a = self._check(cluster, i, pattern)
        row = np.zeros(self.dim(cluster, i))
        row[self.mapping.class_of(cluster, i, a)] = 1.0
        return row

    def rows_at(self, cluster, pattern):
        if self.regime != "fixed":
            raise InvalidSpec("per-unit structure has no stacked design rows")
        a = as_pattern(pattern)
        return np.stack([self.feature_row(cluster, i, a) for i in range(cluster.size)])

    def all_pattern_rows(self, cluster, i, cap=PATTERN_CAP):
        bits = enumerate_patterns(cluster.size, cap)
        classes = self.mapping.classes_for(cluster, i, bits)
        out = np.zeros((bits.shape[0], self.dim(cluster, i)))
        out[np.arange(bits.shape[0]), classes] = 1.0
        return out

    def expected_rows(self, cluster, probs, cap=PATTERN_CAP):
        if self.regime != "fixed":
            raise InvalidSpec("per-unit structure has no stacked design rows")
        probs = np.asarray(probs, dtype=np.float64)
        bits = enumerate_patterns(cluster.size, cap)
        masses = _kernels.pattern_masses(np.ascontiguousarray(bits), probs)
        out = np.zeros((cluster.size, self.dim()))
        for i in range(cluster.size):
            classes = self.mapping.classes_for(cluster, i, bits)
            out[i] = _kernels.weighted_slot_sums(classes, masses, self.dim())
        return out


class Compose(LowRankStructure):
    """Chained structure per the product-of-encodings construction.

    The inner structure must be pattern valued (it exposes the ordered unit
    indices its features depend on); the outer structure re-encodes those
    dependency bits. Realizes the matrix product of the two encodings.
    """

    def __init__(self, outer, inner):
        for attr in ("slot_dim", "row_on_bits", "expected_row_on_probs"):
            if not hasattr(outer, attr):
                raise InvalidSpec(
                    f"outer structure {outer.label!r} does not support composition"
                )
        if not hasattr(inner, "dep_units"):
            raise InvalidSpec(
                f"inner structure {inner.label!r} is not pattern valued"
            )
        self.outer = outer
        self.inner = inner
        self.label = f"compose[{outer.label} o {inner.label}]"

    def dim(self, cluster=None, i=None):
        return self.outer.slot_dim(getattr(self.inner, "k", 1))

    def feature_row(self, cluster, i, pattern):
        a = self._check(cluster, i, pattern)
        deps = self.inner.dep_units(cluster, i)
        return self.outer.row_on_bits(a[deps])

    def rows_at(self, cluster, pattern):
        a = as_pattern(pattern)
        if a.size != cluster.size:
            raise DimensionMismatch("pattern length != cluster size")
        return np.stack(
            [self.outer.row_on_bits(a[self.inner.dep_units(cluster, i)]) for i in range(cluster.size)]
        )

    def expected_rows(self, cluster, probs, cap=PATTERN_CAP):
        probs = np.asarray(probs, dtype=np.float64)
        return np.stack(
            [
                self.outer.expected_row_on_probs(probs[self.inner.dep_units(cluster, i)])
                for i in range(cluster.size)
            ]
        )

    # composition roles (outer must itself be pattern valued)
    def dep_units(self, cluster, i):
        deps = self.inner.dep_units(cluster, i)
        if not hasattr(self.outer, "bits_out_on_bits"):
            raise InvalidSpec(f"outer {self.outer.label!r} is not pattern valued")
        keep = min(getattr(self.outer, "k"), deps.size)
        return deps[:keep]

    def slot_dim(self, k_in):
        return self.outer.slot_dim(k_in)

    def row_on_bits(self, bits_vec):
        return self.outer.row_on_bits(bits_vec)

    def expected_row_on_probs(self, probs_vec):
        return self.outer.expected_row_on_probs(probs_vec)


class TensorWithCovariates(LowRankStructure):
    """Kronecker of an indicator encoding with a per-unit covariate vector.

    Each of the inner structure's entries becomes a block of covariate
    columns; column slots are raw covariate indices/names or within-cluster
    means of a column.
    """

    def __init__(self, inner, columns=None, label=None):
        self.inner = inner
        self.columns = columns  # None -> all raw columns
        self.label = label or f"tensor[{inner.label}]"

    def _slots(self, p):
        if self.columns is None:
            return [("col", j) for j in range(p)]
        out = []
        for c in self.columns:
            if isinstance(c, (int, np.integer)):
                out.append(("col", int(c)))
            elif isinstance(c, str) and c.startswith("x"):
                out.append(("col", int(c[1:]) - 1))
            elif isinstance(c, dict) and "cluster_mean" in c:
                out.append(("cluster_mean", int(c["cluster_mean"])))
            elif isinstance(c, (tuple, list)) and c[0] == "cluster_mean":
                out.append(("cluster_mean", int(c[1])))
            else:
                raise InvalidSpec(f"unknown covariate slot {c!r}")
        return out

    def covariate_rows(self, cluster):
        key = ("tensor_cov", str(self.columns))
        if key in cluster._cache:
            return cluster._cache[key]
        slots = self._slots(cluster.p)
        cols = []
        for kind, j in slots:
            if j >= cluster.p:
                raise InvalidSpec(f"covariate column {j} out of range (p={cluster.p})")
            if kind == "col":
                cols.append(cluster.covariates[:, j])
            else:
                cols.append(np.full(cluster.size, cluster.covariates[:, j].mean()))
        out = np.column_stack(cols)
        cluster._cache[key] = out
        return out

    @property
    def block_layout(self):
        width = len(self.columns) if self.columns is not None else None
        if width is None:
            return None
        return (self.inner.dim(), width)

    def width(self, cluster):
        return len(self._slots(cluster.p))

    def dim(self, cluster=None, i=None):
        if self.columns is None:
            if cluster is None:
                raise InvalidSpec("dimension needs a cluster when columns default to all")
            return self.inner.dim(cluster, i) * cluster.p
        return self.inner.dim(cluster, i) * len(self.columns)

    @property
    def regime(self):
        return self.inner.regime

    def feature_row(self, cluster, i, pattern):
        a = self._check(cluster, i, pattern)
        return np.kron(self.inner.feature_row(cluster, i, a), self.covariate_rows(cluster)[i])

    def rows_at(self, cluster, pattern):
        inner = self.inner.rows_at(cluster, pattern)
        x = self.covariate_rows(cluster)
        return np.einsum("ub,uw->ubw", inner, x).reshape(cluster.size, -1)

    def all_pattern_rows(self, cluster, i, cap=PATTERN_CAP):
        inner = self.inner.all_pattern_rows(cluster, i, cap)
        return np.kron(inner, self.covariate_rows(cluster)[i][None, :]).reshape(
            inner.shape[0], -1
        )

    def expected_rows(self, cluster, probs, cap=PATTERN_CAP):
        inner = self.inner.expected_rows(cluster, probs, cap)
        x = self.covariate_rows(cluster)
        return np.einsum("ub,uw->ubw", inner, x).reshape(cluster.size, -1)

    def active_blocks(self, cluster, i, pattern):
        a = self._check(cluster, i, pattern)
        return np.nonzero(self.inner.feature_row(cluster, i, a))[0]

    def inner_pattern_totals(self, cluster, i, cap=PATTERN_CAP):
        return self.inner.pattern_totals(cluster, i, cap)


class PerUnitStructure(LowRankStructure):
    """Marks a feature map as carrying per-unit coefficient blocks."""

    regime = "per_unit"

    def __init__(self, base):
        self.base = base
        self.label = f"per_unit[{base.label}]"

    def dim(self, cluster=None, i=None):
        return self.base.dim(cluster, i)

    def feature_row(self, cluster, i, pattern):
        return self.base.feature_row(cluster, i, pattern)

    def all_pattern_rows(self, cluster, i, cap=PATTERN_CAP):
        return self.base.all_pattern_rows(cluster, i, cap)


# ---------- builders ----------


def build_structure(spec, dataset=None):
    """Build a structure from a JSON-style spec document (dicts all the way)."""
    if isinstance(spec, LowRankStructure):
        return spec
    if not isinstance(spec, dict) or "kind" not in spec:
        raise InvalidSpec("structure spec must be a dict with a 'kind' key")
    kind = spec["kind"]
    if kind == "no_interference":
        inner = NoInterference()
    elif kind == "stratified_count":
        inner = StratifiedCount(spec["k"], include_own=spec.get("include_own", False))
    elif kind == "knn_pattern":
        inner = KnnPattern(spec["k"])
    elif kind == "additive_types":
        inner = AdditiveTypes(spec["s"], type_source=spec.get("type_source", "unit_index"))
    elif kind == "coarsened_count":
        inner = CoarsenedCount(
            order=spec.get("order", 1),
            thresholds=spec.get("thresholds"),
            k=spec.get("k"),
        )
        if inner.thresholds is None:
            if dataset is None:
                raise InvalidSpec("coarsened_count default thresholds need a dataset")
            inner.fit_thresholds(dataset)
    elif kind == "exposure":
        inner = FromExposureMapping(exposure_from_spec(spec["mapping"]))
    elif kind == "compose":
        inner = Compose(
            build_structure(spec["outer"], dataset), build_structure(spec["inner"], dataset)
        )
    elif kind == "tensor":
        return TensorWithCovariates(
            build_structure(spec["inner"], dataset),
            columns=spec.get("columns"),
            label=spec.get("label"),
        )
    elif kind == "per_unit":
        return PerUnitStructure(build_structure(spec["inner"], dataset))
    else:
        raise InvalidSpec(f"unknown structure kind {kind!r}")
    if spec.get("tensor_covariates"):
        return TensorWithCovariates(inner, columns=spec.get("columns"))
    return inner


def exposure_from_spec(spec):
    if isinstance(spec, ExposureMapping):
        return spec
    if isinstance(spec, str):
        spec = {"name": spec}
    name = spec.get("name")
    if name == "own_treatment":
        return OwnTreatment()
    if name == "neighbor_pattern":
        return NeighborPattern(spec["k"])
    if name == "neighbor_count":
        return NeighborCount(spec["k"], include_own=spec.get("include_own", False))
    if name == "identity":
        return IdentityMapping()
    if name == "constant":
        return ConstantMapping()
    raise InvalidSpec(f"unknown exposure mapping {spec!r}")


# ---------- design assembly ----------


def feature_row(structure, cluster, i, pattern):
    """Feature vector of one (cluster, unit, pattern) triple."""
    return structure.feature_row(cluster, i, pattern)


def design_matrix(structure, dataset):
    """Observed design: rows phi_ci(A_c) stacked in dataset unit order."""
    if structure.regime != "fixed":
        raise InvalidSpec("design matrices need a fixed-dimension structure")
    return np.vstack([structure.rows_at(c, c.treatments) for c in dataset.clusters])


def target_contributions(structure, dataset, weight, cap=PATTERN_CAP):
    """Per-cluster aggregated counterfactual feature loads: (n, d).

    Row c is (1/M_c) * sum_{a in support(f)} f(a, X_c) * sum_i phi_ci(a),
    evaluated through the intervention's product form when it has one.
    """
    if structure.regime != "fixed":
        raise InvalidSpec("target vectors need a fixed-dimension structure")
    d = structure.dim(dataset.clusters[0])
    out = np.zeros((dataset.n, d))
    for ci, c in enumerate(dataset.clusters):
        probs = weight.marginal_probs(c)
        if probs is not None:
            out[ci] = structure.expected_rows(c, probs, cap).mean(axis=0)
        else:
            acc = np.zeros(d)
            for pat, w in weight.support(c, cap):
                acc += w * structure.rows_at(c, pat).sum(axis=0)
            out[ci] = acc / c.size
    return out


def target_vector(structure, dataset, weight, cap=PATTERN_CAP):
    """Aggregated target of the balancing equations."""
    return target_contributions(structure, dataset, weight, cap).sum(axis=0)


def nested_rank_check(small, large, dataset, rcond=None):
    """True when the smaller structure's observed design lies in the larger's span."""
    phi_s = design_matrix(small, dataset)
    phi_l = design_matrix(large, dataset)
    stacked = np.hstack([phi_s, phi_l])
    tol_l = _rank_tol(phi_l, rcond)
    tol_s = _rank_tol(stacked, rcond)
    return int(np.linalg.matrix_rank(stacked, tol=tol_s)) == int(
        np.linalg.matrix_rank(phi_l, tol=tol_l)
    )


def _rank_tol(a, rcond):
    if rcond is None:
        return None
    s = np.linalg.svd(a, compute_uv=False)
    return rcond * (s[0] if s.size else 1.0)
