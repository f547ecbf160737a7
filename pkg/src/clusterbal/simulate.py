"""Data-generating processes and the Monte-Carlo harness.

Clusters are drawn i.i.d.: sizes from a two-point law, covariates from a
Toeplitz-correlated normal, treatments from a probit assignment law, and
outcomes from a linear low-rank signal plus homoskedastic noise. The
counterfactual policy is a tilted intervention from the same probit family.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np
from scipy.special import ndtr

from .core import ClusterSample, Dataset, probit_intervention, probit_propensity
from .errors import CalibrationFailed, InvalidSpec
from .estimators import (
    balancing_fit,
    build_design,
    exposure_collapsed_ipw,
    ipw_fit,
    projection_fit,
    weighted_projection_fit,
)
from .inference import iid_cluster_variance, sandwich_variance
from .structures import (
    AdditiveTypes,
    KnnPattern,
    StratifiedCount,
    TensorWithCovariates,
    _knn_lists,
)

_STREAM_DATA = 0
_STREAM_CALIBRATION = 1
_STREAM_TRUTH = 2

DEFAULT_ESTIMATORS = ("ipw", "balancing", "projection")


@dataclass(frozen=True)
class DGPConfig:
    n: int
    interference: str = "knn5"  # knn5 | stratified5 | additive
    kappa: float = 0.2
    snr_target: float = 0.2
    sigma2: float = 1.0
    rho: float = 0.5
    cluster_sizes: tuple = ((10, 0.5), (15, 0.5))
    p: int = 4
    seed: int = 0
    gamma: float | None = None  # signal scale; calibrated from snr_target when None

    def __post_init__(self):
        if self.n < 1:
            raise InvalidSpec("n must be >= 1")
        if self.interference not in (
            "knn1", "knn2", "knn3", "knn4", "knn5", "stratified5", "additive"
        ):
            raise InvalidSpec(f"unknown interference kind {self.interference!r}")
        if not -1.0 < self.rho < 1.0:
            raise InvalidSpec("rho must lie in (-1, 1)")
        if self.sigma2 <= 0:
            raise InvalidSpec("sigma2 must be positive")
        if self.snr_target <= 0:
            raise InvalidSpec("snr_target must be positive")
        sizes = tuple((int(m), float(q)) for m, q in self.cluster_sizes)
        if abs(sum(q for _, q in sizes) - 1.0) > 1e-10:
            raise InvalidSpec("cluster size probabilities must sum to 1")
        if any(m < 1 or q < 0 for m, q in sizes):
            raise InvalidSpec("cluster sizes must be >= 1 with nonnegative probabilities")
        object.__setattr__(self, "cluster_sizes", sizes)
        if self.p != 4:
            raise InvalidSpec("the simulation design uses p = 4 covariates")


_DGP_COLUMNS = [0, 1, 2, {"cluster_mean": 3}]


def dgp_structure(cfg):
    """The true low-rank structure of the configured interference kind."""
    if cfg.interference.startswith("knn"):
        inner = KnnPattern(int(cfg.interference[3:]))
    elif cfg.interference == "stratified5":
        inner = StratifiedCount(5, include_own=False)
    else:
        inner = AdditiveTypes(max(m for m, _ in cfg.cluster_sizes), type_source="unit_index")
    return TensorWithCovariates(inner, columns=_DGP_COLUMNS, label=cfg.interference)


def dgp_h(cfg, gamma):
    """Coefficient vector of the configured interference kind, scaled by gamma.

    The k-NN kinds assign the values 1..2^k to the neighbor-pattern slots in
    bit-reversed enumeration order, so that the t-th nearest neighbor's
    treatment contributes 2^(t-1): every rung of the candidate ladder then
    misses a detectable signal component.
    """
    if cfg.interference.startswith("knn"):
        k = int(cfg.interference[3:])
        slots = np.arange(2**k)
        base = np.ones(2**k)
        for t in range(1, k + 1):
            bit = (slots >> (k - t)) & 1
            base += bit * 2.0 ** (t - 1)
    elif cfg.interference == "stratified5":
        base = np.arange(1, 7, dtype=np.float64)
    else:
        s = max(m for m, _ in cfg.cluster_sizes)
        base = np.zeros(2 * s)
        base[1::2] = np.arange(1, s + 1)
    return gamma * np.kron(base, np.ones(cfg.p))


def _toeplitz_chol(rho, p):
    cov = rho ** np.abs(np.subtract.outer(np.arange(p), np.arange(p)))
    return np.linalg.cholesky(cov)


def _rng(cfg, stream, index=0):
    return np.random.default_rng(
        np.random.SeedSequence([int(cfg.seed), int(stream), int(index)])
    )


def _draw_sizes(cfg, rng, n):
    sizes = np.array([m for m, _ in cfg.cluster_sizes])
    probs = np.array([q for _, q in cfg.cluster_sizes])
    return rng.choice(sizes, size=n, p=probs)


def _probit_terms(x, kappa):
    cluster_term = x.mean(axis=0).sum() / math.sqrt(x.shape[1])
    return ndtr(cluster_term + kappa * x.mean(axis=1))


def gen_dataset(cfg, replicate_index, truth=True):
    """One replicate: (dataset, true_mu_f, propensity model, counterfactual weight).

    Deterministic in (cfg, replicate_index); the returned truth is the
    population estimand shared by every replicate of the config (truth=False
    skips its computation and returns None in that slot).
    """
    cfg = resolve_gamma(cfg)
    rng = _rng(cfg, _STREAM_DATA, replicate_index)
    chol = _toeplitz_chol(cfg.rho, cfg.p)
    structure = dgp_structure(cfg)
    h = dgp_h(cfg, cfg.gamma)
    sigma = math.sqrt(cfg.sigma2)
    sizes = _draw_sizes(cfg, rng, cfg.n)
    clusters = []
    for ci, m in enumerate(sizes):
        x = rng.standard_normal((m, cfg.p)) @ chol.T
        pi0 = _probit_terms(x, 0.0)
        a = (rng.random(m) < pi0).astype(np.int8)
        tmp = ClusterSample(covariates=x, treatments=a, outcomes=np.zeros(m), cluster_id=ci)
        g = structure.rows_at(tmp, a) @ h
        y = g + sigma * rng.standard_normal(m)
        cluster = ClusterSample(covariates=x, treatments=a, outcomes=y, cluster_id=ci)
        cluster._cache.update(tmp._cache)
        clusters.append(cluster)
    dataset = Dataset(clusters=tuple(clusters))
    mu = true_mu(cfg)[0] if truth else None
    return dataset, mu, probit_propensity(0.0), probit_intervention(cfg.kappa)


def conditional_true_mu(cfg, dataset):
    """Conditional-on-covariates estimand of one dataset: t^T h / n."""
    cfg = resolve_gamma(cfg)
    structure = dgp_structure(cfg)
    h = dgp_h(cfg, cfg.gamma)
    design = build_design(structure, dataset, probit_intervention(cfg.kappa))
    return float(design.target @ h / dataset.n)


def _expected_signal_from_x(cfg, gamma, x):
    """Closed-form per-cluster counterfactual means from covariates (B, m, p).

    Exploits the product form of the intervention and the count/pattern/
    additive encodings: the inner pattern sum reduces to per-neighbor
    marginals, so no pattern enumeration is needed.
    """
    m = x.shape[1]
    cluster_term = x.mean(axis=1).sum(axis=1) / math.sqrt(cfg.p)
    pik = ndtr(cluster_term[:, None] + cfg.kappa * x.mean(axis=2))
    s = x[:, :, :3].sum(axis=2) + x[:, :, 3].mean(axis=1)[:, None]
    if cfg.interference == "additive":
        types = np.arange(1, m + 1, dtype=np.float64)
        return gamma * (pik @ types) * s.mean(axis=1)
    k = int(cfg.interference[3:]) if cfg.interference.startswith("knn") else 5
    d2 = ((x[:, :, None, :] - x[:, None, :, :]) ** 2).sum(axis=3)
    idx = np.arange(m)
    d2[:, idx, idx] = np.inf
    nbrs = np.argsort(d2, axis=2, kind="stable")[:, :, :k]
    pik_nbrs = pik[np.arange(x.shape[0])[:, None, None], nbrs]
    if cfg.interference.startswith("knn"):
        weights = 2.0 ** np.arange(k - 1, -1, -1)
        expected_slot = pik_nbrs @ weights
    else:
        expected_slot = pik_nbrs.sum(axis=2)
    return gamma * ((expected_slot + 1.0) * s).mean(axis=1)


@lru_cache(maxsize=32)
def _true_mu_cached(cfg, draws):
    cfg = resolve_gamma(cfg)
    rng = _rng(cfg, _STREAM_TRUTH)
    chol = _toeplitz_chol(cfg.rho, cfg.p)
    vals = []
    for m, q in cfg.cluster_sizes:
        k = max(1, int(round(draws * q)))
        chunks = []
        done = 0
        while done < k:
            b = min(20_000, k - done)
            x = rng.standard_normal((b, m, cfg.p)) @ chol.T
            chunks.append(_expected_signal_from_x(cfg, cfg.gamma, x))
            done += b
        vals.append((q, np.concatenate(chunks)))
    mu = sum(q * v.mean() for q, v in vals)
    var = sum(q * q * v.var(ddof=1) / v.size for q, v in vals)
    return float(mu), float(math.sqrt(var))


def true_mu(cfg, draws=400_000):
    """Population estimand of a config by stratified cluster Monte Carlo.

    Returns (mu, standard error); cached per config so replicates share one
    evaluation.
    """
    return _true_mu_cached(resolve_gamma(cfg), int(draws))


@dataclass(frozen=True)
class CalibrationReport:
    gamma: float
    snr_at_unit_gamma: float
    se_gamma: float
    draws: int


def calibrate_snr(cfg, draws=2000):
    """Signal scale hitting the target signal-to-noise ratio.

    SNR(gamma) = Var[g^T w_IPW] / (sigma2 * E||w_IPW||^2) is quadratic in
    gamma, so gamma = sqrt(target / SNR(1)) with both moments estimated from
    `draws` simulated clusters under the assignment law (fixed sub-seed).
    """
    rng = _rng(cfg, _STREAM_CALIBRATION)
    chol = _toeplitz_chol(cfg.rho, cfg.p)
    structure = dgp_structure(cfg)
    h1 = dgp_h(cfg, 1.0)
    sizes = _draw_sizes(cfg, rng, draws)
    signal = np.empty(draws)
    norm2 = np.empty(draws)
    for r, m in enumerate(sizes):
        x = rng.standard_normal((m, cfg.p)) @ chol.T
        pi0 = _probit_terms(x, 0.0)
        a = (rng.random(m) < pi0).astype(np.int8)
        pik = _probit_terms(x, cfg.kappa)
        af = a.astype(np.float64)
        ratio = np.prod(np.where(af == 1, pik / pi0, (1.0 - pik) / (1.0 - pi0)))
        w_scalar = ratio / m
        tmp = ClusterSample(covariates=x, treatments=a, outcomes=np.zeros(m), cluster_id=r)
        g = structure.rows_at(tmp, a) @ h1
        signal[r] = w_scalar * g.sum()
        norm2[r] = m * w_scalar**2
    num = float(signal.var(ddof=1))
    den = float(cfg.sigma2 * norm2.mean())
    if num <= 0 or den <= 0:
        raise CalibrationFailed(f"degenerate SNR moments: var={num}, denom={den}")
    snr1 = num / den
    gamma = math.sqrt(cfg.snr_target / snr1)
    # delta-method standard error of the variance-ratio calibration
    centered = signal - signal.mean()
    se_num = math.sqrt(max(np.var(centered**2, ddof=1), 0.0) / draws)
    se_den = cfg.sigma2 * float(norm2.std(ddof=1)) / math.sqrt(draws)
    se_snr = snr1 * math.sqrt((se_num / num) ** 2 + (se_den / den) ** 2)
    se_gamma = 0.5 * gamma * se_snr / snr1
    return CalibrationReport(gamma=gamma, snr_at_unit_gamma=snr1, se_gamma=se_gamma, draws=draws)


@lru_cache(maxsize=32)
def _gamma_cached(key_cfg):
    return calibrate_snr(key_cfg).gamma


def resolve_gamma(cfg):
    """Config with gamma fixed (calibrating it from snr_target when unset)."""
    if cfg.gamma is not None:
        return cfg
    # calibration does not depend on the number of clusters, so key on n=1
    return replace(cfg, gamma=_gamma_cached(replace(cfg, n=1, gamma=None)))


# ---------- Monte Carlo ----------


def _fit_one(name, dataset, structure, weight, propensity, level, design):
    if name == "ipw":
        fit = ipw_fit(dataset, weight, propensity)
        var = iid_cluster_variance(dataset, fit, level)
    elif name == "balancing":
        fit = balancing_fit(dataset, structure, weight, design=design)
        var = (
            sandwich_variance(dataset, structure, weight, fit, "bal", level=level)
            if fit.feasible
            else None
        )
    elif name == "projection":
        fit = projection_fit(dataset, structure, weight, propensity, design=design)
        var = sandwich_variance(
            dataset, structure, weight, fit, "proj", propensity=propensity, level=level
        )
    elif name == "wproj":
        fit = weighted_projection_fit(dataset, structure, weight, propensity)
        var = sandwich_variance(
            dataset, structure, weight, fit, "wproj", propensity=propensity, level=level
        )
    elif name == "exposure-ipw":
        mapping = getattr(structure, "exposure_mapping", None)
        if mapping is None:
            raise InvalidSpec("exposure-ipw needs an exposure-mapping structure")
        fit = exposure_collapsed_ipw(dataset, mapping, weight, propensity)
        var = iid_cluster_variance(dataset, fit, level)
    else:
        raise InvalidSpec(f"unknown estimator {name!r}")
    return {
        "point": fit.point,
        "feasible": bool(fit.feasible),
        "ci_low": var.ci_low if var is not None else float("nan"),
        "ci_high": var.ci_high if var is not None else float("nan"),
    }


def _replicate(cfg, replicate_index, estimators, level):
    dataset, _, propensity, weight = gen_dataset(cfg, replicate_index, truth=False)
    structure = dgp_structure(cfg)
    design = None
    if any(e in ("balancing", "projection") for e in estimators):
        design = build_design(structure, dataset, weight)
    out = {}
    for name in estimators:
        try:
            out[name] = _fit_one(name, dataset, structure, weight, propensity, level, design)
        except Exception as exc:  # per-replicate estimator failures are recorded
            out[name] = {"error": f"{type(exc).__name__}: {exc}"}
    return out


def _replicate_task(args):
    return _replicate(*args)


@dataclass(frozen=True)
class MCResult:
    """Per-estimator Monte-Carlo metrics plus the config that produced them."""

    metrics: dict  # estimator -> {bias, sd, coverage, ci_length, feasibility_rate, ...}
    reps: int
    true_mu: float
    true_mu_se: float
    config: DGPConfig

    def rows(self, extra=None):
        out = []
        for name, m in self.metrics.items():
            row = dict(extra or {})
            row["estimator"] = name
            row.update(m)
            row["reps"] = self.reps
            row["true_mu"] = self.true_mu
            out.append(row)
        return out


def monte_carlo(
    cfg,
    reps,
    estimators=DEFAULT_ESTIMATORS,
    level=0.95,
    parallel=False,
    workers=None,
    truth_draws=400_000,
):
    """Replicated fits of the configured DGP with coverage bookkeeping.

    Balancing metrics are averaged over feasible replicates only; failed
    estimator evaluations count as failed replicates for that estimator.
    Deterministic in (cfg, reps) regardless of parallelism.
    """
    if reps < 1:
        raise InvalidSpec("reps must be >= 1")
    cfg = resolve_gamma(cfg)
    estimators = tuple(estimators)
    mu, mu_se = true_mu(cfg, truth_draws)
    tasks = [(cfg, r, estimators, level) for r in range(reps)]
    if parallel and reps > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_replicate_task, tasks, chunksize=8))
    else:
        results = [_replicate_task(t) for t in tasks]

    metrics = {}
    for name in estimators:
        recs = [r[name] for r in results]
        errors = sum(1 for r in recs if "error" in r)
        ok = [r for r in recs if "error" not in r]
        feasible = [r for r in ok if r["feasible"]]
        used = feasible if name == "balancing" else ok
        points = np.array([r["point"] for r in used])
        lo = np.array([r["ci_low"] for r in used])
        hi = np.array([r["ci_high"] for r in used])
        with_ci = ~(np.isnan(lo) | np.isnan(hi))
        covered = (lo[with_ci] <= mu) & (mu <= hi[with_ci])
        metrics[name] = {
            "bias": float(points.mean() - mu) if points.size else float("nan"),
            "sd": float(points.std(ddof=1)) if points.size > 1 else float("nan"),
            "coverage": float(covered.mean()) if covered.size else float("nan"),
            "ci_length": float((hi[with_ci] - lo[with_ci]).mean()) if with_ci.any() else float("nan"),
            "feasibility_rate": (len(feasible) / len(ok)) if ok else float("nan"),
            "n_used": len(used),
            "errors": errors,
        }
    return MCResult(metrics=metrics, reps=reps, true_mu=mu, true_mu_se=mu_se, config=cfg)


# ---------- presets and sweeps ----------

PRESETS = {
    "fig1-left": {"base": {"interference": "knn5"}, "axis": "n", "values": (100, 300, 500)},
    "fig1-mid": {
        "base": {"interference": "knn5", "n": 300},
        "axis": "snr_target",
        "values": (0.05, 0.2, 1.0),
    },
    "fig1-right": {
        "base": {"interference": "knn5", "n": 300},
        "axis": "kappa",
        "values": (0.2, 2.0, 6.0),
    },
    "stratified": {"base": {"interference": "stratified5"}, "axis": "n", "values": (300,)},
    "additive": {"base": {"interference": "additive"}, "axis": "n", "values": (300,)},
}


def sweep(
    cfg,
    axis,
    values,
    reps,
    estimators=DEFAULT_ESTIMATORS,
    level=0.95,
    parallel=False,
    workers=None,
    truth_draws=400_000,
):
    """Vary one config axis (n | kappa | snr_target) and collect MC rows."""
    if axis not in ("n", "kappa", "snr_target"):
        raise InvalidSpec(f"sweep axis must be n, kappa, or snr_target, got {axis!r}")
    rows = []
    for v in values:
        point_cfg = replace(cfg, **{axis: type(getattr(cfg, axis))(v)}, gamma=None)
        res = monte_carlo(
            point_cfg,
            reps,
            estimators,
            level,
            parallel=parallel,
            workers=workers,
            truth_draws=truth_draws,
        )
        rows.extend(res.rows(extra={axis: v}))
    return rows


def preset_config(name, seed=0, overrides=None):
    if name not in PRESETS:
        raise InvalidSpec(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    base = dict(PRESETS[name]["base"])
    base.setdefault("n", 300)
    base.update(overrides or {})
    base["seed"] = seed
    return DGPConfig(**base), PRESETS[name]["axis"], PRESETS[name]["values"]
