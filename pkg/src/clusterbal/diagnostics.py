"""Covariate imbalance assessment for balancing fits.

Raw imbalance is the per-coordinate slack of the balancing equations;
relative imbalance rescales each (covariate, effective treatment) entry by
the empirical dispersion of that coordinate's counterfactual load across
clusters; the omnibus measure averages over effective treatments with
observed-incidence weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import PATTERN_CAP
from .errors import InvalidSpec
from .structures import TensorWithCovariates

DEFAULT_THRESHOLD = 0.10


@dataclass(frozen=True)
class ImbalanceReport:
    nu: np.ndarray  # (d_h,) raw imbalance as computed by the balancing fit
    nu_star: np.ndarray  # (p, ell) relative imbalance; NaN where unnormalizable
    sigma_scale: np.ndarray  # (p, ell) empirical scales
    omnibus: np.ndarray  # (p,) incidence-weighted relative imbalance
    m_counts: np.ndarray  # (ell,) observed effective-treatment incidences
    flagged: tuple  # ((covariate, effective treatment), ...) with |nu*| > threshold
    degenerate: tuple  # ((covariate, effective treatment), ...) zero-scale entries
    threshold: float
    labels: tuple = ()

    def rows(self):
        """Plot-ready rows: one per (covariate, effective treatment)."""
        p, ell = self.nu_star.shape
        nu_mat = self.nu.reshape(ell, p)
        out = []
        for t in range(p):
            for j in range(ell):
                out.append(
                    {
                        "covariate": t,
                        "effective_treatment": j,
                        "nu": float(nu_mat[j, t]),
                        "sigma": float(self.sigma_scale[t, j]),
                        "nu_star": float(self.nu_star[t, j]),
                        "flagged": (t, j) in self.flagged,
                        "degenerate": (t, j) in self.degenerate,
                    }
                )
        return out

    def to_dict(self):
        return {
            "nu": self.nu.tolist(),
            "nu_star": self.nu_star.tolist(),
            "sigma_scale": self.sigma_scale.tolist(),
            "omnibus": self.omnibus.tolist(),
            "m_counts": self.m_counts.tolist(),
            "flagged": [list(x) for x in self.flagged],
            "degenerate": [list(x) for x in self.degenerate],
            "threshold": self.threshold,
        }


def imbalance_report(
    dataset, structure, weight, fit, threshold=DEFAULT_THRESHOLD, cap=PATTERN_CAP
):
    """Raw, relative, and omnibus imbalance of a balancing fit.

    The structure must be a covariate tensor whose inner encoding defines the
    effective treatments; the fit must carry its imbalance vector and target.
    """
    if not isinstance(structure, TensorWithCovariates):
        raise InvalidSpec("imbalance reporting needs a TensorWithCovariates structure")
    if fit.imbalance is None or fit.target is None:
        raise InvalidSpec("fit does not carry an imbalance vector (not a balancing fit?)")
    ell = structure.inner.dim(dataset.clusters[0])
    width = structure.covariate_rows(dataset.clusters[0]).shape[1]
    nu = np.asarray(fit.imbalance, dtype=np.float64)
    if nu.size != ell * width:
        raise InvalidSpec(
            f"imbalance length {nu.size} != blocks*width = {ell}*{width}"
        )

    # per-cluster counterfactual load of each coordinate, summed over patterns
    z = np.empty((dataset.n, ell * width))
    for ci, c in enumerate(dataset.clusters):
        half = np.full(c.size, 0.5)
        z[ci] = structure.expected_rows(c, half, cap).mean(axis=0) * 2.0**c.size
    sigma = z.std(axis=0, ddof=1) if dataset.n > 1 else np.zeros(ell * width)

    nu_mat = nu.reshape(ell, width)  # [j, t]
    sig_mat = sigma.reshape(ell, width)
    nu_star = np.full((width, ell), np.nan)
    degenerate = []
    for t in range(width):
        for j in range(ell):
            if sig_mat[j, t] == 0.0:
                degenerate.append((t, j))
            else:
                nu_star[t, j] = nu_mat[j, t] / sig_mat[j, t]

    # observed incidences of each effective treatment
    m_counts = np.zeros(ell)
    for c in dataset.clusters:
        inner_rows = structure.inner.rows_at(c, c.treatments)
        m_counts += (inner_rows != 0).sum(axis=0)

    omnibus = np.zeros(width)
    for t in range(width):
        ok = ~np.isnan(nu_star[t])
        total = m_counts[ok].sum()
        omnibus[t] = (nu_star[t, ok] * m_counts[ok]).sum() / total if total > 0 else np.nan

    flagged = tuple(
        (t, j)
        for t in range(width)
        for j in range(ell)
        if not np.isnan(nu_star[t, j]) and abs(nu_star[t, j]) > threshold
    )
    return ImbalanceReport(
        nu=nu,
        nu_star=nu_star,
        sigma_scale=sig_mat.T.copy(),
        omnibus=omnibus,
        m_counts=m_counts,
        flagged=flagged,
        degenerate=tuple(degenerate),
        threshold=threshold,
        labels=(structure.label,),
    )
