import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
from scipy import special

from .Cohort import select_group
from .Errors import DimensionError, EmptyGroupError
from .Utils import format_p_value

SIGNIFICANT = 0.05
HIGHLY_SIGNIFICANT = 0.001
MAX_AUTO_BINS = 1000


@dataclass(frozen=True)
class KsResult:
    d_stat: float
    p_raw: float
    n1: int
    n2: int


def ks_two_sample(a, b):
    """Two-sided two-sample Kolmogorov-Smirnov test with the asymptotic p-value.

    D is the exact supremum of |ECDF_a - ECDF_b| over the merged sample (right-continuous steps, so
    ties are handled at the observed points). The p-value is Q_KS(lambda) with the small-sample
    effective-n correction lambda = (sqrt(ne) + 0.12 + 0.11 / sqrt(ne)) * D.
    """
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    n1, n2 = a.size, b.size
    if n1 < 1 or n2 < 1:
        raise EmptyGroupError(f"KS test needs two non-empty samples, got sizes {n1} and {n2}")

    merged = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, merged, side='right') / n1
    cdf_b = np.searchsorted(b, merged, side='right') / n2
    d_stat = float(np.max(np.abs(cdf_a - cdf_b)))

    en = np.sqrt(n1 * n2 / (n1 + n2))
    p_raw = float(np.clip(special.kolmogorov((en + 0.12 + 0.11 / en) * d_stat), 0.0, 1.0))
    return KsResult(d_stat=d_stat, p_raw=p_raw, n1=int(n1), n2=int(n2))


def harmonic_number(m):
    return math.fsum(1.0 / k for k in range(1, m + 1))


def benjamini_yekutieli(p_values):
    """Benjamini-Yekutieli adjusted p-values, returned in input order."""
    p = np.asarray(p_values, dtype=np.float64).ravel()
    if np.any(np.isnan(p)) or np.any((p < 0) | (p > 1)):
        raise ValueError("p-values must lie in [0, 1]")
    m = p.size
    if m == 0:
        return p.copy()

    order = np.argsort(p, kind='mergesort')
    ranks = np.arange(1, m + 1)
    raw = p[order] * m * harmonic_number(m) / ranks
    stepped = np.minimum.accumulate(raw[::-1])[::-1]
    adjusted = np.empty(m)
    adjusted[order] = np.minimum(stepped, 1.0)
    return adjusted


def significance_tier(p_adjusted):
    if p_adjusted < HIGHLY_SIGNIFICANT:
        return '**'
    if p_adjusted < SIGNIFICANT:
        return '*'
    return 'ns'


@dataclass(frozen=True)
class Histogram:
    edges: np.ndarray
    density: np.ndarray

    @property
    def widths(self):
        return np.diff(self.edges)

    @property
    def mass(self):
        return float(np.sum(self.density * self.widths))


def marginal_density(values, bins='auto'):
    """Density-normalized histogram. 'auto' uses Freedman-Diaconis, falling back to Sturges when IQR = 0."""
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size < 2:
        raise ValueError(f"marginal density needs at least 2 values, got {values.size}")

    if np.ptp(values) == 0:
        # single degenerate bin of unit width around the repeated value
        edges = np.array([values[0] - 0.5, values[0] + 0.5])
    elif bins == 'auto':
        q25, q75 = np.percentile(values, [25, 75])
        width = 2.0 * (q75 - q25) / np.cbrt(values.size)
        fd = width > 0 and np.ptp(values) / width <= MAX_AUTO_BINS
        edges = np.histogram_bin_edges(values, bins='fd' if fd else 'sturges')
    else:
        edges = np.histogram_bin_edges(values, bins=int(bins))

    density, edges = np.histogram(values, bins=edges, density=True)
    return Histogram(edges=edges, density=density)


def marginal_densities(coords, cohort, selectors, dims, bins='auto', space='pca', model=''):
    """Plot-ready per-group marginal histograms, each normalized independently."""
    rows = []
    positions = coords.index
    for selector in selectors:
        ids = [i for i in select_group(cohort, selector) if i in positions]
        if len(ids) < 2:
            logging.warning(f"Skipping marginal density for {selector}: fewer than 2 samples")
            continue
        values = coords.rows(ids)
        for dim in range(dims):
            histogram = marginal_density(values[:, dim], bins)
            for left, right, density in zip(histogram.edges[:-1], histogram.edges[1:], histogram.density):
                rows.append({'model': model, 'space': space, 'dimension': dim + 1, 'group': str(selector),
                             'bin_left': left, 'bin_right': right, 'density': density})
    return pd.DataFrame(rows, columns=['model', 'space', 'dimension', 'group', 'bin_left', 'bin_right', 'density'])


@dataclass(frozen=True)
class StatRow:
    model: str
    space: str
    mode: int
    explained_variance_ratio: float
    comparison: str
    group_a: str
    group_b: str
    n1: int
    n2: int
    d_stat: float
    p_raw: float
    p_adjusted: float
    tier: str


@dataclass
class StatReport:
    rows: list
    metadata: dict = field(default_factory=dict)

    @property
    def comparisons(self):
        return list(dict.fromkeys(row.comparison for row in self.rows))

    def to_frame(self):
        return pd.DataFrame([row.__dict__ for row in self.rows], columns=list(StatRow.__dataclass_fields__))

    def to_table(self):
        """Wide layout: one row per (model, mode), one column group per comparison."""
        records = {}
        for row in self.rows:
            key = (row.model, row.space, row.mode)
            record = records.setdefault(key, {'model': row.model, 'space': row.space, 'mode': row.mode,
                                              'exp_var': row.explained_variance_ratio})
            record[f"{row.comparison} D"] = row.d_stat
            record[f"{row.comparison} p_adjusted"] = row.p_adjusted
            record[row.comparison] = format_p_value(row.p_adjusted, row.tier)
        return pd.DataFrame(list(records.values()))

    def to_dict(self):
        return {'metadata': self.metadata, 'rows': [row.__dict__ for row in self.rows]}


def run_feature_bias_test(coords, cohort, pairs, modes, explained_variance_ratio=None, model='', space='pca',
                          metadata=None, adjust=True):
    """KS tests of every (mode, pair) cell; the whole grid is one BY family.

    ``coords`` is an EmbeddingSet of projected coordinates (sample ids + n x k matrix).
    """
    if modes > coords.d:
        raise DimensionError(f"requested {modes} modes but only {coords.d} coordinates are available")
    cohort.require_ids(coords.ids)

    groups = {}
    positions = coords.index
    for pair in pairs:
        for selector in pair:
            if selector in groups:
                continue
            ids = [i for i in select_group(cohort, selector) if i in positions]
            if len(ids) < 2:
                raise EmptyGroupError(f"group {selector} has {len(ids)} samples in the tested set (need >= 2)")
            groups[selector] = coords.rows(ids)

    cells = []
    for mode in range(modes):
        ratio = float(explained_variance_ratio[mode]) if explained_variance_ratio is not None else float('nan')
        for a, b in pairs:
            result = ks_two_sample(groups[a][:, mode], groups[b][:, mode])
            cells.append((mode + 1, ratio, a, b, result))

    raw = np.array([cell[4].p_raw for cell in cells])
    adjusted = benjamini_yekutieli(raw) if adjust else raw.copy()
    rows = [
        StatRow(model=model, space=space, mode=mode, explained_variance_ratio=ratio,
                comparison=f"{a.name} / {b.name}", group_a=str(a), group_b=str(b), n1=result.n1, n2=result.n2,
                d_stat=result.d_stat, p_raw=result.p_raw, p_adjusted=float(p_adj), tier=significance_tier(p_adj))
        for (mode, ratio, a, b, result), p_adj in zip(cells, adjusted)
    ]
    flagged = sum(row.tier != 'ns' for row in rows)
    logging.info(f"Feature bias test {model or ''} ({space}): {len(rows)} tests, {flagged} significant after BY")
    return StatReport(rows=rows, metadata=dict(metadata or {}, family='model', modes=modes))


def adjust_jointly(reports):
    """Re-adjust several reports' raw p-values as one pooled BY family."""
    raw = np.array([row.p_raw for report in reports for row in report.rows])
    adjusted = iter(benjamini_yekutieli(raw))
    pooled = []
    for report in reports:
        rows = []
        for row in report.rows:
            p_adj = float(next(adjusted))
            rows.append(replace(row, p_adjusted=p_adj, tier=significance_tier(p_adj)))
        pooled.append(StatReport(rows=rows, metadata=dict(report.metadata, family='pooled')))
    return pooled
