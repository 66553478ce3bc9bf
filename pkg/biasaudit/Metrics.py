import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import stats

from .Cohort import LABEL_PREFIX, humanize_label
from .Errors import DimensionError, SchemaError, UndefinedMetricError
from .Sampling import bootstrap_indices, cluster_bootstrap_indices, stratified_resample
from .Utils import format_ci, mix64

TARGET_FPR = 0.20
REPLICATES = 2000
CI_PERCENTILES = (2.5, 97.5)
MAX_UNDEFINED_FRACTION = 0.5
METRICS = ('auc', 'tpr', 'fpr', 'youden_j')
METRIC_TITLES = {'auc': 'AUC', 'tpr': 'TPR', 'fpr': 'FPR', 'youden_j': "Youden's J statistic"}


class ScoreTable:
    """Per-sample, per-label model outputs in [0, 1]."""

    def __init__(self, ids, labels, scores):
        ids = tuple(str(i) for i in ids)
        labels = tuple(labels)
        scores = np.array(scores, dtype=np.float64)
        if scores.ndim == 1:
            scores = scores[:, None]
        if scores.shape != (len(ids), len(labels)):
            raise DimensionError(f"score matrix shape {scores.shape} does not match {len(ids)} ids x {len(labels)} labels")
        index = {}
        for row, sample_id in enumerate(ids):
            if sample_id in index:
                raise SchemaError(f"duplicate id '{sample_id}'", row=row + 1, column='sample_id')
            index[sample_id] = row
        bad = ~np.isfinite(scores) | (scores < 0.0) | (scores > 1.0)
        if bad.any():
            row, col = np.argwhere(bad)[0]
            raise SchemaError(f"score {scores[row, col]} outside [0, 1]", row=int(row) + 1, column=labels[col])
        scores.setflags(write=False)
        self.ids = ids
        self.labels = labels
        self.scores = scores
        self.index = index

    def __len__(self):
        return len(self.ids)

    def column(self, label, ids=None):
        if label not in self.labels:
            raise SchemaError(f"score table has no column for label '{label}'", column=label)
        values = self.scores[:, self.labels.index(label)]
        if ids is None:
            return values
        missing = [i for i in ids if i not in self.index]
        if missing:
            raise SchemaError(f"{len(missing)} sample ids have no scores (first: '{missing[0]}')", column='sample_id')
        return values[[self.index[i] for i in ids]]

    def subset(self, ids):
        ids = list(ids)
        return ScoreTable(ids, self.labels, np.column_stack([self.column(label, ids) for label in self.labels]))

    def __eq__(self, other):
        if not isinstance(other, ScoreTable):
            return NotImplemented
        return self.ids == other.ids and self.labels == other.labels and np.array_equal(self.scores, other.scores)

    def __repr__(self):
        return f"ScoreTable(n={len(self)}, labels={list(self.labels)})"


def load_scores(path):
    path = Path(path)
    frame = pd.read_csv(path, dtype={'sample_id': str}, keep_default_na=False, float_precision='round_trip',
                        encoding='utf-8')
    if not len(frame.columns) or frame.columns[0] != 'sample_id':
        raise SchemaError(f"malformed header in {path.name}: first column must be sample_id")
    labels = [c[len(LABEL_PREFIX):] if c.startswith(LABEL_PREFIX) else c for c in frame.columns[1:]]
    values = frame[frame.columns[1:]].apply(pd.to_numeric, errors='coerce')
    bad = values.isna().to_numpy()
    if bad.any():
        row, col = np.argwhere(bad)[0]
        raise SchemaError(f"unparseable score '{frame.iat[row, col + 1]}'", row=int(row) + 1, column=frame.columns[col + 1])
    table = ScoreTable(frame['sample_id'].tolist(), labels, values.to_numpy(dtype=np.float64))
    logging.info(f"Loaded scores {path.name}: {len(table)} samples, labels={list(table.labels)}")
    return table


def save_scores(table, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(table.scores, columns=list(table.labels))
    frame.insert(0, 'sample_id', table.ids)
    frame.to_csv(path, index=False, encoding='utf-8', float_format='%.17g')
    return path


def _binary(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=np.float64).ravel()
    if scores.shape != labels.shape:
        raise DimensionError(f"{scores.size} scores for {labels.size} labels")
    # missing labels take no part in any metric
    known = ~np.isnan(labels)
    return scores[known], labels[known] == 1.0


def auc(scores, labels):
    """Mann-Whitney AUC: P(random positive outranks random negative), ties count one half."""
    scores, positive = _binary(scores, labels)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(f"AUC needs both classes, got {n_pos} positives and {n_neg} negatives")
    ranks = stats.rankdata(scores)
    u_stat = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u_stat / (n_pos * n_neg))


def roc_curve(scores, labels):
    """ROC points (fpr, tpr, thresholds) for the strict rule score > threshold, from (0, 0) to (1, 1)."""
    scores, positive = _binary(scores, labels)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(f"ROC curve needs both classes, got {n_pos} positives and {n_neg} negatives")
    order = np.argsort(-scores, kind='mergesort')
    sorted_scores = scores[order]
    tp = np.cumsum(positive[order])
    fp = np.cumsum(~positive[order])
    # last index of each run of tied scores
    ends = np.r_[np.nonzero(np.diff(sorted_scores))[0], scores.size - 1]
    tp = np.r_[0, tp[ends]]
    fp = np.r_[0, fp[ends]]
    thresholds = np.r_[np.inf, sorted_scores[ends]]
    return fp / n_neg, tp / n_pos, thresholds


def roc_auc(scores, labels):
    """Trapezoidal area under the ROC curve, accumulated on integer counts so it matches ``auc`` exactly."""
    fpr, tpr, _ = roc_curve(scores, labels)
    _, positive = _binary(scores, labels)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    fp = np.rint(fpr * n_neg).astype(np.int64)
    tp = np.rint(tpr * n_pos).astype(np.int64)
    twice_area = int(np.sum(np.diff(fp) * (tp[1:] + tp[:-1])))
    return float(twice_area / 2.0 / (n_pos * n_neg))


def calibrate_threshold(scores, labels, target_fpr=TARGET_FPR):
    """Threshold whose achieved FPR (negatives with score > threshold) is the largest not exceeding the target.

    Candidates are -inf, the midpoints between adjacent distinct scores and +inf. Among candidates with
    the same achieved FPR the lowest one wins, which keeps the TPR as high as possible.
    """
    if not 0.0 <= target_fpr <= 1.0:
        raise ValueError(f"target FPR must lie in [0, 1], got {target_fpr}")
    scores, positive = _binary(scores, labels)
    negatives = np.sort(scores[~positive])
    if negatives.size == 0:
        raise UndefinedMetricError("threshold calibration needs at least one negative sample")

    distinct = np.unique(scores)
    candidates = np.r_[-np.inf, (distinct[:-1] + distinct[1:]) / 2.0, np.inf]
    false_positives = negatives.size - np.searchsorted(negatives, candidates, side='right')
    allowed = false_positives <= target_fpr * negatives.size + 1e-9
    best = false_positives[allowed].max()
    return float(candidates[np.nonzero(allowed & (false_positives == best))[0][0]])


def rates(scores, labels, threshold):
    scores, positive = _binary(scores, labels)
    predicted = scores > threshold
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    tpr = float(np.sum(predicted & positive) / n_pos) if n_pos else float('nan')
    fpr = float(np.sum(predicted & ~positive) / n_neg) if n_neg else float('nan')
    return tpr, fpr


def classification_metrics(scores, labels, threshold):
    """[auc, tpr, fpr, youden_j] with NaN for whatever the class balance leaves undefined."""
    scores, labels = np.asarray(scores, dtype=np.float64), np.asarray(labels, dtype=np.float64)
    known = ~np.isnan(labels)
    scores, labels = scores[known], labels[known]
    tpr, fpr = rates(scores, labels, threshold)
    has_both = 0 < np.sum(labels == 1.0) < labels.size
    area = auc(scores, labels) if has_both else float('nan')
    return np.array([area, tpr, fpr, tpr - fpr])


@dataclass(frozen=True)
class MetricRecord:
    model: str
    label: str
    group: str
    n: int
    n_pos: int
    n_neg: int
    threshold: float
    auc: float
    tpr: float
    fpr: float
    youden_j: float
    auc_lo: float = float('nan')
    auc_hi: float = float('nan')
    tpr_lo: float = float('nan')
    tpr_hi: float = float('nan')
    fpr_lo: float = float('nan')
    fpr_hi: float = float('nan')
    youden_j_lo: float = float('nan')
    youden_j_hi: float = float('nan')

    def __post_init__(self):
        if not np.isnan(self.youden_j) and self.youden_j != self.tpr - self.fpr:
            raise ValueError(f"youden_j {self.youden_j} != tpr - fpr for {self.model}/{self.label}/{self.group}")
        for name in METRICS:
            point, lo, hi = self.interval(name)
            if not np.isnan(lo) and not lo <= point <= hi:
                raise ValueError(f"{name} interval ({lo}, {hi}) excludes the point {point}")

    def interval(self, metric):
        return getattr(self, metric), getattr(self, f"{metric}_lo"), getattr(self, f"{metric}_hi")

    def cell(self, metric):
        return format_ci(*self.interval(metric))


def _group_mask(cohort, selector, ids):
    values = cohort.values(selector.attribute, ids)
    if selector.is_label:
        return values.astype(np.float64) == float(selector.value)
    return values == selector.value


def subgroup_metrics(scores, labels, cohort, groups, threshold, ids, model='', label=''):
    """Point estimates per group; ``ids`` aligns the score/label rows with the cohort (repeats allowed)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    records = []
    for selector in groups:
        mask = _group_mask(cohort, selector, ids) & ~np.isnan(labels)
        group_scores, group_labels = scores[mask], labels[mask]
        n_pos = int(np.sum(group_labels == 1.0))
        values = classification_metrics(group_scores, group_labels, threshold)
        if np.isnan(values).any():
            undefined = [name for name, value in zip(METRICS, values) if np.isnan(value)]
            logging.warning(f"{model}/{label}/{selector.name}: {', '.join(undefined)} undefined "
                            f"({n_pos} positives, {group_labels.size - n_pos} negatives)")
        records.append(MetricRecord(model=model, label=label, group=selector.name, n=int(group_labels.size),
                                    n_pos=n_pos, n_neg=int(group_labels.size - n_pos), threshold=float(threshold),
                                    **dict(zip(METRICS, (float(v) for v in values)))))
    return records


def _replicate(metric, sample, shape):
    try:
        return np.atleast_1d(np.asarray(metric(*sample), dtype=np.float64))
    except UndefinedMetricError:
        return np.full(shape, np.nan)


def bootstrap_ci(metric, data, replicates=REPLICATES, seed=0, clusters=None):
    """Percentile bootstrap interval for ``metric(*data)``.

    ``data`` is a tuple of equally long arrays resampled together; ``metric`` may return a scalar or a
    vector. Replicates where a component is non-finite, or where the metric raises UndefinedMetricError, are
    dropped for that component. Intervals are widened to contain the point estimate. Returns (point, lo, hi).
    """
    if replicates < 2:
        raise ValueError(f"bootstrap needs at least 2 replicates, got {replicates}")
    data = tuple(np.asarray(a) for a in data)
    n = len(data[0])
    if any(len(a) != n for a in data):
        raise DimensionError("bootstrap data arrays differ in length")

    estimate = metric(*data)
    point = np.atleast_1d(np.asarray(estimate, dtype=np.float64))
    if clusters is None:
        draws = bootstrap_indices(n, replicates, seed)
    else:
        draws = cluster_bootstrap_indices(clusters, replicates, seed)
    values = np.array([_replicate(metric, tuple(a[idx] for a in data), point.shape) for idx in draws],
                      dtype=np.float64)

    lo = np.full(point.shape, np.nan)
    hi = np.full(point.shape, np.nan)
    for k in range(point.size):
        if not np.isfinite(point[k]):
            continue
        column = values[:, k]
        defined = column[np.isfinite(column)]
        undefined = replicates - defined.size
        if undefined > MAX_UNDEFINED_FRACTION * replicates:
            raise UndefinedMetricError(f"metric undefined on {undefined} of {replicates} bootstrap replicates")
        if undefined:
            logging.warning(f"Dropped {undefined} of {replicates} bootstrap replicates with an undefined metric")
        lo[k], hi[k] = np.percentile(defined, CI_PERCENTILES)
        lo[k], hi[k] = min(lo[k], point[k]), max(hi[k], point[k])

    if np.ndim(estimate) == 0:
        return float(point[0]), float(lo[0]), float(hi[0])
    return point, lo, hi


def relative_change_values(values):
    """100 * (m_g - mean) / mean for every group, the mean running over the groups with a defined metric."""
    defined = {group: value for group, value in values.items() if value is not None and np.isfinite(value)}
    if len(defined) < 2:
        raise UndefinedMetricError(f"relative change needs at least 2 groups with a defined metric, got {len(defined)}")
    mean = float(np.mean(list(defined.values())))
    if mean == 0.0:
        logging.warning("Relative change undefined: mean metric over groups is zero")
        return {group: float('nan') for group in values}
    return {group: (100.0 * (defined[group] - mean) / mean if group in defined else float('nan')) for group in values}


def relative_change(records, metric='youden_j'):
    return relative_change_values({record.group: getattr(record, metric) for record in records})


@dataclass
class AuditReport:
    records: list
    thresholds: dict = field(default_factory=dict)
    relative: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    @property
    def models(self):
        return list(dict.fromkeys(r.model for r in self.records))

    @property
    def labels(self):
        return list(dict.fromkeys(r.label for r in self.records))

    @property
    def groups(self):
        return list(dict.fromkeys(r.group for r in self.records))

    def to_frame(self):
        return pd.DataFrame([r.__dict__ for r in self.records], columns=[f.name for f in fields(MetricRecord)])

    def table(self, label):
        """One label's block of the wide table: metric x model rows, one column per group."""
        rows = []
        for metric in METRICS:
            for model in self.models:
                row = {'label': humanize_label(label), 'metric': f"{METRIC_TITLES[metric]} (95% CI)", 'model': model}
                for record in self.records:
                    if record.model == model and record.label == label:
                        row[record.group] = record.cell(metric)
                rows.append(row)
        return pd.DataFrame(rows, columns=['label', 'metric', 'model'] + self.groups)

    def tables(self):
        return pd.concat([self.table(label) for label in self.labels], ignore_index=True)

    def plot_rows(self):
        """Plot-ready rows: group, model, label, metric, point, lo, hi and relative change."""
        rows = []
        for record in self.records:
            for metric in METRICS:
                point, lo, hi = record.interval(metric)
                change = self.relative.get(metric, {}).get(record.model, {}).get(record.label, {}).get(record.group)
                rows.append({'group': record.group, 'model': record.model, 'label': record.label, 'metric': metric,
                             'point': point, 'lo': lo, 'hi': hi,
                             'relative_change': float('nan') if change is None else change})
        return pd.DataFrame(rows, columns=['group', 'model', 'label', 'metric', 'point', 'lo', 'hi', 'relative_change'])

    def to_dict(self):
        return {
            'metadata': self.metadata,
            'thresholds': self.thresholds,
            'records': [r.__dict__ for r in self.records],
            'relative_change': self.relative,
        }


def _with_interval(record, lo, hi):
    return replace(record, **{f"{name}_lo": float(l) for name, l in zip(METRICS, lo)},
                   **{f"{name}_hi": float(h) for name, h in zip(METRICS, hi)})


def build_performance_report(models, cohort, labels, groups, target_fpr=TARGET_FPR, plan=None,
                             replicates=REPLICATES, seed=0, cluster_by_patient=False, calibrate_on='resampled',
                             relative_metrics=('youden_j', 'auc')):
    """Subgroup performance of every named ScoreTable on every label, with bootstrap intervals.

    Per label the evaluated samples are the cohort rows with a known label value, stratified-resampled by
    ``plan`` (when given) into one multiset shared by every model. The threshold is calibrated per model
    and label on the whole evaluated set. Bootstrap substreams depend on (seed, label, group) only, so
    identical score tables yield identical sections.
    """
    if calibrate_on not in ('resampled', 'raw'):
        raise ValueError(f"calibrate_on must be 'resampled' or 'raw', got '{calibrate_on}'")
    for name, table in models.items():
        cohort.require_ids(table.ids)

    records, thresholds, provenance = [], {}, {}
    for label_ordinal, label in enumerate(labels):
        known = ~np.isnan(cohort.labels(label))
        eligible = [i for i, keep in zip(cohort.ids, known) if keep]
        if len(eligible) < len(cohort):
            logging.info(f"Label {label}: {len(cohort) - len(eligible)} samples with a missing label dropped")
        evaluated = cohort.subset(eligible)

        if plan is not None:
            label_plan = replace(plan, label=label, seed=mix64(plan.seed, label_ordinal))
            resample = stratified_resample(evaluated, label_plan)
            ids = resample.ids(evaluated)
            provenance[label] = {'plan': label_plan.echo(), 'target': resample.provenance['target'],
                                 'strata': len(resample.provenance['strata']), 'size': len(ids)}
        else:
            ids = list(evaluated.ids)
            provenance[label] = {'plan': None, 'size': len(ids)}
        y = evaluated.labels(label, ids)
        patients = evaluated.values('patient_id', ids) if cluster_by_patient else None

        for model, table in models.items():
            scores = table.column(label, ids)
            if calibrate_on == 'raw':
                threshold = calibrate_threshold(table.column(label, eligible), evaluated.labels(label), target_fpr)
            else:
                threshold = calibrate_threshold(scores, y, target_fpr)
            thresholds.setdefault(model, {})[label] = threshold
            achieved = rates(scores, y, threshold)[1]
            logging.info(f"{model}/{label}: threshold {threshold:.6g} gives FPR {achieved:.4f} (target {target_fpr})")

            points = subgroup_metrics(scores, y, evaluated, groups, threshold, ids, model=model, label=label)
            for group_ordinal, (selector, record) in enumerate(zip(groups, points)):
                mask = _group_mask(evaluated, selector, ids)
                if not mask.any():
                    records.append(record)
                    continue
                group_seed = mix64(mix64(seed, label_ordinal), group_ordinal)
                clusters = patients[mask] if patients is not None else None
                _, lo, hi = bootstrap_ci(lambda s, t: classification_metrics(s, t, threshold),
                                         (scores[mask], y[mask]), replicates, group_seed, clusters)
                records.append(_with_interval(record, lo, hi))

    relative = {}
    for metric in relative_metrics:
        for model in models:
            for label in labels:
                section = [r for r in records if r.model == model and r.label == label]
                try:
                    change = relative_change(section, metric)
                except UndefinedMetricError as e:
                    logging.warning(f"Relative change of {metric} for {model}/{label}: {e}")
                    continue
                relative.setdefault(metric, {}).setdefault(model, {})[label] = change

    metadata = {
        'target_fpr': target_fpr,
        'replicates': replicates,
        'seed': seed,
        'bootstrap_unit': 'patient' if cluster_by_patient else 'scan',
        'calibrate_on': calibrate_on,
        'groups': [str(g) for g in groups],
        'resample': provenance,
    }
    return AuditReport(records=records, thresholds=thresholds, relative=relative, metadata=metadata)
