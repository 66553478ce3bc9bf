import itertools
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd
import voluptuous as vol

from .Cohort import LABEL_PREFIX, ordered_values
from .Errors import SamplingError
from .Utils import check_seed, rng_for

PLAN_SCHEMA = vol.Schema({
    vol.Required('attributes'): vol.All([str], vol.Length(min=0)),
    vol.Optional('age_bin_width', default=10.0): vol.Any(None, vol.All(vol.Coerce(float), vol.Range(min=0, min_included=False))),
    vol.Optional('label', default=None): vol.Any(None, str),
    vol.Optional('target', default=None): vol.Any(None, vol.All(vol.Coerce(int), vol.Range(min=1))),
    vol.Optional('seed', default=0): vol.All(vol.Coerce(int), check_seed),
    vol.Optional('skip_empty', default=True): bool,
})


@dataclass(frozen=True)
class ResamplePlan:
    """Strata = attribute values x age bins x evaluated-label status; target draws per stratum.

    ``target=None`` resolves to the median realized stratum size. ``age_bin_width=None`` disables age bins.
    """
    attributes: tuple = ('race',)
    age_bin_width: float = 10.0
    label: str = None
    target: int = None
    seed: int = 0
    skip_empty: bool = True

    def __post_init__(self):
        validated = PLAN_SCHEMA({'attributes': list(self.attributes), 'age_bin_width': self.age_bin_width,
                                 'label': self.label, 'target': self.target, 'seed': self.seed,
                                 'skip_empty': self.skip_empty})
        object.__setattr__(self, 'attributes', tuple(validated['attributes']))

    def echo(self):
        return dict(asdict(self), attributes=list(self.attributes))


@dataclass(frozen=True, eq=False)
class IndexMultiset:
    indices: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.indices)

    def ids(self, cohort):
        return [cohort.ids[i] for i in self.indices]


def age_bins(ages, width):
    return np.floor(np.asarray(ages, dtype=np.float64) / width).astype(int)


def _strata_columns(cohort, plan):
    frame = cohort.frame
    columns, names, levels = [], [], []
    for attribute in plan.attributes:
        columns.append(cohort.column(attribute).to_numpy())
        names.append(attribute)
        levels.append(ordered_values(cohort, attribute))
    if plan.age_bin_width is not None:
        bins = age_bins(frame['age'], plan.age_bin_width)
        columns.append(bins)
        names.append('age_bin')
        levels.append(sorted(set(bins.tolist())))
    if plan.label is not None:
        column = plan.label if plan.label.startswith(LABEL_PREFIX) else LABEL_PREFIX + plan.label
        columns.append(frame[column].to_numpy())
        names.append(column)
        levels.append([0.0, 1.0])
    return columns, names, levels


def stratified_resample(cohort, plan):
    """Draw exactly ``target`` indices with replacement from every non-empty stratum.

    Indices are cohort row positions. Samples with a missing evaluated label are excluded. Stratum
    ordinals follow the cross-product order of the levels, so every stratum has its own seed substream.
    """
    columns, names, levels = _strata_columns(cohort, plan)
    n = len(cohort)
    eligible = np.ones(n, dtype=bool)
    if plan.label is not None:
        eligible &= ~np.isnan(columns[-1].astype(np.float64))
        dropped = n - int(eligible.sum())
        if dropped:
            logging.info(f"Resampling for {plan.label}: {dropped} samples with a missing label excluded")

    strata = []
    for ordinal, key in enumerate(itertools.product(*levels)):
        mask = eligible.copy()
        for column, level in zip(columns, key):
            mask &= column == level
        members = np.nonzero(mask)[0]
        label = ', '.join(f"{name}={level}" for name, level in zip(names, key))
        if members.size == 0:
            if not plan.skip_empty:
                raise SamplingError(f"empty required stratum ({label})")
            logging.info(f"Skipping empty stratum ({label})")
            continue
        strata.append((ordinal, label, members))

    if not strata:
        raise SamplingError("no non-empty strata to resample")
    target = plan.target
    if target is None:
        target = max(1, int(round(float(np.median([members.size for _, _, members in strata])))))

    draws = []
    counts = {}
    for ordinal, label, members in strata:
        picks = rng_for(plan.seed, ordinal).integers(0, members.size, size=target)
        draws.append(members[picks])
        counts[label] = target

    logging.info(f"Stratified resample: {len(strata)} strata x {target} = {len(strata) * target} samples")
    indices = np.concatenate(draws)
    return IndexMultiset(indices=indices, provenance={'plan': plan.echo(), 'target': target, 'strata': counts})


def one_scan_per_patient(cohort, seed):
    """One sample id per patient, drawn uniformly from that patient's scans. Returned in cohort order."""
    codes, uniques = pd.factorize(cohort.frame['patient_id'].to_numpy(), sort=True)
    order = np.argsort(codes, kind='stable')
    counts = np.bincount(codes, minlength=len(uniques))
    chosen = []
    for ordinal, members in enumerate(np.split(order, np.cumsum(counts)[:-1])):
        chosen.append(members[rng_for(seed, ordinal).integers(0, members.size)])
    chosen = np.sort(np.asarray(chosen, dtype=int))
    logging.info(f"One scan per patient: {len(chosen)} of {len(cohort)} samples kept")
    return tuple(cohort.ids[i] for i in chosen)


def subsample_per_group(cohort, attribute, per_group, seed, values=None):
    """``per_group`` distinct samples drawn without replacement from every group of ``attribute``."""
    column = cohort.column(attribute).to_numpy()
    values = ordered_values(cohort, attribute) if values is None else list(values)
    chosen = []
    for ordinal, value in enumerate(sorted(values, key=str)):
        members = np.nonzero(column == value)[0]
        if members.size < per_group:
            raise SamplingError(f"group {attribute}={value} has {members.size} samples, fewer than {per_group}")
        chosen.append(rng_for(seed, ordinal).choice(members, size=per_group, replace=False))
    chosen = np.sort(np.concatenate(chosen)) if chosen else np.array([], dtype=int)
    return tuple(cohort.ids[i] for i in chosen)


def bootstrap_replicate(n, seed, replicate):
    return rng_for(seed, replicate).integers(0, n, size=n)


def bootstrap_indices(n, replicates, seed):
    if n < 1 or replicates < 1:
        raise ValueError(f"bootstrap needs n >= 1 and replicates >= 1, got n={n}, replicates={replicates}")
    for replicate in range(replicates):
        yield bootstrap_replicate(n, seed, replicate)


def cluster_members(clusters):
    """Row positions grouped by cluster label, clusters in sorted label order."""
    codes, uniques = pd.factorize(np.asarray(clusters), sort=True)
    order = np.argsort(codes, kind='stable')
    counts = np.bincount(codes, minlength=len(uniques))
    return np.split(order, np.cumsum(counts)[:-1])


def cluster_bootstrap_indices(clusters, replicates, seed):
    """Bootstrap replicates that resample whole clusters (patients) with replacement.

    Each replicate is the concatenation of the row positions of the drawn clusters, so its length varies.
    """
    if replicates < 1:
        raise ValueError(f"bootstrap needs replicates >= 1, got {replicates}")
    members = cluster_members(clusters)
    if not members or members[0].size == 0:
        raise ValueError("cluster bootstrap needs at least one sample")
    for replicate in range(replicates):
        picks = rng_for(seed, replicate).integers(0, len(members), size=len(members))
        yield np.concatenate([members[c] for c in picks])
