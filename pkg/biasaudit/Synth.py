import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import voluptuous as vol
from scipy import special

from .Cohort import LABEL_PREFIX, SPLITS, Cohort, EmbeddingSet, save_cohort, save_embeddings
from .Metrics import ScoreTable
from .Utils import check_seed, mix64, rng_for

RACES = ('White', 'Asian', 'Black')
LABELS = ('no_finding',)
AGE_MEAN = 63.0
AGE_SD = 17.0
MAX_AGE = 130.0

_magnitude = vol.All(vol.Coerce(float), vol.Range(min=0))
_probability = vol.All(vol.Coerce(float), vol.Range(min=0, max=1, min_included=False, max_included=False))

SPEC_SCHEMA = vol.Schema({
    vol.Required('n_per_group'): vol.All(vol.Coerce(int), vol.Range(min=1)),
    vol.Required('dim'): vol.All(vol.Coerce(int), vol.Range(min=2)),
    vol.Required('races'): vol.All([str], vol.Length(min=1)),
    vol.Required('labels'): vol.All([str], vol.Length(min=1)),
    vol.Required('disease_magnitude'): _magnitude,
    vol.Required('sex_shift'): _magnitude,
    vol.Required('race_shifts'): {str: _magnitude},
    vol.Required('prevalence'): vol.Any(_probability, {str: _probability}),
    vol.Required('noise_sd'): vol.All(vol.Coerce(float), vol.Range(min=0, min_included=False)),
    vol.Required('female_fraction'): vol.All(vol.Coerce(float), vol.Range(min=0, max=1)),
    vol.Required('missing_rate'): vol.All(vol.Coerce(float), vol.Range(min=0, max=1, max_included=False)),
    vol.Required('max_scans_per_patient'): vol.All(vol.Coerce(int), vol.Range(min=1)),
    vol.Required('split_fractions'): vol.All([vol.All(vol.Coerce(float), vol.Range(min=0))], vol.Length(min=3, max=3)),
    vol.Required('age_mean'): vol.Coerce(float),
    vol.Required('age_sd'): _magnitude,
    vol.Required('seed'): vol.All(vol.Coerce(int), check_seed),
})


@dataclass(frozen=True)
class SynthSpec:
    """Additive Gaussian mean-shift cohort.

    Every label, the sex attribute and every race get their own embedding axis (labels first, then sex,
    then races), so injected shifts are mutually orthogonal. Magnitudes are in units of ``noise_sd``.
    ``prevalence`` is one value or a per-race mapping.
    """
    n_per_group: int = 1000
    dim: int = 16
    races: tuple = RACES
    labels: tuple = LABELS
    disease_magnitude: float = 3.0
    sex_shift: float = 0.0
    race_shifts: dict = field(default_factory=dict)
    prevalence: object = 0.3
    noise_sd: float = 1.0
    female_fraction: float = 0.5
    missing_rate: float = 0.0
    max_scans_per_patient: int = 1
    split_fractions: tuple = (0.6, 0.1, 0.3)
    age_mean: float = AGE_MEAN
    age_sd: float = AGE_SD
    seed: int = 0

    def __post_init__(self):
        try:
            SPEC_SCHEMA(self.echo())
        except vol.Invalid as e:
            raise ValueError(f"invalid synthetic spec: {e}") from None
        unknown = set(self.race_shifts) - set(self.races)
        if isinstance(self.prevalence, dict):
            unknown |= set(self.races) ^ set(self.prevalence)
        if unknown:
            raise ValueError(f"race settings do not match races {list(self.races)}: {sorted(unknown)}")
        if self.dim < self.axes_needed:
            raise ValueError(f"dim={self.dim} is too small for {self.axes_needed} orthogonal signal axes")
        if sum(self.split_fractions) <= 0:
            raise ValueError("split fractions must not all be zero")

    @property
    def axes_needed(self):
        return len(self.labels) + 1 + len(self.races)

    def label_axis(self, label):
        return self.labels.index(label)

    @property
    def sex_axis(self):
        return len(self.labels)

    def race_axis(self, race):
        return len(self.labels) + 1 + self.races.index(race)

    def prevalence_for(self, race):
        return self.prevalence[race] if isinstance(self.prevalence, dict) else self.prevalence

    def echo(self):
        data = asdict(self)
        data.update(races=list(self.races), labels=list(self.labels), split_fractions=list(self.split_fractions),
                    race_shifts=dict(self.race_shifts))
        return data


def generate(spec):
    """Synthetic (EmbeddingSet, Cohort) with ``n_per_group`` scans per race. Deterministic given the spec seed.

    Patients keep their sex, race, age and split across scans; labels are drawn per scan.
    """
    fractions = np.asarray(spec.split_fractions, dtype=np.float64)
    fractions = fractions / fractions.sum()
    rows, blocks = [], []
    next_patient = 0
    for ordinal, race in enumerate(spec.races):
        rng = rng_for(spec.seed, ordinal)
        remaining = spec.n_per_group
        prevalence = spec.prevalence_for(race)
        while remaining:
            scans = min(int(rng.integers(1, spec.max_scans_per_patient + 1)), remaining)
            remaining -= scans
            next_patient += 1
            sex = 'Female' if rng.random() < spec.female_fraction else 'Male'
            age = float(np.clip(rng.normal(spec.age_mean, spec.age_sd), 0.0, MAX_AGE))
            split = SPLITS[int(rng.choice(len(SPLITS), p=fractions))]
            for _ in range(scans):
                labels = (rng.random(len(spec.labels)) < prevalence).astype(np.float64)
                rows.append({'patient_id': f"p{next_patient:05d}", 'sex': sex, 'race': race, 'age': age,
                             'split': split, **{LABEL_PREFIX + name: y for name, y in zip(spec.labels, labels)}})
        blocks.append(rng.normal(0.0, spec.noise_sd, size=(spec.n_per_group, spec.dim)))

    matrix = np.vstack(blocks)
    frame = pd.DataFrame(rows)
    frame.index = pd.Index([f"s{i + 1:06d}" for i in range(len(frame))], name='sample_id')

    for label in spec.labels:
        matrix[:, spec.label_axis(label)] += (frame[LABEL_PREFIX + label].to_numpy()
                                              * spec.disease_magnitude * spec.noise_sd)
    matrix[:, spec.sex_axis] += (frame['sex'] == 'Female').to_numpy() * spec.sex_shift * spec.noise_sd
    for race, shift in spec.race_shifts.items():
        matrix[:, spec.race_axis(race)] += (frame['race'] == race).to_numpy() * shift * spec.noise_sd

    if spec.missing_rate > 0:
        # missingness is applied after the embedding so the hidden label still shapes the features
        mask_rng = rng_for(spec.seed, len(spec.races))
        for label in spec.labels:
            column = LABEL_PREFIX + label
            hidden = mask_rng.random(len(frame)) < spec.missing_rate
            frame.loc[hidden, column] = np.nan

    embeddings = EmbeddingSet(frame.index, matrix)
    cohort = Cohort(frame[['patient_id', 'sex', 'race', 'age', 'split'] + [LABEL_PREFIX + l for l in spec.labels]])
    logging.info(f"Generated synthetic cohort: {len(cohort)} scans, {frame['patient_id'].nunique()} patients, "
                 f"d={spec.dim}")
    return embeddings, cohort


def write_synthetic(embeddings, cohort, out_dir, format='binary'):
    out_dir = Path(out_dir)
    suffix = 'bin' if format == 'binary' else 'csv'
    paths = {
        'embeddings': save_embeddings(embeddings, out_dir / f"embeddings.{suffix}", format),
        'cohort': save_cohort(cohort, out_dir / 'cohort.csv'),
    }
    logging.info(f"Wrote synthetic data to {out_dir}")
    return paths


def oracle_scores(embeddings, cohort, spec, degrade_group=None, degrade_factor=1.0):
    """Bayes-posterior scores read off each label's generating axis.

    For samples in ``degrade_group`` the label signal is shrunk to ``degrade_factor`` of its strength
    (fresh noise tops the variance back up), lowering that group's separability.
    """
    if not 0.0 <= degrade_factor <= 1.0:
        raise ValueError(f"degrade factor must lie in [0, 1], got {degrade_factor}")
    cohort.require_ids(embeddings.ids)
    matrix = embeddings.matrix / spec.noise_sd
    degraded = np.zeros(embeddings.n, dtype=bool)
    if degrade_group is not None:
        values = cohort.values(degrade_group.attribute, embeddings.ids)
        degraded = values == (float(degrade_group.value) if degrade_group.is_label else degrade_group.value)

    races = cohort.values('race', embeddings.ids)
    magnitude = spec.disease_magnitude
    scores = np.empty((embeddings.n, len(spec.labels)))
    for j, label in enumerate(spec.labels):
        signal = matrix[:, spec.label_axis(label)].copy()
        if degraded.any():
            noise = rng_for(mix64(spec.seed, 1 + j), len(spec.races) + 1).normal(size=int(degraded.sum()))
            signal[degraded] = degrade_factor * signal[degraded] + np.sqrt(1.0 - degrade_factor ** 2) * noise
        prevalence = np.array([spec.prevalence_for(r) if r in spec.races else 0.5 for r in races])
        logits = magnitude * signal - magnitude ** 2 / 2.0 + np.log(prevalence / (1.0 - prevalence))
        scores[:, j] = special.expit(logits)
    return ScoreTable(embeddings.ids, spec.labels, scores)
