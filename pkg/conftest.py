import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from biasaudit import Cohort, EmbeddingSet


def make_cohort(rows, labels=('no_finding',)):
    """Cohort from compact tuples: (sample_id, patient_id, sex, race, age, split, *label strings)."""
    records = []
    for row in rows:
        sample_id, patient_id, sex, race, age, split, *values = row
        record = {'sample_id': sample_id, 'patient_id': patient_id, 'sex': sex, 'race': race,
                  'age': str(age), 'split': split}
        for label, value in zip(labels, values):
            record[f"label_{label}"] = value
        records.append(record)
    return Cohort.from_records(records)


@pytest.fixture
def small_cohort():
    return make_cohort([
        ('s1', 'p1', 'Female', 'White', 50, 'train', '1'),
        ('s2', 'p1', 'Female', 'White', 50, 'train', '0'),
        ('s3', 'p2', 'Male', 'Asian', 60, 'validation', ''),
        ('s4', 'p3', 'Male', 'Black', 70, 'test', '1'),
        ('s5', 'p4', 'Male', 'White', 40, 'test', '0'),
    ])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def random_embeddings(rng):
    matrix = rng.normal(size=(5, 4))
    return EmbeddingSet([f"s{i + 1}" for i in range(5)], matrix)
