import logging
import math
import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import pandas as pd
import voluptuous as vol

from .Errors import DimensionError, EmptyGroupError, SchemaError
from .Utils import format_count, format_count_pct, format_mean_sd

# Embedding binary layout: magic, u64 n, u64 d (little-endian), then n*d little-endian float32, row-major
MAGIC = b'EMB1'
HEADER = struct.Struct('<4sQQ')
FLOAT_BYTES = 4

REQUIRED_COLUMNS = ('sample_id', 'patient_id', 'sex', 'race', 'age', 'split')
LABEL_PREFIX = 'label_'
SEXES = ('Male', 'Female')
SPLITS = ('train', 'validation', 'test')
AGE_BIN = 'age_bin'
AGE_BIN_WIDTH = 10
DEMOGRAPHIC_ATTRIBUTES = ('sex', 'race', AGE_BIN)
SPLIT_TITLES = {'train': 'Training data', 'validation': 'Validation data', 'test': 'Test data'}
LABEL_VALUES = {'0': 0.0, '1': 1.0, '': np.nan}


class EmbeddingSet:
    """n x d backbone feature matrix with one sample id per row. Read-only after construction."""

    def __init__(self, ids, matrix):
        ids = tuple(str(i) for i in ids)
        matrix = np.array(matrix, dtype=np.float64)
        if matrix.ndim != 2:
            raise DimensionError(f"embedding matrix must be 2-D, got shape {matrix.shape}")
        n, d = matrix.shape
        if n < 1 or d < 1:
            raise DimensionError(f"embedding matrix must have n >= 1 and d >= 1, got ({n}, {d})")
        if len(ids) != n:
            raise DimensionError(f"{len(ids)} sample ids supplied for {n} rows")

        first_seen = {}
        for row, sample_id in enumerate(ids):
            if sample_id in first_seen:
                raise SchemaError(f"duplicate id '{sample_id}' (first at row {first_seen[sample_id] + 1})",
                                  row=row + 1, column='sample_id')
            first_seen[sample_id] = row

        bad = ~np.isfinite(matrix)
        if bad.any():
            row, col = np.argwhere(bad)[0]
            raise SchemaError(f"non-finite value {matrix[row, col]}", row=int(row) + 1, column=f"f{col}")

        matrix.setflags(write=False)
        self.ids = ids
        self.matrix = matrix
        self.index = first_seen

    @property
    def n(self):
        return self.matrix.shape[0]

    @property
    def d(self):
        return self.matrix.shape[1]

    def rows(self, ids):
        missing = [i for i in ids if i not in self.index]
        if missing:
            raise SchemaError(f"{len(missing)} sample ids not present in embedding set (first: '{missing[0]}')",
                              column='sample_id')
        return self.matrix[[self.index[i] for i in ids]]

    def subset(self, ids):
        ids = list(ids)
        return EmbeddingSet(ids, self.rows(ids))

    def __eq__(self, other):
        if not isinstance(other, EmbeddingSet):
            return NotImplemented
        return self.ids == other.ids and np.array_equal(self.matrix, other.matrix)

    def __repr__(self):
        return f"EmbeddingSet(n={self.n}, d={self.d})"


@dataclass(frozen=True, eq=False)
class GroupSelector:
    attribute: str
    value: str

    @classmethod
    def parse(cls, text):
        """'sex=Female', 'race=Asian', 'age_bin=60-69' or 'label_no_finding=1'."""
        if '=' not in text:
            raise ValueError(f"group selector '{text}' must look like attribute=value")
        attribute, value = (part.strip() for part in text.split('=', 1))
        if attribute.startswith('label(') and attribute.endswith(')'):
            attribute = LABEL_PREFIX + attribute[len('label('):-1]
        if attribute not in DEMOGRAPHIC_ATTRIBUTES and not attribute.startswith(LABEL_PREFIX):
            raise ValueError(f"group selector attribute must be sex, race, age_bin or label_<name>, got '{attribute}'")
        if attribute == AGE_BIN and value not in _age_bin_spellings(value):
            raise ValueError(f"age bin must look like 60-69 ({AGE_BIN_WIDTH}-year bins), got '{value}'")
        if attribute.startswith(LABEL_PREFIX) and value not in ('0', '1'):
            raise ValueError(f"label selector value must be 0 or 1, got '{value}'")
        return cls(attribute, value)

    @property
    def is_label(self):
        return self.attribute.startswith(LABEL_PREFIX)

    @property
    def label_name(self):
        return self.attribute[len(LABEL_PREFIX):] if self.is_label else None

    @property
    def name(self):
        if not self.is_label:
            return self.value
        return self.label_name if self.value == '1' else f"{self.label_name}={self.value}"

    def __str__(self):
        return f"{self.attribute}={self.value}"

    def __eq__(self, other):
        return isinstance(other, GroupSelector) and (self.attribute, self.value) == (other.attribute, other.value)

    def __hash__(self):
        return hash((self.attribute, self.value))


def _finite(value):
    if not math.isfinite(value):
        raise vol.Invalid('unparseable age')
    return value


def _row_schema(label_columns):
    schema = {
        vol.Required('sample_id'): vol.All(str, vol.Length(min=1, msg='empty sample_id')),
        vol.Required('patient_id'): vol.All(str, vol.Length(min=1, msg='empty patient_id')),
        vol.Required('sex'): vol.In(SEXES, msg=f"sex must be one of {', '.join(SEXES)}"),
        vol.Required('race'): vol.All(str, vol.Length(min=1, msg='empty race')),
        vol.Required('age'): vol.All(vol.Coerce(float, msg='unparseable age'), _finite,
                                     vol.Range(min=0, max=130, msg='age outside [0, 130]')),
        vol.Required('split'): vol.In(SPLITS, msg=f"split must be one of {', '.join(SPLITS)}"),
    }
    for column in label_columns:
        schema[vol.Required(column)] = vol.In(tuple(LABEL_VALUES), msg='label value outside {0, 1, empty}')
    return vol.Schema(schema, extra=vol.REMOVE_EXTRA)


class Cohort:
    """Per-sample metadata indexed by sample id.

    Columns: patient_id, sex, race, age (float years), split and one float column per label
    (``label_<name>``: 1.0, 0.0 or NaN for missing).
    """

    def __init__(self, frame):
        frame = frame.copy()
        frame.index.name = 'sample_id'
        if not frame.index.is_unique:
            duplicated = frame.index[frame.index.duplicated()][0]
            raise SchemaError(f"duplicate sample id '{duplicated}'", column='sample_id')
        self.frame = frame

    @classmethod
    def from_records(cls, records):
        """Validate raw string records (one dict per CSV row) and build a Cohort."""
        records = list(records)
        if not records:
            raise SchemaError("cohort has no rows")
        label_columns = [c for c in records[0] if c.startswith(LABEL_PREFIX)]
        schema = _row_schema(label_columns)

        clean = []
        seen = {}
        for row_number, record in enumerate(records, start=1):
            try:
                row = schema(record)
            except vol.MultipleInvalid as e:
                error = e.errors[0]
                column = error.path[0] if error.path else None
                raise SchemaError(error.msg, row=row_number, column=column) from None
            if row['sample_id'] in seen:
                raise SchemaError(f"duplicate sample id '{row['sample_id']}' (first at row {seen[row['sample_id']]})",
                                  row=row_number, column='sample_id')
            seen[row['sample_id']] = row_number
            for column in label_columns:
                row[column] = LABEL_VALUES[row[column]]
            clean.append(row)

        frame = pd.DataFrame(clean, columns=list(REQUIRED_COLUMNS) + label_columns).set_index('sample_id')
        frame['age'] = frame['age'].astype(np.float64)
        for column in label_columns:
            frame[column] = frame[column].astype(np.float64)
        return cls(frame)

    def __len__(self):
        return len(self.frame)

    @cached_property
    def ids(self):
        return tuple(self.frame.index)

    @cached_property
    def label_names(self):
        return tuple(c[len(LABEL_PREFIX):] for c in self.frame.columns if c.startswith(LABEL_PREFIX))

    def has_attribute(self, attribute):
        return attribute == AGE_BIN or attribute in self.frame.columns

    def column(self, attribute):
        """One attribute as a Series; ``age_bin`` is derived from age."""
        if attribute == AGE_BIN:
            return pd.Series(age_bin_names(self.frame['age']), index=self.frame.index, name=AGE_BIN)
        if attribute not in self.frame.columns:
            raise SchemaError(f"unknown attribute '{attribute}'", column=attribute)
        return self.frame[attribute]

    def require_ids(self, ids):
        """Joint-use check: every id referenced by an embedding or score table must exist here."""
        missing = self.frame.index.get_indexer(list(ids)) < 0
        if missing.any():
            first = list(ids)[int(np.argmax(missing))]
            raise SchemaError(f"{int(missing.sum())} sample ids are not in the cohort (first: '{first}')",
                              column='sample_id')

    def subset(self, ids):
        ids = list(ids)
        self.require_ids(ids)
        return Cohort(self.frame.loc[ids])

    def labels(self, name, ids=None):
        column = name if name.startswith(LABEL_PREFIX) else LABEL_PREFIX + name
        if column not in self.frame.columns:
            raise SchemaError(f"unknown label '{name}'", column=column)
        values = self.frame[column] if ids is None else self.frame.loc[list(ids), column]
        return values.to_numpy(dtype=np.float64)

    def label_matrix(self, names, ids=None):
        return np.column_stack([self.labels(name, ids) for name in names])

    def values(self, attribute, ids=None):
        values = self.column(attribute)
        if ids is not None:
            values = values.loc[list(ids)]
        return values.to_numpy()

    def __repr__(self):
        return f"Cohort(n={len(self)}, labels={list(self.label_names)})"


def sidecar_path(path):
    path = Path(path)
    return path.with_name(path.name + '.ids')


def _read_ids(path, n):
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"sample id sidecar file not found: {path}")
    ids = path.read_text(encoding='utf-8').splitlines()
    while ids and ids[-1] == '':
        ids.pop()
    if len(ids) != n:
        raise SchemaError(f"dimension mismatch: header declares n={n} rows but {path.name} lists {len(ids)} ids",
                          row=min(len(ids), n) + 1)
    return ids


def load_embeddings(path, format='binary', ids_path=None):
    path = Path(path)
    if format == 'binary':
        raw = path.read_bytes()
        if len(raw) < HEADER.size:
            raise SchemaError(f"malformed header: {path.name} is shorter than the {HEADER.size}-byte header")
        magic, n, d = HEADER.unpack_from(raw, 0)
        if magic != MAGIC:
            raise SchemaError(f"malformed header: bad magic bytes {magic!r}")
        if n < 1 or d < 1:
            raise SchemaError(f"malformed header: declared n={n}, d={d}")

        payload = memoryview(raw)[HEADER.size:]
        expected = n * d * FLOAT_BYTES
        if len(payload) < expected:
            complete = len(payload) // (d * FLOAT_BYTES)
            raise SchemaError(f"payload truncated: header declares n={n}, d={d} but only {complete} complete rows follow",
                              row=complete + 1)
        if len(payload) > expected:
            raise SchemaError(f"dimension mismatch: {len(payload) - expected} trailing bytes after n={n}, d={d} payload",
                              row=n + 1)

        matrix = np.frombuffer(payload, dtype='<f4', count=n * d).reshape(n, d)
        ids = _read_ids(ids_path or sidecar_path(path), n)
    elif format == 'csv':
        frame = pd.read_csv(path, dtype={'sample_id': str}, keep_default_na=False, float_precision='round_trip',
                        encoding='utf-8')
        columns = list(frame.columns)
        expected = ['sample_id'] + [f"f{j}" for j in range(len(columns) - 1)]
        if len(columns) < 2 or columns != expected:
            raise SchemaError(f"malformed header: expected sample_id,f0,...,f{{d-1}}, got {','.join(columns[:5])}...")
        features = frame[columns[1:]].apply(pd.to_numeric, errors='coerce')
        bad = features.isna().to_numpy()
        if bad.any():
            row, col = np.argwhere(bad)[0]
            raise SchemaError(f"non-finite or unparseable value '{frame.iat[row, col + 1]}'",
                              row=int(row) + 1, column=columns[col + 1])
        matrix = features.to_numpy(dtype=np.float64)
        ids = frame['sample_id'].tolist()
    else:
        raise ValueError(f"unknown embedding format '{format}' (expected binary or csv)")

    embeddings = EmbeddingSet(ids, matrix)
    logging.info(f"Loaded embeddings {path.name}: n={embeddings.n}, d={embeddings.d}")
    return embeddings


def save_embeddings(embeddings, path, format='binary'):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if format == 'binary':
        n, d = embeddings.matrix.shape
        with open(path, 'wb') as f:
            f.write(HEADER.pack(MAGIC, n, d))
            f.write(embeddings.matrix.astype('<f4').tobytes(order='C'))
        sidecar_path(path).write_text(''.join(f"{i}\n" for i in embeddings.ids), encoding='utf-8')
    elif format == 'csv':
        frame = pd.DataFrame(embeddings.matrix, columns=[f"f{j}" for j in range(embeddings.d)])
        frame.insert(0, 'sample_id', embeddings.ids)
        frame.to_csv(path, index=False, encoding='utf-8')
    else:
        raise ValueError(f"unknown embedding format '{format}' (expected binary or csv)")
    return path


def load_cohort(path):
    path = Path(path)
    frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding='utf-8')
    missing = [c for c in REQUIRED_COLUMNS if c not in frame.columns]
    if missing:
        raise SchemaError(f"missing required column(s): {', '.join(missing)}", column=missing[0])
    for column in frame.columns:
        if column not in REQUIRED_COLUMNS and not column.startswith(LABEL_PREFIX):
            logging.warning(f"Ignoring unknown column '{column}' in {path.name}")

    cohort = Cohort.from_records(frame.to_dict('records'))
    logging.info(f"Loaded cohort {path.name}: {len(cohort)} samples, labels={list(cohort.label_names)}")
    return cohort


def save_cohort(cohort, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = cohort.frame.reset_index()
    for name in cohort.label_names:
        column = LABEL_PREFIX + name
        frame[column] = frame[column].map(lambda v: '' if np.isnan(v) else str(int(v)))
    frame['age'] = frame['age'].map(repr)
    frame.to_csv(path, index=False, encoding='utf-8')
    return path


def age_bin_names(ages, width=AGE_BIN_WIDTH):
    lows = np.floor(np.asarray(ages, dtype=np.float64) / width).astype(int) * width
    return [f"{lo}-{lo + width - 1}" for lo in lows]


def _age_bin_spellings(value):
    lo = value.split('-', 1)[0]
    return age_bin_names([float(lo)]) if lo.isdigit() else []


def select_group(cohort, selector, require_non_empty=False):
    """Sample ids (cohort row order) matching the selector. Missing values never match."""
    if not cohort.has_attribute(selector.attribute):
        raise SchemaError(f"unknown attribute '{selector.attribute}'", column=selector.attribute)
    column = cohort.column(selector.attribute)
    if selector.is_label:
        mask = column == float(selector.value)
    else:
        mask = column == selector.value
    ids = tuple(cohort.frame.index[mask.to_numpy()])
    if require_non_empty and not ids:
        raise EmptyGroupError(f"group {selector} is empty")
    return ids


def ordered_values(cohort, attribute):
    # most frequent first, ties broken by name
    counts = cohort.column(attribute).value_counts()
    return sorted(counts.index, key=lambda v: (-counts[v], str(v)))


def humanize_label(name):
    return name.replace('_', ' ').capitalize()


def summarize_cohort(cohort, group_by=('race', 'sex'), row_attributes=('sex',), labels=None):
    """Cohort breakdown: one block per split (plus all data), one column per group."""
    if len(cohort) == 0:
        raise SchemaError("cannot summarize an empty cohort")
    labels = cohort.label_names if labels is None else tuple(labels)
    frame = cohort.frame
    if AGE_BIN in (*group_by, *row_attributes):
        frame = frame.assign(**{AGE_BIN: cohort.column(AGE_BIN)})

    columns = [('All', None, None)]
    for attribute in group_by:
        for value in ordered_values(cohort, attribute):
            columns.append((str(value), attribute, value))

    blocks = [('All data', frame)]
    for split in SPLITS:
        block = frame[frame['split'] == split]
        if len(block):
            blocks.append((SPLIT_TITLES[split], block))

    reference = {attribute: ordered_values(cohort, attribute)[0] for attribute in row_attributes}

    rows = []
    for title, block in blocks:
        cells = {name: [] for name, _, _ in columns}
        row_names = []

        def add(row_name, fn):
            row_names.append(row_name)
            for name, attribute, value in columns:
                subset = block if attribute is None else block[block[attribute] == value]
                cells[name].append(fn(subset, attribute))

        add('Patients', lambda s, a: format_count(s['patient_id'].nunique()))
        add('Scans', lambda s, a: format_count(len(s)) if a is None else format_count_pct(len(s), len(block)))
        add('Age (years)', lambda s, a: format_mean_sd(s['age']))
        for attribute in row_attributes:
            for value in ordered_values(cohort, attribute):
                if value == reference[attribute]:
                    continue
                add(str(value), lambda s, a, attribute=attribute, value=value:
                    '-' if a == attribute else format_count_pct(int((s[attribute] == value).sum()), len(s)))
        for label in labels:
            column = LABEL_PREFIX + label
            add(humanize_label(label), lambda s, a, column=column:
                format_count_pct(int((s[column] == 1.0).sum()), len(s)))

        for i, row_name in enumerate(row_names):
            rows.append({'block': title, 'attribute': row_name, **{name: cells[name][i] for name, _, _ in columns}})

    return pd.DataFrame(rows, columns=['block', 'attribute'] + [name for name, _, _ in columns])
