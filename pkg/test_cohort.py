import numpy as np
import pandas as pd
import pytest

from biasaudit import Cohort, EmbeddingSet, GroupSelector, SchemaError, EmptyGroupError
from biasaudit.Cohort import HEADER, MAGIC, load_cohort, load_embeddings, save_cohort, save_embeddings, select_group, \
    sidecar_path, summarize_cohort
from conftest import make_cohort

COHORT_HEADER = 'sample_id,patient_id,sex,race,age,split,label_no_finding,label_pneumothorax\n'


def write_binary(path, n, d, values, ids):
    with open(path, 'wb') as f:
        f.write(HEADER.pack(MAGIC, n, d))
        f.write(np.asarray(values, dtype='<f4').tobytes())
    sidecar_path(path).write_text(''.join(f"{i}\n" for i in ids))


def test_load_binary_embeddings(tmp_path):
    path = tmp_path / 'emb.bin'
    write_binary(path, 2, 3, [1, 2, 3, 4, 5, 6], ['a', 'b'])
    embeddings = load_embeddings(path)
    assert embeddings.ids == ('a', 'b')
    np.testing.assert_array_equal(embeddings.matrix, [[1, 2, 3], [4, 5, 6]])


def test_truncated_payload_names_row(tmp_path):
    path = tmp_path / 'emb.bin'
    write_binary(path, 2, 3, [1, 2, 3], ['a', 'b'])
    with pytest.raises(SchemaError, match='payload truncated') as error:
        load_embeddings(path)
    assert error.value.row == 2


def test_bad_magic_is_malformed_header(tmp_path):
    path = tmp_path / 'emb.bin'
    path.write_bytes(b'XXXX' + bytes(16))
    with pytest.raises(SchemaError, match='malformed header'):
        load_embeddings(path)


def test_trailing_bytes_are_a_dimension_mismatch(tmp_path):
    path = tmp_path / 'emb.bin'
    write_binary(path, 1, 2, [1, 2, 3], ['a'])
    with pytest.raises(SchemaError, match='dimension mismatch'):
        load_embeddings(path)


def test_duplicate_ids_reported_with_row():
    with pytest.raises(SchemaError, match='duplicate') as error:
        EmbeddingSet(['a', 'b', 'a'], np.zeros((3, 2)))
    assert error.value.row == 3


def test_non_finite_value_reported_with_row_and_column():
    matrix = np.zeros((3, 2))
    matrix[1, 1] = np.nan
    with pytest.raises(SchemaError) as error:
        EmbeddingSet(['a', 'b', 'c'], matrix)
    assert (error.value.row, error.value.column) == (2, 'f1')


def test_csv_and_binary_encodings_agree(tmp_path, rng):
    # eighths print exactly in decimal and fit in float32
    matrix = rng.integers(-100, 100, size=(5, 4)) / 8.0
    embeddings = EmbeddingSet([f"s{i}" for i in range(5)], matrix)
    save_embeddings(embeddings, tmp_path / 'e.bin', 'binary')
    save_embeddings(embeddings, tmp_path / 'e.csv', 'csv')
    from_binary = load_embeddings(tmp_path / 'e.bin', 'binary')
    from_csv = load_embeddings(tmp_path / 'e.csv', 'csv')
    assert from_binary == from_csv == embeddings


def test_binary_round_trip_is_bit_exact(tmp_path, rng):
    matrix = rng.normal(size=(6, 3)).astype(np.float32).astype(np.float64)
    embeddings = EmbeddingSet([f"id-{i}" for i in range(6)], matrix)
    save_embeddings(embeddings, tmp_path / 'e.bin')
    assert load_embeddings(tmp_path / 'e.bin') == embeddings


def test_csv_round_trip_is_bit_exact(tmp_path, rng):
    matrix = rng.normal(size=(200, 8)) * 10.0 ** rng.integers(-8, 8, size=(200, 8))
    embeddings = EmbeddingSet([f"id-{i}" for i in range(200)], matrix)
    save_embeddings(embeddings, tmp_path / 'e.csv', 'csv')
    np.testing.assert_array_equal(load_embeddings(tmp_path / 'e.csv', 'csv').matrix, matrix)


def test_csv_header_must_name_features(tmp_path):
    path = tmp_path / 'e.csv'
    path.write_text('sample_id,x,y\na,1,2\n')
    with pytest.raises(SchemaError, match='malformed header'):
        load_embeddings(path, 'csv')


def test_embeddings_are_read_only(random_embeddings):
    with pytest.raises(ValueError):
        random_embeddings.matrix[0, 0] = 1.0


def test_load_cohort(tmp_path):
    path = tmp_path / 'cohort.csv'
    path.write_text(COHORT_HEADER
                    + 's1,p1,Female,White,50,train,1,0\n'
                    + 's2,p1,Female,White,51.5,test,0,\n'
                    + 's3,p2,Male,Asian,70,validation,,1\n')
    cohort = load_cohort(path)
    assert len(cohort) == 3
    assert cohort.label_names == ('no_finding', 'pneumothorax')
    pneumothorax = cohort.labels('pneumothorax')
    assert np.isnan(pneumothorax[1])
    assert list(pneumothorax[[0, 2]]) == [0.0, 1.0]


def test_unparseable_age_names_row_and_column(tmp_path):
    path = tmp_path / 'cohort.csv'
    path.write_text(COHORT_HEADER + 's1,p1,Female,White,50,train,1,0\n' + 's2,p2,Male,Asian,abc,test,0,1\n')
    with pytest.raises(SchemaError) as error:
        load_cohort(path)
    assert (error.value.row, error.value.column) == (2, 'age')
    assert 'row 2' in str(error.value) and 'column age' in str(error.value)


@pytest.mark.parametrize('line, column', [
    ('s1,p1,Female,White,140,train,1,0\n', 'age'),
    ('s1,p1,Female,White,50,train,2,0\n', 'label_no_finding'),
    ('s1,p1,Other,White,50,train,1,0\n', 'sex'),
    ('s1,p1,Female,White,50,holdout,1,0\n', 'split'),
])
def test_invalid_cohort_values(tmp_path, line, column):
    path = tmp_path / 'cohort.csv'
    path.write_text(COHORT_HEADER + line)
    with pytest.raises(SchemaError) as error:
        load_cohort(path)
    assert error.value.column == column


def test_missing_required_column(tmp_path):
    path = tmp_path / 'cohort.csv'
    path.write_text('sample_id,patient_id,sex,age,split\ns1,p1,Female,50,train\n')
    with pytest.raises(SchemaError, match='race'):
        load_cohort(path)


def test_extra_columns_are_ignored_with_a_warning(tmp_path, caplog):
    path = tmp_path / 'cohort.csv'
    path.write_text('sample_id,patient_id,sex,race,age,split,site\ns1,p1,Female,White,50,train,A\n')
    cohort = load_cohort(path)
    assert not cohort.has_attribute('site')
    assert "Ignoring unknown column 'site'" in caplog.text


def test_cohort_round_trip(tmp_path, small_cohort):
    save_cohort(small_cohort, tmp_path / 'cohort.csv')
    loaded = load_cohort(tmp_path / 'cohort.csv')
    pd.testing.assert_frame_equal(loaded.frame, small_cohort.frame)


def test_joint_use_check(small_cohort):
    small_cohort.require_ids(['s1', 's4'])
    with pytest.raises(SchemaError, match='not in the cohort'):
        small_cohort.require_ids(['s1', 'unknown'])


def test_select_group(small_cohort):
    assert select_group(small_cohort, GroupSelector.parse('sex=Female')) == ('s1', 's2')
    assert select_group(small_cohort, GroupSelector.parse('label(no_finding)=1')) == ('s1', 's4')
    assert select_group(small_cohort, GroupSelector.parse('race=Martian')) == ()
    with pytest.raises(EmptyGroupError):
        select_group(small_cohort, GroupSelector.parse('race=Martian'), require_non_empty=True)


def test_missing_labels_never_match(small_cohort):
    positives = select_group(small_cohort, GroupSelector.parse('label_no_finding=1'))
    negatives = select_group(small_cohort, GroupSelector.parse('label_no_finding=0'))
    assert 's3' not in positives + negatives


def test_sex_partitions_the_cohort(small_cohort):
    female = set(select_group(small_cohort, GroupSelector.parse('sex=Female')))
    male = set(select_group(small_cohort, GroupSelector.parse('sex=Male')))
    assert not female & male
    assert female | male == set(small_cohort.ids)


def test_selector_parsing():
    selector = GroupSelector.parse('label(pleural_effusion)=1')
    assert selector.attribute == 'label_pleural_effusion'
    assert selector.name == 'pleural_effusion'
    assert GroupSelector.parse('race=Asian') == GroupSelector('race', 'Asian')
    with pytest.raises(ValueError):
        GroupSelector.parse('height=180')


@pytest.mark.parametrize('text', ['age_bin=65-74', 'age_bin=60-70', 'age_bin=sixties', 'age_bin=-10--1'])
def test_age_bins_are_ten_year_decades(text):
    assert GroupSelector.parse('age_bin=60-69') == GroupSelector('age_bin', '60-69')
    with pytest.raises(ValueError, match='age bin'):
        GroupSelector.parse(text)


def test_select_by_age_bin(small_cohort):
    assert select_group(small_cohort, GroupSelector.parse('age_bin=50-59')) == ('s1', 's2')
    assert select_group(small_cohort, GroupSelector.parse('age_bin=80-89')) == ()
    assert small_cohort.has_attribute('age_bin')
    assert small_cohort.values('age_bin', ['s5', 's4']).tolist() == ['40-49', '70-79']
    assert 'age_bin' not in small_cohort.frame.columns


def test_summary_by_age_bin(small_cohort):
    summary = summarize_cohort(small_cohort, group_by=('age_bin',))
    assert list(summary.columns[2:]) == ['All', '50-59', '40-49', '60-69', '70-79']
    scans = summary[(summary['block'] == 'All data') & (summary['attribute'] == 'Scans')]
    assert scans['50-59'].item() == '2 (40)'


def test_summary_percentages_and_ages():
    rows = [(f"s{i}", f"p{i}", 'Female' if i < 4 else 'Male', 'White', 60, 'test', '1') for i in range(10)]
    rows[0] = ('s0', 'p0', 'Female', 'White', 50, 'test', '1')
    rows[1] = ('s1', 'p1', 'Female', 'White', 70, 'test', '0')
    summary = summarize_cohort(make_cohort(rows))
    everything = summary[summary['block'] == 'All data'].set_index('attribute')
    assert everything.loc['Scans', 'All'] == '10'
    assert everything.loc['Female', 'All'] == '4 (40)'
    assert everything.loc['Female', 'Female'] == '-'
    assert everything.loc['Scans', 'Female'] == '4 (40)'
    assert everything.loc['No finding', 'All'] == '9 (90)'


def test_summary_age_uses_sample_sd():
    rows = [('a', 'p1', 'Male', 'White', 50, 'train', '0'), ('b', 'p2', 'Male', 'White', 60, 'train', '0'),
            ('c', 'p3', 'Male', 'White', 70, 'train', '1')]
    summary = summarize_cohort(make_cohort(rows), group_by=('race',))
    row = summary[(summary['block'] == 'All data') & (summary['attribute'] == 'Age (years)')]
    assert row['All'].item() == '60 ± 10'


def test_summary_counts_patients_and_scans_separately():
    rows = [('a', 'p1', 'Male', 'White', 50, 'train', '0'), ('b', 'p1', 'Male', 'White', 50, 'test', '0'),
            ('c', 'p2', 'Female', 'Asian', 40, 'train', '1'), ('d', 'p2', 'Female', 'Asian', 40, 'test', '1')]
    summary = summarize_cohort(make_cohort(rows))
    everything = summary[summary['block'] == 'All data'].set_index('attribute')
    assert everything.loc['Patients', 'All'] == '2'
    assert everything.loc['Scans', 'All'] == '4'
    assert list(summary['block'].unique()) == ['All data', 'Training data', 'Test data']


def test_summary_group_percentages_sum_to_100(small_cohort):
    summary = summarize_cohort(small_cohort, group_by=('sex',))
    scans = summary[(summary['block'] == 'All data') & (summary['attribute'] == 'Scans')]
    percentages = [int(scans[column].item().split('(')[1].rstrip(')')) for column in ('Male', 'Female')]
    assert sum(percentages) == 100


def test_cohort_constructor_rejects_duplicate_ids():
    frame = pd.DataFrame({'patient_id': ['p1', 'p2']}, index=['a', 'a'])
    with pytest.raises(SchemaError, match='duplicate'):
        Cohort(frame)
