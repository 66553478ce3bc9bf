import json

import numpy as np
import pandas as pd
import pytest

from biasaudit import AuditConfig
from run import main

PIPELINE = ('synth', 'summarize', 'inspect', 'train-probe', 'evaluate')

CONFIG = """
[general]
seed = 2024
out_dir = out

[data]
cohort = out/synth/cohort.csv

[embeddings:synthetic]
path = out/synth/embeddings.bin

[scores:oracle]
path = out/synth/oracle_scores.csv

[synth]
n_per_group = 200
dim = 8
sex_shift = 2.0
oracle_scores = true
degrade_group = race=Black
degrade_factor = 0.5

[inspect]
modes = 4
per_group = 30
tsne = true

[tsne]
perplexity = 10
iterations = 60
exaggeration_iterations = 20

[bootstrap]
replicates = 20

[probe:linear]
architecture = linear
learning_rate = 0.01
batch_size = 64
max_epochs = 3

[probe:mlp3]
architecture = mlp
hidden_layers = 3
hidden_width = 8
learning_rate = 0.01
batch_size = 64
max_epochs = 3

[probe:mlp5]
architecture = mlp
hidden_layers = 5
hidden_width = 8
learning_rate = 0.01
batch_size = 64
max_epochs = 3
"""


def write_config(directory, text=CONFIG):
    path = directory / 'audit.ini'
    path.write_text(text, encoding='utf-8')
    return path


def run_pipeline(config, *extra):
    return [main([command, '--config', str(config), *extra]) for command in PIPELINE]


def snapshot(directory):
    return {path.relative_to(directory).as_posix(): path.read_bytes()
            for path in sorted(directory.rglob('*')) if path.is_file()}


@pytest.fixture
def pipeline(tmp_path):
    config = write_config(tmp_path)
    assert run_pipeline(config) == [0] * len(PIPELINE)
    return tmp_path / 'out'


# Start of tests

def test_synth_outputs(pipeline):
    synth = pipeline / 'synth'
    for name in ('embeddings.bin', 'embeddings.bin.ids', 'cohort.csv', 'oracle_scores.csv', 'synth_spec.json'):
        assert (synth / name).exists()
    spec = json.loads((synth / 'synth_spec.json').read_text())
    assert spec['spec']['n_per_group'] == 200
    assert spec['provenance']['seed'] == 2024
    assert len(pd.read_csv(synth / 'cohort.csv')) == 600


def test_summary_has_every_group(pipeline):
    table = pd.read_csv(pipeline / 'summarize' / 'cohort_summary.csv')
    assert len(table) > 0
    assert (pipeline / 'summarize' / 'cohort_summary.json').exists()


def test_ks_report_has_one_row_per_mode_and_comparison(pipeline):
    document = json.loads((pipeline / 'inspect' / 'all_scans' / 'synthetic_ks.json').read_text())
    rows = pd.DataFrame(document['rows'])
    assert len(rows) == 4 * 4
    assert rows.groupby('comparison').size().tolist() == [4, 4, 4, 4]
    table = pd.read_csv(pipeline / 'inspect' / 'all_scans' / 'synthetic_ks.csv')
    assert table['mode'].tolist() == [1, 2, 3, 4]
    assert (pipeline / 'inspect' / 'all_scans' / 'synthetic_tsne_coords.csv').exists()


def test_three_probe_models_are_written(pipeline):
    models = sorted(path.name for path in (pipeline / 'train-probe').glob('*.json') if path.name != 'provenance.json')
    assert models == ['linear.json', 'mlp3.json', 'mlp5.json']
    document = json.loads((pipeline / 'train-probe' / 'mlp5.json').read_text())
    assert document['backbone'] == 'synthetic'
    assert len(document['probe']['layers']) == 6


def test_evaluation_covers_probes_and_external_scores(pipeline):
    metrics = pd.read_csv(pipeline / 'evaluate' / 'metrics.csv')
    assert set(metrics['model']) == {'oracle', 'linear', 'mlp3', 'mlp5'}
    assert metrics.groupby('model').size().tolist() == [5, 5, 5, 5]
    for name in ('linear', 'mlp3', 'mlp5'):
        assert (pipeline / 'evaluate' / 'scores' / f"{name}.csv").exists()
    document = json.loads((pipeline / 'evaluate' / 'performance.json').read_text())
    assert set(document['thresholds']) == {'oracle', 'linear', 'mlp3', 'mlp5'}


def test_reruns_are_byte_identical(pipeline, tmp_path):
    first = snapshot(pipeline)
    assert run_pipeline(tmp_path / 'audit.ini') == [0] * len(PIPELINE)
    assert snapshot(pipeline) == first


def test_seed_override_changes_outputs(pipeline, tmp_path):
    before = (pipeline / 'synth' / 'embeddings.bin').read_bytes()
    assert main(['synth', '--config', str(tmp_path / 'audit.ini'), '--seed', '7']) == 0
    assert (pipeline / 'synth' / 'embeddings.bin').read_bytes() != before


def test_json_format_skips_csv_reports(tmp_path):
    config = write_config(tmp_path)
    assert main(['synth', '--config', str(config)]) == 0
    assert main(['summarize', '--config', str(config), '--format', 'json', '--out', 'json_out']) == 0
    assert (tmp_path / 'json_out' / 'summarize' / 'cohort_summary.json').exists()
    assert not (tmp_path / 'json_out' / 'summarize' / 'cohort_summary.csv').exists()


@pytest.mark.parametrize('text', [
    "[general]\nformat = xml\n",
    "[nonsense]\nkey = 1\n",
    "[probe]\narchitecture = linear\n",
    "[inspect]\nmodes = 0\n",
])
def test_bad_config_exits_with_one(tmp_path, text):
    assert main(['summarize', '--config', str(write_config(tmp_path, text))]) == 1


def test_missing_config_file_exits_with_one(tmp_path):
    assert main(['synth', '--config', str(tmp_path / 'absent.ini')]) == 1


def test_missing_cohort_fails_the_stage(tmp_path):
    assert main(['summarize', '--config', str(write_config(tmp_path, "[data]\ncohort = nowhere.csv\n"))]) == 1


def test_evaluate_before_training_fails(tmp_path):
    config = write_config(tmp_path)
    assert main(['synth', '--config', str(config)]) == 0
    assert main(['evaluate', '--config', str(config)]) == 1


def test_inspection_draws_a_thousand_per_group_by_default(tmp_path):
    assert AuditConfig.load(write_config(tmp_path, "[general]\nseed = 1\n"))['inspect']['per_group'] == 1000
    config = write_config(tmp_path, CONFIG.replace('per_group = 30\n', ''))
    assert main(['synth', '--config', str(config)]) == 0
    assert main(['inspect', '--config', str(config)]) == 1


def test_full_inspection_set_is_opt_in(tmp_path):
    config = write_config(tmp_path, CONFIG.replace('per_group = 30\n', 'per_group = 0\n'))
    assert main(['synth', '--config', str(config)]) == 0
    assert main(['inspect', '--config', str(config)]) == 0
    coords = pd.read_csv(tmp_path / 'out' / 'inspect' / 'all_scans' / 'synthetic_pca_coords.csv')
    cohort = pd.read_csv(tmp_path / 'out' / 'synth' / 'cohort.csv')
    assert len(coords) == (cohort['split'] == 'test').sum()


def test_coordinate_exports_carry_the_overlay_attributes(pipeline):
    cohort = pd.read_csv(pipeline / 'synth' / 'cohort.csv', dtype={'sample_id': str}).set_index('sample_id')
    for name in ('synthetic_pca_coords.csv', 'synthetic_tsne_coords.csv'):
        coords = pd.read_csv(pipeline / 'inspect' / 'all_scans' / name, dtype={'sample_id': str})
        assert list(coords.columns[:5]) == ['sample_id', 'sex', 'race', 'age', 'age_bin']
        assert coords['race'].value_counts().tolist() == [30, 30, 30]
        ages = cohort.loc[coords['sample_id'], 'age'].to_numpy()
        np.testing.assert_allclose(coords['age'], ages, rtol=1e-9)
        lows = (ages // 10 * 10).astype(int)
        assert coords['age_bin'].tolist() == [f"{lo}-{lo + 9}" for lo in lows]
