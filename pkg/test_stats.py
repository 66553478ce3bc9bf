import math

import hypothesis.strategies as st
import numpy as np
import pytest
from hypothesis import given

from biasaudit import EmbeddingSet, GroupSelector, benjamini_yekutieli, ks_two_sample, marginal_density, \
    pca_fit, pca_transform, run_feature_bias_test
from biasaudit.Stats import adjust_jointly, harmonic_number, marginal_densities, significance_tier
from biasaudit.Synth import SynthSpec, generate
from conftest import make_cohort

NULL_PAIRS = [('race=White', 'race=Asian'), ('race=White', 'race=Black'), ('race=Asian', 'race=Black'),
              ('sex=Male', 'sex=Female'), ('label_no_finding=1', 'label_no_finding=0')]


# independent oracles

def brute_force_ks_statistic(a, b):
    best = 0.0
    for x in list(a) + list(b):
        gap = abs(sum(v <= x for v in a) / len(a) - sum(v <= x for v in b) / len(b))
        best = max(best, gap)
    return best


def brute_force_by(p):
    m = len(p)
    c = math.fsum(1.0 / k for k in range(1, m + 1))
    adjusted = []
    for pi in p:
        candidates = []
        for pj in p:
            if pj >= pi:
                rank = sum(q <= pj for q in p)
                candidates.append(pj * m * c / rank)
        adjusted.append(min(min(candidates), 1.0))
    return adjusted


def permutation_tails(a, b, draws, rng, chunk=10_000):
    """Permutation estimates of P(D > d) and P(D >= d) at the observed D."""
    merged = np.concatenate([a, b])
    order = np.argsort(merged, kind='mergesort')
    n1, n2 = len(a), len(b)
    observed = ks_two_sample(a, b).d_stat
    membership = np.zeros(n1 + n2)
    membership[:n1] = 1.0
    above = at_or_above = 0
    for start in range(0, draws, chunk):
        size = min(chunk, draws - start)
        shuffled = rng.permuted(np.tile(membership, (size, 1)), axis=1)[:, order]
        in_a = np.cumsum(shuffled, axis=1)
        d = np.max(np.abs(in_a / n1 - (np.arange(1, n1 + n2 + 1) - in_a) / n2), axis=1)
        above += int(np.sum(d > observed + 1e-12))
        at_or_above += int(np.sum(d >= observed - 1e-12))
    return above / draws, at_or_above / draws


def projected(embeddings, modes):
    model = pca_fit(embeddings.matrix, modes)
    return EmbeddingSet(embeddings.ids, pca_transform(model, embeddings.matrix)), model


def pairs_of(texts):
    return [(GroupSelector.parse(a), GroupSelector.parse(b)) for a, b in texts]


# Start of tests

def test_identical_samples():
    result = ks_two_sample([1, 2, 3], [1, 2, 3])
    assert result.d_stat == 0.0
    assert result.p_raw == 1.0


def test_disjoint_supports():
    assert ks_two_sample([1, 2, 3], [4, 5, 6]).d_stat == 1.0


def test_interleaved_samples():
    result = ks_two_sample([0.1, 0.2, 0.3, 0.4], [0.25, 0.35, 0.45, 0.55])
    assert result.d_stat == 0.5
    assert (result.n1, result.n2) == (4, 4)


def test_ks_matches_brute_force_ecdf_scan():
    rng = np.random.default_rng(2024)
    for trial in range(50):
        n1, n2 = rng.integers(1, 101, size=2)
        if trial % 2:
            a, b = rng.integers(0, 10, size=n1).astype(float), rng.integers(0, 10, size=n2).astype(float)
        else:
            a, b = rng.normal(size=n1), rng.normal(0.3, 1.2, size=n2)
        assert ks_two_sample(a, b).d_stat == brute_force_ks_statistic(a, b)


@given(st.integers(min_value=0, max_value=2 ** 32 - 1))
def test_ks_is_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=rng.integers(1, 40)), rng.normal(size=rng.integers(1, 40))
    assert ks_two_sample(a, b).d_stat == ks_two_sample(b, a).d_stat
    assert ks_two_sample(a, b).p_raw == ks_two_sample(b, a).p_raw


@given(st.integers(min_value=0, max_value=2 ** 32 - 1))
def test_ks_statistic_is_invariant_under_monotone_transforms(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(-3, 3, size=30), rng.uniform(-2, 4, size=25)
    assert ks_two_sample(np.exp(a), np.exp(b)).d_stat == ks_two_sample(a, b).d_stat


def test_ks_rejects_empty_samples():
    with pytest.raises(Exception, match='non-empty'):
        ks_two_sample([], [1.0])


@pytest.mark.slow
def test_ks_p_value_agrees_with_permutation_oracle():
    # D lives on a 1/100 lattice here; the continuous tail falls between the strict and non-strict tails
    rng = np.random.default_rng(99)
    for shift in (0.0, 0.2, 0.35):
        a, b = rng.normal(size=100), rng.normal(shift, 1.0, size=100)
        strict, inclusive = permutation_tails(a, b, 100_000, rng)
        p_raw = ks_two_sample(a, b).p_raw
        assert strict - 0.02 <= p_raw <= inclusive + 0.02
        assert inclusive - strict <= 0.2


def test_by_single_test_is_unchanged():
    np.testing.assert_array_equal(benjamini_yekutieli([0.03]), [0.03])


def test_by_worked_example():
    adjusted = benjamini_yekutieli([0.01, 0.02, 0.03, 0.04])
    assert np.max(np.abs(adjusted - 1 / 12)) <= 1e-12


def test_by_clips_at_one():
    np.testing.assert_array_equal(benjamini_yekutieli([0.9, 0.95]), [1.0, 1.0])


def test_by_family_of_twenty():
    adjusted = benjamini_yekutieli([0.001] + [0.9] * 19)
    assert adjusted[0] == pytest.approx(0.001 * 20 * harmonic_number(20))
    assert adjusted[0] == pytest.approx(0.072, abs=5e-4)
    assert significance_tier(adjusted[0]) == 'ns'


def test_by_matches_direct_formula_oracle():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        m = int(rng.integers(1, 11))
        p = rng.uniform(size=m)
        if rng.random() < 0.3:
            p[rng.integers(0, m)] = p[0]
        assert benjamini_yekutieli(p).tolist() == brute_force_by(p.tolist())


@given(st.lists(st.floats(min_value=0.0, max_value=1.0), min_size=1, max_size=30))
def test_by_is_rank_monotone_and_never_below_raw(p):
    adjusted = benjamini_yekutieli(p)
    assert np.all(adjusted >= np.asarray(p))
    assert np.all(adjusted <= 1.0)
    order = np.argsort(p, kind='mergesort')
    assert np.all(np.diff(adjusted[order]) >= 0)


def test_by_rejects_invalid_p_values():
    with pytest.raises(ValueError):
        benjamini_yekutieli([0.5, 1.5])


@pytest.mark.parametrize('p, tier', [(0.0009, '**'), (0.001, '*'), (0.049, '*'), (0.05, 'ns'), (1.0, 'ns')])
def test_significance_tiers(p, tier):
    assert significance_tier(p) == tier


@given(st.lists(st.integers(min_value=-8000, max_value=8000), min_size=2, max_size=200))
def test_marginal_density_has_unit_mass(values):
    assert marginal_density(np.array(values) / 8.0).mass == pytest.approx(1.0)


def test_uniform_density_with_fixed_bins(rng):
    histogram = marginal_density(rng.uniform(size=10_000), bins=4)
    assert len(histogram.density) == 4
    assert np.all(np.abs(histogram.density - 1.0) < 0.1)


def test_auto_bins_fall_back_to_sturges():
    # zero IQR, then a lone outlier that would need millions of Freedman-Diaconis bins
    assert len(marginal_density(np.r_[np.zeros(50), 1.0]).density) == 7
    long_tailed = marginal_density(np.r_[np.linspace(0.0, 1.0, 100), 1e6])
    assert len(long_tailed.density) == 8
    assert long_tailed.mass == pytest.approx(1.0)
    assert len(marginal_density(np.linspace(0.0, 1.0, 100)).density) == len(np.histogram_bin_edges(
        np.linspace(0.0, 1.0, 100), bins='fd')) - 1


def test_identical_values_make_one_bin():
    histogram = marginal_density([2.5] * 7)
    assert len(histogram.density) == 1
    assert histogram.mass == pytest.approx(1.0)


def test_shifted_group_is_flagged_in_mode_one(rng):
    n = 1000
    coords = rng.normal(size=(2 * n, 4))
    coords[n:, 0] += 5.0
    ids = [f"s{i}" for i in range(2 * n)]
    embeddings = EmbeddingSet(ids, coords)
    cohort = make_cohort([(i, f"p{k}", 'Male' if k < n else 'Female', 'White', 50, 'test', '0')
                          for k, i in enumerate(ids)])
    report = run_feature_bias_test(embeddings, cohort, pairs_of([('sex=Male', 'sex=Female')]), 4,
                                   [0.4, 0.2, 0.2, 0.2])
    first = report.rows[0]
    assert first.mode == 1
    assert first.p_adjusted < 0.001 and first.tier == '**'
    assert all(row.p_adjusted >= row.p_raw for row in report.rows)
    assert [row.mode for row in report.rows] == [1, 2, 3, 4]


def test_report_layout_and_tiers():
    embeddings, cohort = generate(SynthSpec(n_per_group=120, dim=8, sex_shift=4.0, seed=5))
    coords, model = projected(embeddings, 4)
    pairs = pairs_of(NULL_PAIRS[:4])
    report = run_feature_bias_test(coords, cohort, pairs, 4, model.explained_variance_ratio, model='synthetic',
                                   metadata={'seed': 5})
    assert len(report.rows) == 16
    frame = report.to_frame()
    assert frame.groupby('comparison').size().tolist() == [4, 4, 4, 4]
    assert all(row.tier == significance_tier(row.p_adjusted) for row in report.rows)
    table = report.to_table()
    assert list(table['mode']) == [1, 2, 3, 4]
    assert 'Male / Female' in table.columns
    assert report.to_dict()['metadata']['seed'] == 5


def test_missing_group_is_an_error(small_cohort, random_embeddings):
    with pytest.raises(Exception, match='race=Martian'):
        run_feature_bias_test(random_embeddings, small_cohort, pairs_of([('race=White', 'race=Martian')]), 2)


def test_too_many_modes(small_cohort, random_embeddings):
    with pytest.raises(ValueError):
        run_feature_bias_test(random_embeddings, small_cohort, pairs_of([('sex=Male', 'sex=Female')]), 5)


def test_pooled_family_adjusts_across_reports():
    embeddings, cohort = generate(SynthSpec(n_per_group=60, dim=6, seed=11))
    coords, _ = projected(embeddings, 3)
    pairs = pairs_of(NULL_PAIRS[:2])
    first = run_feature_bias_test(coords, cohort, pairs, 3, model='a')
    second = run_feature_bias_test(coords, cohort, pairs, 3, model='b')
    pooled = adjust_jointly([first, second])
    raw = [row.p_raw for report in (first, second) for row in report.rows]
    expected = benjamini_yekutieli(raw)
    assert [row.p_adjusted for report in pooled for row in report.rows] == expected.tolist()
    assert pooled[0].metadata['family'] == 'pooled'


def test_marginal_densities_frame(small_cohort, random_embeddings):
    frame = marginal_densities(random_embeddings, small_cohort, [GroupSelector.parse('race=White')], 2, bins=3)
    assert set(frame['dimension']) == {1, 2}
    for _, rows in frame.groupby('dimension'):
        assert np.sum(rows['density'] * (rows['bin_right'] - rows['bin_left'])) == pytest.approx(1.0)


@pytest.mark.slow
def test_null_cohort_is_calibrated():
    pairs = pairs_of(NULL_PAIRS)
    raw, adjusted = [], []
    for seed in range(500):
        embeddings, cohort = generate(SynthSpec(n_per_group=300, dim=8, disease_magnitude=0.0, seed=seed))
        coords, model = projected(embeddings, 4)
        report = run_feature_bias_test(coords, cohort, pairs, 4, model.explained_variance_ratio)
        raw.extend(row.p_raw for row in report.rows)
        adjusted.extend(row.p_adjusted for row in report.rows)
    assert 0.03 <= np.mean(np.array(raw) < 0.05) <= 0.07
    assert np.mean(np.array(adjusted) < 0.05) < 0.02


@pytest.mark.slow
def test_injected_sex_shift_is_detected():
    pairs = pairs_of([('sex=Male', 'sex=Female')])
    detected = 0
    for seed in range(100):
        spec = SynthSpec(n_per_group=1000, dim=16, sex_shift=5.0, seed=seed)
        embeddings, cohort = generate(spec)
        coords, model = projected(embeddings, 4)
        aligned = int(np.argmax(np.abs(model.components[:, spec.sex_axis])))
        report = run_feature_bias_test(coords, cohort, pairs, 4, model.explained_variance_ratio)
        detected += report.rows[aligned].p_adjusted < 0.001
    assert detected >= 99
