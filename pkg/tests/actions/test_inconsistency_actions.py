from unittest import TestCase

import numpy as np
from pytest import raises
from statsmodels.stats.meta_analysis import combine_effects

from nmainfluence.actions import inconsistency
from nmainfluence.actions.influence import lodo_fit
from nmainfluence.models import DesignKey
from ..helper import contrast_network, fixture_network

LABELS = ['A', 'B', 'C']


def triangle(bc=0.60):
    return contrast_network([
        ('S1', (0, 1), 0, [0.20], [[0.02]]),
        ('S2', (0, 1), 0, [0.40], [[0.03]]),
        ('S3', (0, 2), 0, [0.10], [[0.05]]),
        ('S4', (1, 2), 1, [bc], [[0.04]]),
    ], LABELS)


class WaldTest(TestCase):
    def test_single_study_design(self):
        net = triangle()
        design = DesignKey.of([1, 2])
        result = inconsistency.wald_lodo(net, design)
        lodo = lodo_fit(net, design).fit
        mu = dict(zip(lodo.treatments, lodo.mu_hat))
        i, j = lodo.treatments.index(1), lodo.treatments.index(2)
        predicted = mu[2] - mu[1]
        var_predicted = lodo.cov_mu[i, i] + lodo.cov_mu[j, j] - 2 * lodo.cov_mu[i, j]
        assert np.isclose(result.w, (0.60 - predicted) ** 2 / (0.04 + var_predicted))
        assert result.df == 1
        assert result.reference == 1
        assert result.treatments == (2,)
        assert np.isclose(result.mu_subset[0], 0.60)
        assert np.isclose(result.mu_rest[0], predicted)
        assert 0.0 <= result.p_chi2 <= 1.0

    def test_subset_fit_of_a_single_study(self):
        net = triangle()
        fit = inconsistency.subset_fit(net, DesignKey.of([0, 1]))
        assert fit.reference == 0
        assert fit.treatments == (1,)


class FixtureWaldTest(TestCase):
    @classmethod
    def setUpClass(cls):
        cls.net = fixture_network()
        cls.rows, cls.not_evaluable = inconsistency.wald_table(cls.net, workers=1)
        cls.by_label = {r.label: r for r in cls.rows}

    def test_evaluable_designs(self):
        assert len(self.rows) == 17
        assert [self.net.design_label(d) for d, _ in self.not_evaluable] == ['AB vs DD']

    def test_largest_statistics(self):
        assert 4.32 <= self.by_label['ARB vs CT'].w <= 4.62
        assert 4.07 <= self.by_label['DD vs Placebo'].w <= 4.37
        assert 3.59 <= self.by_label['ACE vs DD'].w <= 3.89
        top = sorted(self.rows, key=lambda r: -r.w)[:3]
        assert [r.label for r in top] == ['ARB vs CT', 'DD vs Placebo', 'ACE vs DD']

    def test_arb_vs_ct_estimates(self):
        row = self.by_label['ARB vs CT']
        assert self.net.label(row.reference) == 'ARB'
        assert 1.47 <= np.exp(row.mu_subset[0]) <= 1.53
        assert 0.88 <= np.exp(row.mu_rest[0]) <= 0.94

    def test_single_study_subset_is_the_study_odds_ratio(self):
        row = self.by_label['ACE vs ARB']
        assert 1.047 <= np.exp(row.mu_subset[0]) <= 1.057
        assert np.isclose(np.exp(row.mu_subset[0]), (537 * 8062) / (514 * 8005))

    def test_rows_are_sorted_by_p(self):
        ps = [r.p_chi2 for r in self.rows]
        assert ps == sorted(ps)


class GlobalInteractionTest(TestCase):
    def test_fixture(self):
        result = inconsistency.global_interaction_test(fixture_network())
        assert result.df == 13
        assert 0.1 <= result.p <= 0.9
        assert result.statistic >= 0.0

    def test_sensitivity_network_is_more_consistent(self):
        full = inconsistency.global_interaction_test(fixture_network())
        reduced = inconsistency.global_interaction_test(fixture_network(exclude_studies=('Jikei', 'E-COST', 'HYVET')))
        assert reduced.p > full.p
        assert 0.80 <= reduced.p <= 0.95

    def test_triangle_has_one_interaction_contrast(self):
        result = inconsistency.global_interaction_test(triangle())
        assert result.df == 1
        assert 0.0 <= result.p <= 1.0

    def test_it_should_refuse_a_network_without_loops(self):
        net = contrast_network([('S1', (0, 1), 0, [0.2], [[0.02]]), ('S2', (0, 1), 0, [0.4], [[0.03]])], LABELS[:2])
        with raises(inconsistency.TestNotApplicableError, match='not applicable'):
            inconsistency.global_interaction_test(net)


class BucherLoopTest(TestCase):
    def single_studies(self, bc):
        return contrast_network([
            ('S1', (0, 1), 0, [0.20], [[0.02]]),
            ('S3', (0, 2), 0, [0.50], [[0.05]]),
            ('S4', (1, 2), 1, [bc], [[0.04]]),
        ], LABELS)

    def test_one_study_per_edge(self):
        result = inconsistency.bucher_loop_test(self.single_studies(0.60), (0, 1, 2))
        assert np.isclose(result.inconsistency, 0.20 - 0.50 + 0.60)
        assert np.isclose(result.variance, 0.02 + 0.05 + 0.04)
        assert np.isclose(result.z, 0.30 / np.sqrt(0.11))

    def test_consistent_loop(self):
        result = inconsistency.bucher_loop_test(self.single_studies(0.30), (0, 1, 2))
        assert np.isclose(result.z, 0.0)
        assert np.isclose(result.p, 1.0)

    def test_under_dispersed_edges_use_the_fixed_effect(self):
        result = inconsistency.bucher_loop_test(triangle(), (0, 1, 2))
        pooled = combine_effects(np.array([0.20, 0.40]), np.array([0.02, 0.03]), method_re='dl')
        assert pooled.tau2 <= 0.0
        ab = result.edges[0]
        assert ab.study_ids == ('S1', 'S2')
        assert np.isclose(ab.estimate, 0.28)
        assert np.isclose(ab.variance, 0.012)
        assert np.isclose(ab.variance, pooled.var_eff_w_fe)

    def test_over_dispersed_edges_use_the_random_effect(self):
        net = contrast_network([
            ('S1', (0, 1), 0, [0.00], [[0.02]]),
            ('S2', (0, 1), 0, [0.80], [[0.03]]),
            ('S3', (0, 2), 0, [0.10], [[0.05]]),
            ('S4', (1, 2), 1, [0.60], [[0.04]]),
        ], LABELS)
        result = inconsistency.bucher_loop_test(net, (0, 1, 2))
        pooled = combine_effects(np.array([0.00, 0.80]), np.array([0.02, 0.03]), method_re='dl')
        assert pooled.tau2 > 0.0
        ab = result.edges[0]
        assert np.isclose(ab.estimate, pooled.mean_effect_re)
        assert np.isclose(ab.variance, pooled.var_eff_w_re)
        assert ab.variance > pooled.var_eff_w_fe

    def test_it_should_keep_the_variance_positive_for_identical_studies(self):
        net = contrast_network([
            ('S1', (0, 1), 0, [0.30], [[0.01]]),
            ('S2', (0, 1), 0, [0.30], [[1.00]]),
            ('S3', (0, 2), 0, [0.10], [[0.05]]),
            ('S4', (1, 2), 1, [0.60], [[0.04]]),
        ], LABELS)
        result = inconsistency.bucher_loop_test(net, (0, 1, 2))
        ab = result.edges[0]
        assert np.isclose(ab.variance, 1.0 / (1.0 / 0.01 + 1.0 / 1.00))
        assert ab.variance > 0.0
        assert np.isfinite(result.z)
        assert 0.0 <= result.p <= 1.0

    def test_multi_arm_studies_are_used_once(self):
        net = contrast_network([
            ('S1', (0, 1), 0, [0.20], [[0.02]]),
            ('S2', (0, 1, 2), 0, [0.30, 0.40], [[0.03, 0.01], [0.01, 0.04]]),
            ('S3', (1, 2), 1, [0.10], [[0.05]]),
            ('S4', (0, 2), 0, [0.60], [[0.04]]),
        ], LABELS)
        result = inconsistency.bucher_loop_test(net, (0, 1, 2))
        used = [sid for edge in result.edges for sid in edge.study_ids]
        assert sorted(used) == ['S1', 'S2', 'S3', 'S4']
        assert 'S2' in result.edges[0].study_ids

    def test_missing_edge(self):
        net = contrast_network([('S1', (0, 1), 0, [0.2], [[0.02]]), ('S3', (0, 2), 0, [0.5], [[0.05]])], LABELS)
        with raises(inconsistency.MissingEdgeError, match='B - C'):
            inconsistency.bucher_loop_test(net, (0, 1, 2))

    def test_it_should_refuse_repeated_treatments(self):
        with raises(ValueError):
            inconsistency.bucher_loop_test(triangle(), (0, 1, 1))

    def test_fixture_loops(self):
        net = fixture_network()
        for labels in inconsistency.loops_for_target(['CT', 'ARB']):
            result = inconsistency.bucher_loop_test(net, inconsistency.loop_by_labels(net, labels))
            assert 0.0 <= result.p <= 1.0

    def test_unknown_target(self):
        with raises(KeyError):
            inconsistency.loops_for_target(['AB', 'DD'])
