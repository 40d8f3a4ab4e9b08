import dataclasses
import shutil
import tempfile
from unittest import TestCase, mock

import numpy as np
import pandas as pd
import pytest
from pytest import raises

from nmainfluence import measures
from nmainfluence.actions import bootstrap, influence
from nmainfluence.actions.reml import correlation_matrix, fit_contrasts, fixed_fit, reml_fit
from nmainfluence.models import BootstrapPlan, DesignKey
from ..helper import contrast_network, fixture_network
from ..my_measure import MyMeasure

LABELS = ['A', 'B', 'C']


def triangle(scale=1.0):
    return contrast_network([
        ('S1', (0, 1), 0, [0.20], [[0.02 * scale]]),
        ('S2', (0, 1), 0, [0.40], [[0.03 * scale]]),
        ('S3', (0, 2), 0, [0.10], [[0.05 * scale]]),
        ('S4', (0, 2), 0, [0.30], [[0.02 * scale]]),
        ('S5', (1, 2), 1, [0.60], [[0.04 * scale]]),
        ('S6', (1, 2), 1, [0.20], [[0.03 * scale]]),
    ], LABELS)


def same_values(a, b):
    return np.array_equal(np.asarray(a, dtype=float), np.asarray(b, dtype=float), equal_nan=True)


class OValueTest(TestCase):
    def test_upper_tail_counts_ties(self):
        assert bootstrap.o_value(2.0, [1.0, 1.0, 3.0, 5.0]) == 0.5
        assert np.isclose(bootstrap.o_value(3.0, [1.0, 3.0, 5.0]), 2 / 3)

    def test_lower_tail(self):
        assert np.isclose(bootstrap.o_value(3.0, [1.0, 3.0, 5.0], measures.LOWER), 2 / 3)
        assert bootstrap.o_value(0.5, [1.0, 3.0, 5.0], measures.LOWER) == 0.0

    def test_missing_replicates_are_ignored(self):
        assert bootstrap.o_value(2.0, [1.0, float('nan'), 3.0]) == 0.5

    def test_it_should_refuse_no_replicates(self):
        with raises(ValueError):
            bootstrap.o_value(2.0, [float('nan')])

    def test_it_should_refuse_an_unknown_tail(self):
        with raises(ValueError, match='Unknown tail'):
            bootstrap.o_value(2.0, [1.0], 'both')

    def test_bootstrap_pvalue_is_the_upper_tail(self):
        assert bootstrap.bootstrap_pvalue(4.0, [1.0, 4.0, 6.0, 2.0]) == 0.5


class ResampleTest(TestCase):
    def test_replicate_streams_are_reproducible(self):
        a = bootstrap.replicate_rng(7, 3).standard_normal(5)
        b = bootstrap.replicate_rng(7, 3).standard_normal(5)
        c = bootstrap.replicate_rng(7, 4).standard_normal(5)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_it_should_keep_the_structure(self):
        net = triangle()
        fit = reml_fit(net)
        sample = bootstrap.resample_network(fit, net, bootstrap.replicate_rng(1, 0))
        assert [s.study_id for s in sample.studies] == [s.study_id for s in net.studies]
        assert list(sample.designs) == list(net.designs)
        for before, after in zip(net.studies, sample.studies):
            assert np.array_equal(before.s, after.s)
            assert before.reference == after.reference

    def test_without_heterogeneity_and_noise_it_returns_the_fitted_means(self):
        net = triangle(scale=1e-10)
        fit = fixed_fit(net)
        pooled = fit_contrasts(fit)
        sample = bootstrap.resample_network(fit, net, bootstrap.replicate_rng(1, 0))
        for study in sample.studies:
            expected = pooled.rebase(study.reference).restrict(study.contrast_arms).mean
            assert np.allclose(study.y, expected, atol=1e-3)

    def test_draws_have_the_marginal_covariance_of_the_model(self):
        net = contrast_network([
            ('S1', (0, 1), 0, [0.20], [[0.02]]),
            ('S2', (0, 1, 2), 0, [0.30, 0.40], [[0.03, 0.01], [0.01, 0.04]]),
            ('S3', (1, 2), 1, [0.60], [[0.05]]),
        ], LABELS)
        fit = dataclasses.replace(fixed_fit(net), tau2_hat=0.05)
        study = net.studies[1]
        expected_mean = fit_contrasts(fit).restrict(study.contrast_arms).mean
        expected = np.asarray(study.s) + 0.05 * correlation_matrix(2)
        rng = bootstrap.replicate_rng(19, 0)
        draws = np.array([bootstrap.resample_network(fit, net, rng).studies[1].y for _ in range(10000)])
        n = len(draws)
        variances = np.diag(expected)
        assert np.all(np.abs(draws.mean(axis=0) - expected_mean) < 3 * np.sqrt(variances / n))
        se_cov = np.sqrt((np.outer(variances, variances) + expected ** 2) / n)
        assert np.all(np.abs(np.cov(draws, rowvar=False) - expected) < 3 * se_cov)



class RunBootstrapTest(TestCase):
    def setUp(self):
        self.net = triangle()
        self.full = reml_fit(self.net)

    def test_results_do_not_depend_on_the_worker_count(self):
        plan = BootstrapPlan(B=6, seed=11, statistics=('psi', 'mdffits'))
        serial = bootstrap.run_bootstrap(self.net, plan, self.full, workers=1)
        parallel = bootstrap.run_bootstrap(self.net, plan, self.full, workers=2)
        assert serial.entries.keys() == parallel.entries.keys()
        for key, entry in serial.entries.items():
            assert same_values(entry.replicates, parallel.entries[key].replicates)
            assert entry.o_value == parallel.entries[key].o_value

    def test_a_single_replicate(self):
        plan = BootstrapPlan(B=1, seed=3, statistics=('psi',))
        result = bootstrap.run_bootstrap(self.net, plan, self.full, workers=1)
        assert len(result.entries) == self.net.n_designs
        for entry in result.entries.values():
            assert len(entry.replicates) == 1
            assert entry.o_value in (0.0, 1.0, None)

    def test_realized_values_match_the_measures(self):
        design = DesignKey.of([1, 2])
        plan = BootstrapPlan(B=2, seed=3, statistics=('psi',), designs=(design,))
        result = bootstrap.run_bootstrap(self.net, plan, self.full, workers=1)
        ctx = measures.DesignContext(self.net, design, self.full)
        assert result.entry(design, 'psi').realized == measures.compute('psi', ctx)
        assert list(result.o_values('psi')) == [design]

    def test_it_should_count_replicates_that_end_on_the_search_bound(self):
        real_fit = bootstrap.reml_fit

        def bounded_fit(*args, **kwargs):
            return dataclasses.replace(real_fit(*args, **kwargs), converged=False)

        plan = BootstrapPlan(B=3, seed=11, statistics=('psi',))
        with mock.patch('nmainfluence.actions.bootstrap.reml_fit', side_effect=bounded_fit):
            result = bootstrap.run_bootstrap(self.net, plan, self.full, workers=1)
        assert result.failed_replicates == 3
        for entry in result.entries.values():
            assert entry.failures == 3
            assert entry.flagged
            assert entry.o_value is None
            assert entry.realized is not None

    def test_it_should_count_designs_whose_refit_ends_on_the_search_bound(self):
        real_fit = influence.reml_fit

        def bounded_fit(*args, **kwargs):
            return dataclasses.replace(real_fit(*args, **kwargs), converged=False)

        plan = BootstrapPlan(B=2, seed=11, statistics=('psi', 'phi'))
        with mock.patch('nmainfluence.actions.influence.reml_fit', side_effect=bounded_fit):
            result = bootstrap.run_bootstrap(self.net, plan, self.full, workers=1)
        assert result.failed_replicates == 0
        for entry in result.entries.values():
            assert entry.failures == 2
            assert entry.flagged
            assert all(np.isnan(entry.replicates))

    def test_it_should_use_a_measure_registered_at_runtime(self):
        measure = MyMeasure()
        measures.register(measure)
        self.addCleanup(measures.unregister, measure)
        plan = BootstrapPlan(B=2, seed=3, statistics=('my-measure', 'psi'))
        result = bootstrap.run_bootstrap(self.net, plan, self.full, workers=2)
        for design in self.net.designs:
            entry = result.entry(design, 'my-measure')
            assert entry.realized == 2.0
            assert entry.replicates == (2.0, 2.0)
            assert entry.o_value == 1.0

    def test_replicates_carry_the_measures_themselves(self):
        measure = MyMeasure()
        assert 'my-measure' not in measures.registered_names()
        designs = tuple(self.net.designs)
        index, values = bootstrap._replicate((self.net, self.full, designs, (measure,), 3, 0))
        assert index == 0
        assert values == {(d, 'my-measure'): 2.0 for d in designs}

    def test_it_should_refuse_an_unknown_statistic(self):
        with raises(measures.UnknownMeasureError, match='cook'):
            bootstrap.run_bootstrap(self.net, BootstrapPlan(B=2, seed=3, statistics=('cook',)), self.full, workers=1)

    def test_dump_replicates(self):
        out_dir = tempfile.mkdtemp()
        self.addCleanup(shutil.rmtree, out_dir)
        plan = BootstrapPlan(B=3, seed=5, statistics=('psi', 'mdffits'))
        result = bootstrap.run_bootstrap(self.net, plan, self.full, workers=1)
        paths = bootstrap.dump_replicates(result, self.net, out_dir)
        assert [p.name for p in paths] == ['replicates_psi.csv', 'replicates_mdffits.csv']
        frame = pd.read_csv(paths[0])
        assert list(frame.columns) == ['replicate_index', 'design', 'value']
        assert len(frame) == 3 * self.net.n_designs
        assert set(frame['design']) == {'A vs B', 'A vs C', 'B vs C'}

    def test_bridge_designs_are_skipped(self):
        net = fixture_network()
        designs = bootstrap.evaluable_designs(net, reml_fit(net))
        assert len(designs) == 17
        assert net.design_by_label('AB vs DD') not in designs


@pytest.mark.slow
class FixtureBootstrapTest(TestCase):
    SEEDS = (20240601, 20240602, 20240603)
    B = 5000

    @classmethod
    def setUpClass(cls):
        cls.net = fixture_network()
        full = reml_fit(cls.net)
        cls.results = [bootstrap.run_bootstrap(cls.net, BootstrapPlan(B=cls.B, seed=seed), full, workers=8)
                       for seed in cls.SEEDS]

    def o_values(self, result, name):
        return {self.net.design_label(d): o for d, o in result.o_values(name).items()}

    def flagged(self, result, name):
        return {label for label, o in self.o_values(result, name).items() if o is not None and o < 0.05}

    def in_two_of_three(self, predicate):
        return sum(1 for result in self.results if predicate(result)) >= 2

    def test_every_replicate_is_used(self):
        for result in self.results:
            assert result.failed_replicates <= 0.05 * self.B
            for entry in result.entries.values():
                assert 0.0 <= entry.o_value <= 1.0

    def test_residual_and_mdffits_flag_two_designs(self):
        for name in ('psi', 'mdffits'):
            assert self.in_two_of_three(lambda r: self.flagged(r, name) == {'ARB vs CT', 'DD vs Placebo'}), name

    def test_heterogeneity_ratios_flag_dd_vs_placebo(self):
        for name in ('phi', 'xi'):
            assert self.in_two_of_three(lambda r: 'DD vs Placebo' in self.flagged(r, name)), name

    def test_bootstrap_wald_test_flags_arb_vs_ct(self):
        assert self.in_two_of_three(lambda r: self.o_values(r, 'w')['ARB vs CT'] < 0.05)

    def test_dd_vs_placebo_is_borderline(self):
        assert self.in_two_of_three(lambda r: 0.03 <= self.o_values(r, 'w')['DD vs Placebo'] <= 0.08)

    def test_other_designs_are_not_flagged_by_the_wald_test(self):
        labels = set(self.o_values(self.results[0], 'w')) - {'ARB vs CT', 'DD vs Placebo'}
        assert len(labels) == 15
        for label in labels:
            assert self.in_two_of_three(lambda r: self.o_values(r, 'w')[label] >= 0.05), label

