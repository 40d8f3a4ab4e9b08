import os
import tempfile
from unittest import TestCase

import numpy as np
from pytest import raises

from nmainfluence.actions import ingest
from ..helper import arms, fixture_network, fixture_records

IDS = {'A': 0, 'B': 1, 'C': 2}


class ArmsToContrastsTest(TestCase):
    def test_two_arm_log_odds_ratio(self):
        study = ingest.arms_to_contrasts(arms('S', 'A', 10, 100, 'B', 20, 100), 'A', False, IDS)
        assert study.reference == 0
        assert study.contrast_arms == (1,)
        assert np.isclose(study.y[0], np.log(20 / 80) - np.log(10 / 90))
        assert np.isclose(study.s[0, 0], 1 / 10 + 1 / 90 + 1 / 20 + 1 / 80)

    def test_shared_reference_covariance(self):
        study = ingest.arms_to_contrasts(arms('S', 'A', 10, 100, 'B', 20, 100, 'C', 30, 100), 'A', False, IDS)
        assert np.isclose(study.s[0, 1], 1 / 10 + 1 / 90)
        assert np.isclose(study.s[1, 1], 1 / 30 + 1 / 70 + 1 / 10 + 1 / 90)

    def test_continuity_correction_applies_to_every_cell(self):
        study = ingest.arms_to_contrasts(arms('S', 'A', 2, 707, 'B', 0, 707), 'A', False, IDS)
        assert np.isclose(study.y[0], np.log(0.5 / 707.5) - np.log(2.5 / 705.5))
        assert np.isclose(study.s[0, 0], 1 / 0.5 + 1 / 707.5 + 1 / 2.5 + 1 / 705.5)

    def test_pseudo_reference_arm(self):
        study = ingest.arms_to_contrasts(arms('S', 'B', 10, 100, 'C', 20, 100), 'A', True, IDS)
        assert study.augmented
        assert study.arms == (0, 1, 2)
        assert study.real_arms == (1, 2)
        pseudo_var = 1 / 0.001 + 1 / (0.01 - 0.001)
        assert np.isclose(study.s[0, 1], pseudo_var)

    def test_it_should_refuse_a_missing_reference_without_augmentation(self):
        with raises(ingest.IngestError, match='lacks the reference arm A'):
            ingest.arms_to_contrasts(arms('S', 'B', 10, 100, 'C', 20, 100), 'A', False, IDS)

    def test_it_should_refuse_single_arm_studies(self):
        with raises(ingest.IngestError, match='fewer than 2 arms'):
            ingest.arms_to_contrasts(arms('S', 'A', 10, 100), 'A', False, IDS)

    def test_it_should_refuse_duplicate_arms(self):
        with raises(ingest.IngestError, match='duplicate arms'):
            ingest.arms_to_contrasts(arms('S', 'A', 10, 100, 'A', 20, 100), 'A', False, IDS)


class FixtureTest(TestCase):
    def test_hyvet_odds_ratio(self):
        net = fixture_network()
        hyvet = next(s for s in net.studies if s.study_id == 'HYVET')
        odds, lo, hi = ingest.odds_ratio_ci(hyvet, net.treatment_id('DD'))
        assert abs(odds - 0.375) < 0.002
        assert abs(lo - 0.228) < 0.002
        assert abs(hi - 0.615) < 0.002

    def test_studies_without_placebo_use_their_first_arm(self):
        net = fixture_network()
        stop2 = next(s for s in net.studies if s.study_id == 'STOP-2')
        assert net.label(stop2.reference) == 'ACE'
        assert np.isclose(stop2.s[0, 1], 1 / 149 + 1 / 2056)

    def test_default_reference_is_the_most_frequent_arm(self):
        net = ingest.arms_to_network(list(fixture_records()))
        assert net.label(net.global_reference) == 'CCB'

    def test_treatments_are_numbered_alphabetically(self):
        net = fixture_network()
        assert [t.label for t in net.treatments] == ['AB', 'ACE', 'ARB', 'BB', 'CCB', 'CT', 'DD', 'Placebo']

    def test_augmented_network(self):
        net = fixture_network(augment=True)
        assert sum(1 for s in net.studies if s.augmented) == 26 - 7
        assert all(s.reference == net.global_reference for s in net.studies)
        assert net.n_designs == 18


class ReadCsvTest(TestCase):
    def write(self, content):
        fd, path = tempfile.mkstemp(suffix='.csv')
        with os.fdopen(fd, 'w') as f:
            f.write(content)
        self.addCleanup(os.remove, path)
        return path

    def test_it_should_read_the_fixture(self):
        records = fixture_records()
        assert len(records) == 54
        assert records[0].study_id == 'ONTARGET'

    def test_empty_file(self):
        with raises(ingest.IngestError, match='empty'):
            ingest.read_arms_csv(self.write(''))

    def test_bad_header(self):
        with raises(ingest.IngestError, match='Expected header'):
            ingest.read_arms_csv(self.write('study,arm,events,total\nS,A,1,10\n'))

    def test_non_integer_counts(self):
        with raises(ingest.IngestError, match='counts must be integers'):
            ingest.read_arms_csv(self.write('study_id,treatment,events,total\nS,A,1.5,10\n'))

    def test_more_events_than_patients(self):
        with raises(ingest.IngestError, match='More events than patients'):
            ingest.read_arms_csv(self.write('study_id,treatment,events,total\nS,A,11,10\n'))

    def test_missing_values(self):
        with raises(ingest.IngestError, match='missing values'):
            ingest.read_arms_csv(self.write('study_id,treatment,events,total\nS,A,,10\n'))

    def test_load_network_excluding_studies(self):
        path = self.write('study_id,treatment,events,total\nS1,A,1,10\nS1,B,2,10\nS2,B,3,10\nS2,C,4,10\n')
        net = ingest.load_network(path, reference='A', exclude_studies=['S2'])
        assert net.n_studies == 1

    def test_load_network_unknown_exclusion(self):
        path = self.write('study_id,treatment,events,total\nS1,A,1,10\nS1,B,2,10\n')
        with raises(ingest.IngestError, match='Unknown study ids'):
            ingest.load_network(path, exclude_studies=['S9'])
