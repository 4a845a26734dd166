import csv
import os
import tempfile

import numpy as np
from django.test import SimpleTestCase
from hypothesis import given, settings, strategies as st

from reranker.bundle import ModelBundle
from reranker.crban import FULL_VARIANT
from reranker.evalsim import (
    BASELINE_ARM, MetricsReport, SyntheticUser, auc, gauc, metrics_report, run_sessions,
    simulate, variant_table, write_position_csv,
)
from reranker.exceptions import UndefinedMetricError
from reranker.session_log import SessionLog
from reranker.trainer import variant

from .helpers import make_item, tiny_config


def pair_count_auc(labels, scores):
    pos = [s for y, s in zip(labels, scores) if y == 1]
    neg = [s for y, s in zip(labels, scores) if y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


class AucTests(SimpleTestCase):
    def test_perfect_and_reversed(self):
        self.assertEqual(auc([1, 0], [0.9, 0.1]), 1.0)
        self.assertEqual(auc([1, 0], [0.1, 0.9]), 0.0)

    def test_ties_count_half(self):
        self.assertEqual(auc([1, 0, 0], [0.5, 0.5, 0.1]), 0.75)

    def test_single_class(self):
        with self.assertRaises(UndefinedMetricError):
            auc([1, 1], [0.2, 0.3])
        with self.assertRaises(UndefinedMetricError):
            auc([], [])


class GaucTests(SimpleTestCase):
    def test_single_request(self):
        self.assertEqual(gauc([([1, 0], [0.9, 0.1], 2)]), 1.0)

    def test_impression_weighted_average(self):
        value = gauc([
            ([1, 0], [0.9, 0.1], 2),
            ([1, 0], [0.4, 0.4], 3),
        ])
        self.assertAlmostEqual(value, 0.7, delta=1e-12)

    def test_matches_pair_counting_with_ties(self):
        rng = np.random.default_rng(12)
        requests = []
        for _ in range(500):
            n = int(rng.integers(2, 12))
            labels = rng.integers(0, 2, size=n).tolist()
            scores = np.round(rng.uniform(0, 1, size=n), 1).tolist()
            requests.append((labels, scores, n))
        numerator = denominator = 0.0
        for labels, scores, n in requests:
            if 0 < sum(labels) < len(labels):
                numerator += n * pair_count_auc(labels, scores)
                denominator += n
        self.assertAlmostEqual(gauc(requests), numerator / denominator, delta=1e-12)

    def test_one_class_requests_are_excluded(self):
        value = gauc([([1, 0], [0.9, 0.1], 2), ([1, 1], [0.1, 0.2], 100), ([0], [0.3], 50)])
        self.assertEqual(value, 1.0)

    def test_no_mixed_request(self):
        with self.assertRaises(UndefinedMetricError):
            gauc([([1, 1], [0.1, 0.2], 2)])
        with self.assertRaises(UndefinedMetricError):
            gauc([])

    def test_random_scores_average_one_half(self):
        rng = np.random.default_rng(31)
        requests = []
        for _ in range(1000):
            labels = rng.integers(0, 2, size=20).tolist()
            requests.append((labels, rng.uniform(0, 1, size=20).tolist(), 20))
        self.assertAlmostEqual(gauc(requests), 0.5, delta=0.02)

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(3)
        requests = []
        for _ in range(50):
            labels = [1, 0] + rng.integers(0, 2, size=6).tolist()
            requests.append((labels, rng.normal(size=8).tolist(), 8))
        transformed = [(y, (np.exp(3 * np.asarray(s)) + 1).tolist(), n) for y, s, n in requests]
        self.assertAlmostEqual(gauc(requests), gauc(transformed), delta=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 1), st.floats(0, 1)), min_size=2, max_size=20))
    def test_value_in_unit_interval(self, pairs):
        labels = [1, 0] + [y for y, _ in pairs]
        scores = [0.5, 0.5] + [s for _, s in pairs]
        value = gauc([(labels, scores, len(labels))])
        self.assertGreaterEqual(value, 0.0)
        self.assertLessEqual(value, 1.0)


class SyntheticUserTests(SimpleTestCase):
    def setUp(self):
        self.params = tiny_config().simulator_params()

    def user(self, seed=1):
        return SyntheticUser.create(0, self.params, 6, seed)

    def test_same_seed_same_user(self):
        np.testing.assert_array_equal(self.user().category_affinity, self.user().category_affinity)
        self.assertFalse(np.array_equal(self.user(1).category_affinity, self.user(2).category_affinity))

    def test_probabilities_are_bounded(self):
        user = self.user()
        for c in range(6):
            item = make_item(c, category=c)
            for _ in range(30):
                user.after_click(item)
                self.assertTrue(0.0 <= user.click_probability(item) <= 1.0)
                self.assertTrue(0.0 <= user.delete_probability(item) <= 1.0)
                user.after_exposure(item)

    def test_click_boosts_and_exposure_fatigues(self):
        item = make_item(1, category=2)
        user = self.user()
        base = user.click_probability(item)
        user.after_click(item)
        self.assertGreater(user.click_probability(item), base)

        user = self.user()
        for _ in range(5):
            user.after_exposure(item)
        self.assertLess(user.click_probability(item), base)

    def test_fatigue_decays_per_exposure(self):
        user = self.user()
        item = make_item(1, category=2)
        other = make_item(2, category=3)
        user.after_exposure(item)
        self.assertAlmostEqual(user.fatigue[2], self.params.fatigue_rate)
        user.after_exposure(other)
        self.assertAlmostEqual(user.fatigue[2], self.params.fatigue_rate * self.params.fatigue_decay)


class SimulationTests(SimpleTestCase):
    def setUp(self):
        self.config = tiny_config()

    def test_runs_are_deterministic(self):
        first = run_sessions(self.config, users=2)
        second = run_sessions(self.config, users=2)
        self.assertEqual([r.to_json() for r in first.records], [r.to_json() for r in second.records])
        other = run_sessions(self.config, users=2, seed=77)
        self.assertNotEqual([r.to_json() for r in first.records], [r.to_json() for r in other.records])

    def test_baseline_never_reorders(self):
        log, report = simulate(self.config, users=3)
        self.assertEqual(log.header['arm'], BASELINE_ARM)
        self.assertIsNone(log.header['model_version'])
        self.assertEqual(report.reorders, 0)
        self.assertTrue(all(r.payload['disabled'] for r in log.of_kind('rerank')))

    def test_metric_conservation(self):
        log, report = simulate(self.config, users=3)
        self.assertEqual(report.users, 3)
        self.assertEqual(report.pv, len(log.of_kind('expose')))
        self.assertEqual(report.clicks, len(log.of_kind('click')))
        self.assertEqual(report.ctr, report.clicks / report.pv)
        self.assertEqual(report.triggers, len(log.of_kind('trigger')))
        self.assertEqual(report.pages, len(log.of_kind('page')))
        self.assertEqual(len(report.ctr_by_position), self.config.page_size)
        self.assertEqual(len(log.of_kind('session_end')), 3)
        self.assertEqual(report.config_hash, self.config.config_hash())

    def test_model_arm(self):
        model = variant(FULL_VARIANT, self.config, seed=1)
        bundle = ModelBundle(model.manifest, model.params)
        log, report = simulate(self.config, users=2, bundle=bundle)
        self.assertEqual(report.arm, FULL_VARIANT)
        self.assertEqual(log.header['model_version'], 1)
        reranks = log.of_kind('rerank')
        self.assertTrue(reranks)
        self.assertTrue(all(r.payload['model_version'] == 1 for r in reranks))
        self.assertFalse(any(r.payload['disabled'] for r in reranks))

    def test_no_users_has_no_ctr(self):
        log = run_sessions(self.config, users=0)
        self.assertEqual(len(log), 1)
        with self.assertRaises(UndefinedMetricError):
            metrics_report(log, self.config.page_size)


class ReportOutputTests(SimpleTestCase):
    def report(self, arm, ctrs):
        return MetricsReport(arm=arm, users=1, pv=10, clicks=2, gmv=0.0, pages=2, triggers=4,
                             reorders=1, ctr_by_position=ctrs)

    def test_mean_ctr_skips_unseen_positions(self):
        report = self.report('a', [0.5, None, 0.1])
        self.assertAlmostEqual(report.mean_ctr(1, 3), 0.3)
        self.assertEqual(report.mean_ctr(4, 5), 0.0)
        self.assertEqual(report.triggers_per_page, 2.0)
        self.assertIn('undefined', report.to_text())

    def test_position_csv(self):
        reports = {'baseline': self.report('baseline', [0.5, None]),
                   FULL_VARIANT: self.report(FULL_VARIANT, [0.25, 0.125])}
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'ctr.csv')
            write_position_csv(reports, path)
            with open(path, newline='') as fh:
                rows = list(csv.reader(fh))
        self.assertEqual(rows[0], ['position', 'ctr_baseline', f'ctr_{FULL_VARIANT}'])
        self.assertEqual(rows[1], ['1', '0.500000', '0.250000'])
        self.assertEqual(rows[2], ['2', '', '0.125000'])

    def test_variant_table(self):
        text = variant_table([('DNN-rank', 0.61234), (FULL_VARIANT, None)])
        self.assertIn('DNN-rank', text)
        self.assertIn('0.61234', text)
        self.assertIn('n/a', text)

    def test_empty_log(self):
        with self.assertRaises(UndefinedMetricError):
            metrics_report(SessionLog())


class NullEffectTests(SimpleTestCase):
    def test_cloud_scores_carry_no_signal_for_indifferent_users(self):
        config = tiny_config(sim_affinity_weight=0.0, sim_click_boost=0.0, sim_fatigue_rate=0.0,
                             sim_base_logit=-1.0)
        report = metrics_report(run_sessions(config, users=200), config.page_size)
        self.assertGreater(report.clicks, 0)
        self.assertAlmostEqual(report.gauc, 0.5, delta=0.08)
