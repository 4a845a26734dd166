"""
End-to-end runs of the simulator at default settings.

The variant-ordering and end-of-page CTR runs train several models on
2,000-user logs for five seeds; they take tens of minutes and only run when
EDGEREC_ACCEPTANCE is set.
"""

import os
import unittest

import numpy as np
from django.test import SimpleTestCase

from reranker.bundle import ModelBundle
from reranker.cloud_service import Catalog, CloudRecommender, EmbeddingStore
from reranker.config import EdgeRecConfig
from reranker.crban import FULL_VARIANT
from reranker.edge_runtime import EdgeRuntime
from reranker.evalsim import SESSION_SPACING_MS, SyntheticUser, metrics_report, run_sessions, simulate_session
from reranker.session_log import SessionLog
from reranker.trainer import train, variant

from .helpers import tiny_config

SEEDS = (7, 8, 9, 10, 11)

slow = unittest.skipUnless(os.environ.get('EDGEREC_ACCEPTANCE'), 'set EDGEREC_ACCEPTANCE=1 for full runs')


class CheckedRuntime(EdgeRuntime):
    """Counts ingested events and checks every applied rerank against the display list."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.events = 0
        self.reranks = 0
        self.violations = []

    def ingest_event(self, user, event):
        self.events += 1
        return super().ingest_event(user, event)

    def apply_rerank(self, prepared, order):
        cache = self.session(prepared.user).cache
        before = cache.display_list()
        exposed = cache.page_exposed
        result = super().apply_rerank(prepared, order)
        after = cache.display_list()
        request_id = prepared.trigger.request_id
        if after[:exposed] != before[:exposed]:
            self.violations.append(f"{request_id}: exposed prefix moved")
        if sorted(after[exposed:]) != sorted(before[exposed:]):
            self.violations.append(f"{request_id}: unexposed suffix is not a permutation")
        if not result.noop and after[exposed:] != result.item_order:
            self.violations.append(f"{request_id}: display differs from the served order")
        self.reranks += 1
        return result


class RerankFrequencyTests(SimpleTestCase):
    users = 16

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.config = EdgeRecConfig()
        model = variant(FULL_VARIANT, cls.config, seed=2)
        cls.bundle = ModelBundle(model.manifest, model.params)

    def test_reranks_per_page_with_defaults(self):
        report = metrics_report(run_sessions(self.config, users=self.users, bundle=self.bundle),
                                self.config.page_size)
        self.assertEqual(report.pages, 2 * self.users)
        self.assertGreaterEqual(report.reorders_per_page, 3.0)
        self.assertLessEqual(report.reorders_per_page, 8.0)
        self.assertLessEqual(report.triggers_per_page, 8.0)

    def test_triggers_per_page_without_a_model(self):
        report = metrics_report(run_sessions(self.config, users=self.users), self.config.page_size)
        self.assertEqual(report.reorders, 0)
        self.assertGreaterEqual(report.triggers_per_page, 3.0)
        self.assertLessEqual(report.triggers_per_page, 8.0)


class EventFuzzTests(SimpleTestCase):
    def test_rerank_invariants_over_ten_thousand_events(self):
        config = tiny_config()
        params = config.simulator_params()
        model = variant(FULL_VARIANT, config, seed=6)
        store = EmbeddingStore(config.retained_versions)
        bundle = ModelBundle(model.manifest, model.params)
        store.publish_version(bundle)
        cloud = CloudRecommender(Catalog.generate(config), store, config)
        log = SessionLog()
        runtime = CheckedRuntime(cloud, config, log, store.device_model(bundle.version))
        uid = 0
        while runtime.events < 10_000:
            user = SyntheticUser.create(uid, params, config.catalog_categories, config.seed)
            cloud.register_user(uid, user.category_affinity)
            simulate_session(runtime, user, uid * SESSION_SPACING_MS, params.pages, config.page_size)
            uid += 1

        self.assertEqual(runtime.violations, [])
        self.assertGreater(runtime.reranks, 100)
        candidates = {r.payload['request_id']: r.payload['candidates'] for r in log.of_kind('trigger')}
        reranks = log.of_kind('rerank')
        self.assertEqual(len(reranks), runtime.reranks - sum(
            1 for ids in candidates.values() if not ids))
        for record in reranks:
            order = [entry['item_id'] for entry in record.payload['order']]
            self.assertEqual(len(order), len(set(order)))
            self.assertEqual(sorted(order), sorted(candidates[record.payload['request_id']]))
        for user, records in log.by_user().items():
            stamps = [r.ts for r in records if r.kind == 'behavior']
            self.assertEqual(stamps, sorted(stamps), user)


@slow
class VariantOrderingTests(SimpleTestCase):
    def test_validation_gauc_ordering(self):
        compared = ('DNN-rank', 'DLCM', 'CRBAN+HUISM(IE&IPV)', FULL_VARIANT)
        results = {name: [] for name in compared}
        for seed in SEEDS:
            config = EdgeRecConfig(seed=seed)
            log = run_sessions(config)
            for name in compared:
                run = train(config, log, variant_name=name)
                results[name].append(run.curve.epochs[run.best_epoch - 1].validation_gauc)
        for n in range(len(SEEDS)):
            self.assertLess(results['DNN-rank'][n], results['DLCM'][n])
            self.assertLess(results['DLCM'][n], results[FULL_VARIANT][n])
        self.assertGreaterEqual(np.mean(results[FULL_VARIANT]), np.mean(results['CRBAN+HUISM(IE&IPV)']))


@slow
class EndOfPageUpliftTests(SimpleTestCase):
    def test_trained_model_lifts_ctr_late_in_the_page(self):
        late, early = [], []
        for seed in SEEDS:
            config = EdgeRecConfig(seed=seed)
            run = train(config, run_sessions(config))
            held_out = seed + 100
            baseline = metrics_report(run_sessions(config, seed=held_out), config.page_size)
            served = metrics_report(run_sessions(config, seed=held_out, bundle=run.bundle), config.page_size)
            late.append(served.mean_ctr(40, 50) - baseline.mean_ctr(40, 50))
            early.append(served.mean_ctr(1, 5) - baseline.mean_ctr(1, 5))
        self.assertGreater(np.mean(late), 0.0)
        self.assertLess(abs(np.mean(early)), np.mean(late))
