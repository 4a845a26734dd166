import os
import tempfile

import numpy as np
import numpy.testing as npt
from django.test import SimpleTestCase

from reranker.bundle import ModelBundle
from reranker.exceptions import BehaviorOrderError, EmbeddingLookupError
from reranker.hubsm import (
    IE, IPV, BehaviorContext, BehaviorRecord, append_behavior, encode_batch,
    load_context, save_context, snapshot,
)
from reranker.trainer import variant

from .helpers import exposure, make_item, page_view, random_stream, tiny_config


class IncrementalEncodingTests(SimpleTestCase):
    def setUp(self):
        self.config = tiny_config()
        self.model = variant('CRBAN+HUBSM(IE&IPV)', self.config, seed=11)
        self.encoder = self.model.hubsm

    def test_fold_equals_batch_on_random_streams(self):
        rng = np.random.default_rng(0)
        big = tiny_config(max_ie_length=64, max_ipv_length=64)
        encoder = variant('CRBAN+HUBSM(IE&IPV)', big, seed=3).hubsm
        for _ in range(200):
            records = random_stream(rng, int(rng.integers(0, 25)))
            ctx = BehaviorContext(encoder)
            for rec in records:
                append_behavior(ctx, rec, encoder)
            folded, batched = snapshot(ctx), snapshot(encode_batch(records, encoder))
            for kind in (IE, IPV):
                self.assertEqual(folded.valid_length(kind), batched.valid_length(kind))
                npt.assert_allclose(folded[kind].keys, batched[kind].keys, rtol=0, atol=1e-9)
                npt.assert_allclose(folded[kind].values, batched[kind].values, rtol=0, atol=1e-9)
                for a, b in zip(folded[kind].states, batched[kind].states):
                    npt.assert_allclose(a, b, rtol=0, atol=1e-9)

    def test_append_cost_independent_of_history_length(self):
        ctx = BehaviorContext(self.encoder)
        costs = []
        records = random_stream(np.random.default_rng(4), 120)
        for rec in records:
            before = self.encoder.step_count
            append_behavior(ctx, rec, self.encoder)
            costs.append(self.encoder.step_count - before)
        # two stacks of gru_layers each, whatever the history length
        self.assertEqual(set(costs), {2 * self.config.gru_layers})

    def test_window_keeps_newest_encodings_while_state_carries_history(self):
        items = [make_item(i, category=i % 6) for i in range(10)]
        records = [exposure(item, 100 * (i + 1)) for i, item in enumerate(items)]
        ctx = BehaviorContext(self.encoder)
        for rec in records:
            append_behavior(ctx, rec, self.encoder)
        self.assertEqual(ctx.valid_length(IE), self.config.max_ie_length)
        self.assertEqual(ctx.windows[IE].appended, 10)
        full = encode_batch(records, self.encoder)
        npt.assert_allclose(snapshot(ctx)[IE].keys, snapshot(full)[IE].keys, atol=1e-12)
        self.assertEqual([r.item.item_id for r in snapshot(ctx)[IE].records], [6, 7, 8, 9])

    def test_hubsm_key_is_the_item_half_of_the_value(self):
        ctx = BehaviorContext(self.encoder)
        append_behavior(ctx, exposure(make_item(1, category=2), 10), self.encoder)
        snap = snapshot(ctx)
        H = self.encoder.hidden
        self.assertEqual(snap[IE].values.shape, (1, 2 * H))
        npt.assert_array_equal(snap[IE].values[0, H:], snap[IE].keys[0])

    def test_joint_encoding_is_key_and_value(self):
        encoder = variant('CRBAN+HUISM(IE&IPV)', self.config, seed=2).hubsm
        ctx = BehaviorContext(encoder)
        append_behavior(ctx, exposure(make_item(1), 10), encoder)
        snap = snapshot(ctx)
        npt.assert_array_equal(snap[IE].keys, snap[IE].values)

    def test_action_features_change_value_not_key(self):
        item = make_item(3, category=1)
        a, b = BehaviorContext(self.encoder), BehaviorContext(self.encoder)
        append_behavior(a, exposure(item, 10, dwell=100), self.encoder)
        append_behavior(b, exposure(item, 10, dwell=50000, delete_reason='not_interested'), self.encoder)
        npt.assert_array_equal(snapshot(a)[IE].keys, snapshot(b)[IE].keys)
        self.assertFalse(np.array_equal(snapshot(a)[IE].values, snapshot(b)[IE].values))

    def test_single_branch_variant_skips_other_kind(self):
        encoder = variant('CRBAN+HUBSM(IE)', self.config, seed=2).hubsm
        ctx = BehaviorContext(encoder)
        item = make_item(5)
        append_behavior(ctx, exposure(item, 10), encoder)
        append_behavior(ctx, page_view(item, 20, cart=True), encoder)
        self.assertEqual(ctx.valid_length(IE), 1)
        self.assertEqual(ctx.valid_length(IPV), 0)


class ContextRuleTests(SimpleTestCase):
    def setUp(self):
        self.encoder = variant('CRBAN+HUBSM(IE&IPV)', tiny_config(), seed=1).hubsm

    def test_page_view_requires_prior_exposure(self):
        ctx = BehaviorContext(self.encoder)
        with self.assertRaises(BehaviorOrderError):
            append_behavior(ctx, page_view(make_item(4), 10), self.encoder)

    def test_out_of_order_rejected(self):
        ctx = BehaviorContext(self.encoder)
        append_behavior(ctx, exposure(make_item(1), 50), self.encoder)
        with self.assertRaises(BehaviorOrderError):
            append_behavior(ctx, exposure(make_item(2), 40), self.encoder)

    def test_equal_timestamps_allowed(self):
        ctx = BehaviorContext(self.encoder)
        item = make_item(1)
        append_behavior(ctx, exposure(item, 50), self.encoder)
        append_behavior(ctx, page_view(item, 50), self.encoder)
        self.assertEqual(ctx.valid_length(IPV), 1)

    def test_batch_rejects_unordered_records(self):
        with self.assertRaises(BehaviorOrderError):
            encode_batch([exposure(make_item(1), 50), exposure(make_item(2), 10)], self.encoder)

    def test_rows_required_without_tables(self):
        bundle_model = variant('CRBAN+HUBSM(IE&IPV)', tiny_config(), seed=1)
        device = ModelBundle(bundle_model.manifest, bundle_model.params).device_model()
        ctx = device.new_context()
        with self.assertRaises(EmbeddingLookupError):
            append_behavior(ctx, exposure(make_item(1), 10), device.hubsm)


class SnapshotTests(SimpleTestCase):
    def setUp(self):
        self.encoder = variant('CRBAN+HUBSM(IE&IPV)', tiny_config(), seed=1).hubsm
        self.ctx = BehaviorContext(self.encoder)
        for rec in random_stream(np.random.default_rng(2), 6):
            append_behavior(self.ctx, rec, self.encoder)

    def test_later_appends_do_not_touch_a_snapshot(self):
        before = snapshot(self.ctx)
        copy = snapshot(self.ctx)
        append_behavior(self.ctx, exposure(make_item(77), 10 ** 9), self.encoder)
        self.assertEqual(before, copy)
        self.assertNotEqual(before, snapshot(self.ctx))

    def test_snapshot_is_read_only(self):
        snap = snapshot(self.ctx)
        with self.assertRaises(ValueError):
            snap[IE].keys[0, 0] = 1.0

    def test_empty_context_snapshot(self):
        snap = snapshot(BehaviorContext(self.encoder))
        self.assertEqual(snap[IE].keys.shape, (0, self.encoder.hidden))
        self.assertEqual(snap[IPV].values.shape, (0, self.encoder.value_dim()))


class PersistenceTests(SimpleTestCase):
    def test_saved_context_resumes_identically(self):
        encoder = variant('CRBAN+HUBSM(IE&IPV)', tiny_config(), seed=6).hubsm
        records = random_stream(np.random.default_rng(9), 12)
        ctx = BehaviorContext(encoder)
        for rec in records[:8]:
            append_behavior(ctx, rec, encoder)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'context.json')
            save_context(ctx, path)
            restored = load_context(path, encoder)
        self.assertEqual(snapshot(ctx), snapshot(restored))
        for rec in records[8:]:
            append_behavior(ctx, rec, encoder)
            append_behavior(restored, rec, encoder)
        self.assertEqual(snapshot(ctx), snapshot(restored))

    def test_record_dict_round_trip_keeps_rows(self):
        rec = exposure(make_item(2), 10)
        rec = BehaviorRecord(rec.kind, rec.timestamp, rec.item, rec.action, {'category': np.array([0.25, -1.0])})
        back = BehaviorRecord.from_dict(rec.to_dict())
        npt.assert_array_equal(back.embeddings['category'], [0.25, -1.0])
        self.assertIsNone(back.without_embeddings().embeddings)
