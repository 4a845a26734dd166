"""
Offline Trainer

Builds supervised samples from session logs and trains a model variant end to
end with mini-batch Adam.

Each sample is one rerank request: the user's behavior history logged before
the trigger, the trigger's candidate list in initial order, and one target per
candidate exposed before the next trigger (label 1 when that exposure was
clicked). Behavior sequences are encoded from the start of the session, and
attention sees only the newest ``max_length`` positions, matching what the
on-device context holds at that request.
"""

import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .bundle import BundleManifest, EdgeRecModel, ModelBundle, table_param
from .config import ITEM_TABLES
from .crban import FULL_VARIANT, CandidateList, encode_candidates, rerank, score_candidate, variant_spec
from .evalsim import gauc
from .exceptions import (
    BehaviorOrderError, ConfigError, FeatureEncodingError, NonFiniteError,
    TrainingDivergedError, UndefinedMetricError, UnknownItemError,
)
from .feature_codec import ItemAttributes, ResolvedItem, encode_exposure_action, encode_pageview_action
from .hubsm import BEHAVIOR_KINDS, IE, IPV, BehaviorRecord, append_behavior, snapshot
from .nn_core import DTYPE, Adam, bce_with_logits, check_finite
from .session_log import SessionLog, request_outcomes

logger = logging.getLogger(__name__)


# ----------------------------------------------------------------------
# Variants


def make_manifest(config, variant_name=FULL_VARIANT, version=1):
    variant_spec(variant_name)
    return BundleManifest(
        version=version,
        variant=variant_name,
        feature_config=config.feature_config(),
        dims=config.model_dims(),
        config_hash=config.config_hash(),
    )


def variant(name, config, version=1, seed=None):
    """
    Freshly initialized model of a named variant.

    Raises:
        UnknownVariantError: name is not one of the six variants
    """
    manifest = make_manifest(config, name, version)
    return EdgeRecModel.initialize(manifest, config.seed if seed is None else seed)


# ----------------------------------------------------------------------
# Samples


@dataclass
class UserHistory:
    """A session's finalized behaviors per kind, pre-encoded to feature arrays."""
    user: int
    session_start: int
    actions: dict
    indices: dict
    scores: dict
    timestamps: dict


@dataclass
class TrainingSample:
    history: UserHistory
    request_id: str
    ts: int
    lengths: dict
    candidate_ids: list
    cand_indices: np.ndarray
    cand_scores: np.ndarray
    target_pos: np.ndarray
    labels: np.ndarray

    @property
    def user(self):
        return self.history.user


@dataclass
class SampleSet:
    samples: list = field(default_factory=list)
    skipped: int = 0

    def __len__(self):
        return len(self.samples)

    @property
    def targets(self):
        return sum(len(s.labels) for s in self.samples)

    def sessions(self):
        """(session_start, user) keys in start order."""
        return sorted({(s.history.session_start, s.user) for s in self.samples})

    def split(self, fraction):
        """
        Hold out the last ``fraction`` of sessions by start time.

        Returns:
            tuple: (train SampleSet, validation SampleSet)
        """
        sessions = self.sessions()
        if len(sessions) < 2:
            return SampleSet(list(self.samples), self.skipped), SampleSet()
        held = max(1, int(round(fraction * len(sessions))))
        validation_keys = set(sessions[-held:])
        train, validation = SampleSet(skipped=self.skipped), SampleSet()
        for sample in self.samples:
            key = (sample.history.session_start, sample.user)
            (validation if key in validation_keys else train).samples.append(sample)
        return train, validation


def _item_arrays(items, score_count):
    indices = np.zeros((len(items), len(ITEM_TABLES)), dtype=int)
    scores = np.zeros((len(items), score_count), dtype=DTYPE)
    for row, attrs in enumerate(items):
        indices[row] = attrs.indices()
        scores[row] = attrs.scores
    return indices, scores


def _user_history(user, session_start, records, feature_cfg):
    encoders = {IE: encode_exposure_action, IPV: encode_pageview_action}
    widths = {IE: feature_cfg.ie_dim, IPV: feature_cfg.ipv_dim}
    history = UserHistory(user, session_start, {}, {}, {}, {})
    for kind in BEHAVIOR_KINDS:
        kind_records = [r for r in records if r.kind == kind]
        for rec in kind_records:
            feature_cfg.validate_item(rec.item)
        if kind_records:
            history.actions[kind] = np.stack([encoders[kind](r.action, feature_cfg) for r in kind_records])
        else:
            history.actions[kind] = np.zeros((0, widths[kind]), dtype=DTYPE)
        history.indices[kind], history.scores[kind] = _item_arrays(
            [r.item for r in kind_records], feature_cfg.score_count)
        history.timestamps[kind] = np.array([r.timestamp for r in kind_records], dtype=np.int64)
    return history


def build_samples(log, feature_cfg):
    """
    Turn a session log into training samples.

    Requests whose candidates cannot be resolved against the page that served
    them, or whose items fall outside the model's vocabularies, are skipped
    and counted.

    Returns:
        SampleSet
    """
    sample_set = SampleSet()
    for user, records in log.by_user().items():
        page = {}
        page_for = {}
        behaviors = []
        for record in records:
            if record.kind == 'page':
                page = {d['item_id']: ItemAttributes.from_dict(d) for d in record.payload['items']}
            elif record.kind == 'trigger':
                page_for[record.payload['request_id']] = page
            elif record.kind == 'behavior':
                behaviors.append(BehaviorRecord.from_dict(record.payload['record']))
        outcomes = request_outcomes(user, records)
        if not outcomes:
            continue
        try:
            history = _user_history(user, outcomes[0].session_start, behaviors, feature_cfg)
        except FeatureEncodingError as e:
            logger.warning(f"Skipping user {user}: {e}")
            sample_set.skipped += len(outcomes)
            continue
        for outcome in outcomes:
            if not outcome.exposed:
                continue
            served = page_for.get(outcome.request_id, {})
            try:
                items = [served[item_id] for item_id in outcome.candidates]
                for attrs in items:
                    feature_cfg.validate_item(attrs)
            except KeyError as e:
                logger.warning(f"Skipping {outcome.request_id}: candidate {e} not on its page")
                sample_set.skipped += 1
                continue
            except FeatureEncodingError as e:
                logger.warning(f"Skipping {outcome.request_id}: {e}")
                sample_set.skipped += 1
                continue
            lengths = {kind: sum(1 for b in outcome.behaviors if b['kind'] == kind)
                       for kind in BEHAVIOR_KINDS}
            cand_indices, cand_scores = _item_arrays(items, feature_cfg.score_count)
            sample_set.samples.append(TrainingSample(
                history=history,
                request_id=outcome.request_id,
                ts=outcome.trigger.ts,
                lengths=lengths,
                candidate_ids=list(outcome.candidates),
                cand_indices=cand_indices,
                cand_scores=cand_scores,
                target_pos=np.array([outcome.candidates.index(i) for i in outcome.exposed], dtype=int),
                labels=np.array(outcome.labels(), dtype=DTYPE),
            ))
    logger.info(
        f"Built {len(sample_set)} samples ({sample_set.targets} targets); "
        f"skipped {sample_set.skipped} requests"
    )
    return sample_set


def audit_leakage(sample_set):
    """
    Request ids whose behavior inputs include anything stamped at or after the
    trigger.

    Returns:
        list: offending request ids (empty for a clean sample set)
    """
    offending = []
    for sample in sample_set.samples:
        for kind in BEHAVIOR_KINDS:
            stamps = sample.history.timestamps[kind][:sample.lengths[kind]]
            if stamps.size and stamps.max() >= sample.ts:
                offending.append(sample.request_id)
                break
    return offending


# ----------------------------------------------------------------------
# Full-graph forward and backward


def _gather_items(params, indices, scores):
    rows = [params[table_param(t)][indices[..., j]] for j, t in enumerate(ITEM_TABLES)]
    return np.concatenate(rows + [scores], axis=-1)


def _scatter_items(grads, params, indices, d_x, mask):
    offset = 0
    for j, table in enumerate(ITEM_TABLES):
        name = table_param(table)
        width = params[name].shape[1]
        if name not in grads:
            grads[name] = np.zeros_like(params[name])
        np.add.at(grads[name], indices[..., j][mask], d_x[..., offset:offset + width][mask])
        offset += width


def _assemble(samples, model):
    B = len(samples)
    K = max(len(s.candidate_ids) for s in samples)
    S = model.feature_cfg.score_count
    batch = {
        'cand_idx': np.zeros((B, K, len(ITEM_TABLES)), dtype=int),
        'cand_scores': np.zeros((B, K, S), dtype=DTYPE),
        'cand_mask': np.zeros((B, K), dtype=bool),
        'req': np.concatenate([np.full(len(s.target_pos), b, dtype=int) for b, s in enumerate(samples)]),
        'pos': np.concatenate([s.target_pos for s in samples]),
        'labels': np.concatenate([s.labels for s in samples]),
        'sequences': {},
    }
    for b, s in enumerate(samples):
        k = len(s.candidate_ids)
        batch['cand_idx'][b, :k] = s.cand_indices
        batch['cand_scores'][b, :k] = s.cand_scores
        batch['cand_mask'][b, :k] = True
    widths = {IE: model.feature_cfg.ie_dim, IPV: model.feature_cfg.ipv_dim}
    for kind in model.spec.branches:
        T = max([1] + [s.lengths[kind] for s in samples])
        max_length = model.hubsm.max_lengths[kind]
        seq = {
            'A': np.zeros((B, T, widths[kind]), dtype=DTYPE),
            'idx': np.zeros((B, T, len(ITEM_TABLES)), dtype=int),
            'scores': np.zeros((B, T, S), dtype=DTYPE),
            'mask': np.zeros((B, T), dtype=bool),
            'window': np.zeros((B, T), dtype=bool),
        }
        for b, s in enumerate(samples):
            n = s.lengths[kind]
            seq['A'][b, :n] = s.history.actions[kind][:n]
            seq['idx'][b, :n] = s.history.indices[kind][:n]
            seq['scores'][b, :n] = s.history.scores[kind][:n]
            seq['mask'][b, :n] = True
            seq['window'][b, max(0, n - max_length):n] = True
        batch['sequences'][kind] = seq
    return batch


def forward_batch(model, samples):
    """
    Logits for every target of ``samples`` plus everything backward needs.

    Returns:
        tuple: (logits (N,), labels (N,), state)
    """
    batch = _assemble(samples, model)
    params = model.params
    behaviors = {}
    beh_caches = {}
    for kind, seq in batch['sequences'].items():
        P = _gather_items(params, seq['idx'], seq['scores'])
        keys, values, _, cache = model.hubsm.forward_batch(kind, seq['A'], P, seq['mask'])
        behaviors[kind] = (keys, values, seq['window'])
        beh_caches[kind] = cache
    cand_x = _gather_items(params, batch['cand_idx'], batch['cand_scores'])
    logits, _, crban_cache = model.crban.forward_batch(
        cand_x, batch['cand_mask'], batch['req'], batch['pos'], behaviors)
    check_finite('logits', logits)
    state = {'batch': batch, 'crban': crban_cache, 'hubsm': beh_caches}
    return logits, batch['labels'], state


def loss_and_grads(model, samples):
    """
    Mean clamped BCE over the batch's targets and its gradient for every parameter.

    Returns:
        tuple: (loss, probabilities (N,), {param name: gradient})
    """
    logits, labels, state = forward_batch(model, samples)
    loss, probs, d_logits = bce_with_logits(logits, labels)
    batch = state['batch']
    params = model.params
    d_cand_x, d_behaviors, grads = model.crban.backward_batch(state['crban'], d_logits)
    _scatter_items(grads, params, batch['cand_idx'], d_cand_x, batch['cand_mask'])
    for kind, (d_keys, d_values) in d_behaviors.items():
        _, dP, hubsm_grads = model.hubsm.backward_batch(kind, state['hubsm'][kind], d_keys, d_values)
        grads.update(hubsm_grads)
        seq = batch['sequences'][kind]
        _scatter_items(grads, params, seq['idx'], dP, seq['mask'])
    return loss, probs, grads


def _per_request(samples, probs):
    offset = 0
    out = []
    for s in samples:
        n = len(s.labels)
        out.append((s.labels, probs[offset:offset + n], n))
        offset += n
    return out


def _minibatches(samples, order, batch_size):
    batch = []
    targets = 0
    for index in order:
        batch.append(samples[index])
        targets += len(samples[index].labels)
        if targets >= batch_size:
            yield batch
            batch, targets = [], 0
    if batch:
        yield batch


# ----------------------------------------------------------------------
# Training loop


@dataclass
class EvaluationResult:
    loss: float
    gauc: float
    targets: int
    per_request: list = field(default_factory=list)


def evaluate(model, sample_set, batch_size=512):
    """Loss and GAUC of a model over a sample set (no parameter updates)."""
    if not sample_set.samples:
        raise UndefinedMetricError("Cannot evaluate on an empty sample set")
    total = 0.0
    per_request = []
    order = range(len(sample_set.samples))
    for batch in _minibatches(sample_set.samples, order, batch_size):
        logits, labels, _ = forward_batch(model, batch)
        loss, probs, _ = bce_with_logits(logits, labels)
        total += loss * len(labels)
        per_request.extend(_per_request(batch, probs))
    targets = sample_set.targets
    try:
        value = gauc(per_request)
    except UndefinedMetricError:
        value = None
    return EvaluationResult(total / targets, value, targets, per_request)


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_gauc: float
    validation_loss: float
    validation_gauc: float
    elapsed_s: float


@dataclass
class TrainingCurve:
    variant: str
    epochs: list = field(default_factory=list)
    first_batch_loss: float = None

    def append(self, stats):
        self.epochs.append(stats)

    def write_csv(self, path):
        with open(path, 'w', newline='') as fh:
            writer = csv.writer(fh)
            writer.writerow(['epoch', 'train_loss', 'train_gauc', 'validation_loss',
                             'validation_gauc', 'elapsed_s'])
            for e in self.epochs:
                writer.writerow([e.epoch, e.train_loss, _blank(e.train_gauc),
                                 _blank(e.validation_loss), _blank(e.validation_gauc),
                                 round(e.elapsed_s, 3)])


def _blank(value):
    return '' if value is None else value


@dataclass
class TrainingRun:
    bundle: ModelBundle
    curve: TrainingCurve
    best_epoch: int


def train(config, log, variant_name=FULL_VARIANT, version=1, validation_log=None, seed=None):
    """
    Train one variant on a session log.

    Args:
        config: EdgeRecConfig
        log: SessionLog or a prebuilt SampleSet
        variant_name: One of the six variant names
        version: Version id stamped into the resulting bundle
        validation_log: Held-out log; by default the last sessions of ``log``
        seed: Initialization and shuffling seed (defaults to SEED)

    Returns:
        TrainingRun: bundle with the best-epoch parameters

    Raises:
        TrainingDivergedError: a loss or gradient became non-finite
    """
    hyper = config.training_hyper()
    seed = hyper.seed if seed is None else seed
    model = variant(variant_name, config, version, seed)
    samples = build_samples(log, model.feature_cfg) if isinstance(log, SessionLog) else log
    if validation_log is not None:
        train_set, validation = samples, build_samples(validation_log, model.feature_cfg)
    else:
        train_set, validation = samples.split(hyper.validation_fraction)
    if not train_set.samples:
        raise ConfigError("The log holds no trainable requests")
    logger.info(
        f"Training {variant_name}: {len(train_set)} train / {len(validation)} validation requests"
    )

    optimizer = Adam(model.params, lr=hyper.learning_rate, beta1=hyper.beta1,
                     beta2=hyper.beta2, epsilon=hyper.epsilon)
    rng = np.random.default_rng([seed, 4])
    curve = TrainingCurve(variant_name)
    best_score, best_params, best_epoch = -np.inf, model.copy_params(), 0
    stale = 0
    for epoch in range(1, hyper.max_epochs + 1):
        started = time.perf_counter()
        order = rng.permutation(len(train_set.samples))
        total = 0.0
        per_request = []
        for batch in _minibatches(train_set.samples, order, hyper.batch_size):
            try:
                loss, probs, grads = loss_and_grads(model, batch)
                if not np.isfinite(loss):
                    raise NonFiniteError('loss')
                optimizer.step(grads)
            except NonFiniteError as e:
                raise TrainingDivergedError(
                    f"{variant_name} diverged in epoch {epoch}: {e}") from e
            if curve.first_batch_loss is None:
                curve.first_batch_loss = loss
            total += loss * sum(len(s.labels) for s in batch)
            per_request.extend(_per_request(batch, probs))
        train_loss = total / train_set.targets
        try:
            train_gauc = gauc(per_request)
        except UndefinedMetricError:
            train_gauc = None

        val = evaluate(model, validation) if validation.samples else None
        stats = EpochStats(
            epoch=epoch,
            train_loss=train_loss,
            train_gauc=train_gauc,
            validation_loss=val.loss if val else None,
            validation_gauc=val.gauc if val else None,
            elapsed_s=time.perf_counter() - started,
        )
        curve.append(stats)
        logger.info(
            f"{variant_name} epoch {epoch}: train loss {train_loss:.5f}, "
            f"validation GAUC {stats.validation_gauc}"
        )

        if val is not None:
            score = val.gauc if val.gauc is not None else -val.loss
        else:
            score = -train_loss
        if score > best_score:
            best_score, best_params, best_epoch = score, model.copy_params(), epoch
            stale = 0
        else:
            stale += 1
            if stale >= hyper.patience:
                logger.info(f"Early stop after epoch {epoch}; best epoch {best_epoch}")
                break

    bundle = ModelBundle(model.manifest, best_params)
    return TrainingRun(bundle, curve, best_epoch)


# ----------------------------------------------------------------------
# Serving-path replay and export


def replay_requests(log, model, users=None):
    """
    Walk logged sessions through the serving path.

    Behavior records are folded into a per-user context one at a time, and at
    every trigger with candidates a snapshot is taken.

    Yields:
        tuple: (trigger LogRecord, CandidateList, ContextSnapshot or None)
    """
    for user, records in log.by_user().items():
        if users is not None and user not in users:
            continue
        ctx = model.new_context()
        page = {}
        for record in records:
            if record.kind == 'page':
                page = {d['item_id']: ItemAttributes.from_dict(d) for d in record.payload['items']}
            elif record.kind == 'behavior' and ctx is not None:
                try:
                    append_behavior(ctx, BehaviorRecord.from_dict(record.payload['record']), model.hubsm)
                except BehaviorOrderError as e:
                    logger.warning(f"User {user}: dropping behavior during replay: {e}")
            elif record.kind == 'trigger' and record.payload['candidates']:
                cands = CandidateList([ResolvedItem(page[i]) for i in record.payload['candidates']])
                yield record, cands, snapshot(ctx) if ctx is not None else None


def replay_scores(log, bundle):
    """
    Score every logged request with a bundle's monolithic model.

    Returns:
        dict: request id -> {item id: score}
    """
    model = bundle.monolithic()
    return {
        trigger.payload['request_id']: {c.item_id: c.score for c in rerank(cands, snap, model)}
        for trigger, cands, snap in replay_requests(log, model)
    }


def replay_gauc(log, bundle):
    """GAUC of a bundle's replayed scores against the log's click labels."""
    scores = replay_scores(log, bundle)
    per_request = []
    for user, records in log.by_user().items():
        for outcome in request_outcomes(user, records):
            request_scores = scores.get(outcome.request_id)
            if request_scores is None or not outcome.exposed:
                continue
            per_request.append((
                outcome.labels(),
                [request_scores[i] for i in outcome.exposed],
                len(outcome.exposed),
            ))
    return gauc(per_request)


@dataclass
class AttentionTrace:
    """One candidate's attention over the behaviors visible at a request."""
    request_id: str
    candidate: ItemAttributes
    score: float
    # kind -> list of (weight, BehaviorRecord), in sequence order
    weights: dict


def explain_request(log, bundle, request_id, candidate=None):
    """
    Attention traces for the candidates of one logged request.

    Args:
        candidate: Item id to explain; every candidate when None

    Returns:
        list: AttentionTrace, one per explained candidate
    """
    model = bundle.monolithic()
    user = _request_user(log, request_id)
    for trigger, cands, snap in replay_requests(log, model, users={user}):
        if trigger.payload['request_id'] != request_id:
            continue
        if candidate is not None and candidate not in cands.item_ids:
            raise UnknownItemError(f"Item {candidate} is not a candidate of {request_id}")
        encoding = encode_candidates(cands, model)
        traces = []
        for t, item in enumerate(cands.items):
            if candidate is not None and item.item_id != candidate:
                continue
            scored = score_candidate(t, encoding, snap, model)
            weights = {}
            for kind in model.spec.branches:
                weights[kind] = list(zip(scored.weights(kind), snap[kind].records))
            traces.append(AttentionTrace(request_id, item.attrs, scored.score, weights))
        return traces
    raise UnknownItemError(f"Request {request_id} has no rerankable candidates in the log")


def _request_user(log, request_id):
    for record in log.of_kind('trigger'):
        if record.payload['request_id'] == request_id:
            return record.user
    raise UnknownItemError(f"Request {request_id} not found in the log")


def split_and_export(bundle, store, runtime=None):
    """
    Publish the embedding tables to the store and return the device download.

    When a runtime is given the new device model is installed on it, which
    resets every open behavior context.

    Returns:
        DeviceModel
    """
    store.publish_version(bundle)
    device_model = store.device_model(bundle.version)
    if runtime is not None:
        runtime.install_model(device_model)
    logger.info(
        f"Exported v{bundle.version}: device part {device_model.payload_bytes()} bytes, "
        f"tables {sorted(bundle.embedding_tables())}"
    )
    return device_model
