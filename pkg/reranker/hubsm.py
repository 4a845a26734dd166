"""
Heterogeneous User Behavior Sequence Modeling

Keeps a user's item-exposure (IE) and item-page-view (IPV) behavior sequences
encoded on device. Action features and item features run through separate GRU
stacks and are fused by concatenation; IE and IPV never share an encoder.

Encoding is incremental: each new behavior costs one GRU step per layer per
stack. Only the newest ``max_length`` encodings are kept per sequence while the
recurrent state keeps carrying older history.
"""

import json
import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .exceptions import BehaviorOrderError, DimensionMismatchError, EmbeddingLookupError
from .feature_codec import (
    ExposureAction, ItemAttributes, PageViewAction, ResolvedItem,
    encode_exposure_action, encode_item, encode_pageview_action, encode_resolved_item,
)
from .nn_core import DTYPE, GruStack, tensor_from_record, tensor_to_record

logger = logging.getLogger(__name__)

IE = 'IE'
IPV = 'IPV'
BEHAVIOR_KINDS = (IE, IPV)


@dataclass(frozen=True)
class BehaviorRecord:
    kind: str
    timestamp: int
    item: ItemAttributes
    action: object
    # Rows shipped with the item's page; None when encoding against full tables.
    embeddings: dict = None

    def to_dict(self):
        data = {
            'kind': self.kind,
            'timestamp': self.timestamp,
            'item': self.item.to_dict(),
            'action': self.action.to_dict(),
        }
        if self.embeddings is not None:
            data['embeddings'] = {k: [float(v) for v in row] for k, row in self.embeddings.items()}
        return data

    @classmethod
    def from_dict(cls, data):
        action_cls = ExposureAction if data['kind'] == IE else PageViewAction
        embeddings = data.get('embeddings')
        if embeddings is not None:
            embeddings = {k: np.asarray(v, dtype=DTYPE) for k, v in embeddings.items()}
        return cls(
            kind=data['kind'],
            timestamp=int(data['timestamp']),
            item=ItemAttributes.from_dict(data['item']),
            action=action_cls.from_dict(data['action']),
            embeddings=embeddings,
        )

    def without_embeddings(self):
        return BehaviorRecord(self.kind, self.timestamp, self.item, self.action, None)


class HubsmEncoder:
    """
    The behavior-encoding half of a model: GRU stacks per sequence kind.

    ``mode='hubsm'`` encodes actions and items separately (key = item encoding,
    value = concat(action encoding, item encoding)); ``mode='huism'`` runs one
    GRU over concat(action, item) and uses that joint encoding as both key and
    value.
    """

    def __init__(self, params, feature_cfg, branches=BEHAVIOR_KINDS, mode='hubsm',
                 tables=None, max_lengths=None):
        self.feature_cfg = feature_cfg
        self.branches = tuple(branches)
        self.mode = mode
        self.tables = tables
        self.max_lengths = max_lengths or {IE: 64, IPV: 32}
        self.stacks = {}
        for kind in self.branches:
            prefix = f'hubsm.{kind.lower()}'
            if mode == 'hubsm':
                self.stacks[kind] = {
                    'action': GruStack.from_params(params, f'{prefix}_action'),
                    'item': GruStack.from_params(params, f'{prefix}_item'),
                }
            else:
                self.stacks[kind] = {'joint': GruStack.from_params(params, f'{prefix}_joint')}

    @staticmethod
    def init_params(rng, feature_cfg, dims, branches, mode):
        params = {}
        action_dims = {IE: feature_cfg.ie_dim, IPV: feature_cfg.ipv_dim}
        for kind in branches:
            prefix = f'hubsm.{kind.lower()}'
            if mode == 'hubsm':
                params.update(GruStack.init_params(
                    rng, f'{prefix}_action', action_dims[kind], dims.gru_hidden,
                    dims.gru_layers, dims.init_scale))
                params.update(GruStack.init_params(
                    rng, f'{prefix}_item', feature_cfg.item_dim, dims.gru_hidden,
                    dims.gru_layers, dims.init_scale))
            else:
                params.update(GruStack.init_params(
                    rng, f'{prefix}_joint', action_dims[kind] + feature_cfg.item_dim,
                    dims.gru_hidden, dims.gru_layers, dims.init_scale))
        return params

    @property
    def hidden(self):
        for stacks in self.stacks.values():
            return next(iter(stacks.values())).hidden
        return 0

    def value_dim(self):
        return 2 * self.hidden if self.mode == 'hubsm' else self.hidden

    @property
    def step_count(self):
        return sum(s.step_count for stacks in self.stacks.values() for s in stacks.values())

    # ------------------------------------------------------------------
    # Feature vectors

    def action_vector(self, record):
        if record.kind == IE:
            return encode_exposure_action(record.action, self.feature_cfg)
        return encode_pageview_action(record.action, self.feature_cfg)

    def item_vector(self, record):
        if self.tables is not None:
            return encode_item(record.item, self.tables)
        if record.embeddings is None:
            raise EmbeddingLookupError(
                f"Behavior item {record.item.item_id} has no embedding rows and no tables are loaded"
            )
        return encode_resolved_item(ResolvedItem(record.item, record.embeddings))

    # ------------------------------------------------------------------
    # Incremental path

    def zero_states(self, kind):
        return {name: stack.zero_state() for name, stack in self.stacks[kind].items()}

    def encode_step(self, kind, action_vec, item_vec, states):
        stacks = self.stacks[kind]
        if self.mode == 'hubsm':
            a_hat, action_state = stacks['action'].step(action_vec, states['action'])
            p_hat, item_state = stacks['item'].step(item_vec, states['item'])
            return p_hat, np.concatenate([a_hat, p_hat]), {'action': action_state, 'item': item_state}
        joint, joint_state = stacks['joint'].step(np.concatenate([action_vec, item_vec]), states['joint'])
        return joint, joint, {'joint': joint_state}

    # ------------------------------------------------------------------
    # Batched path (training and batch evaluation)

    def forward_batch(self, kind, A, P, mask):
        """
        Encode padded behavior sequences.

        Args:
            kind: IE or IPV
            A: (B, T, Da) action vectors; P: (B, T, Dp) item vectors; mask: (B, T)

        Returns:
            tuple: (keys (B, T, H), values (B, T, Dv), finals, cache)
        """
        stacks = self.stacks[kind]
        if self.mode == 'hubsm':
            a_hat, a_final, a_cache = stacks['action'].forward(A, mask)
            p_hat, p_final, p_cache = stacks['item'].forward(P, mask)
            values = np.concatenate([a_hat, p_hat], axis=2)
            finals = {'action': a_final, 'item': p_final}
            return p_hat, values, finals, {'action': a_cache, 'item': p_cache}
        joint, j_final, j_cache = stacks['joint'].forward(np.concatenate([A, P], axis=2), mask)
        return joint, joint, {'joint': j_final}, {'joint': j_cache}

    def backward_batch(self, kind, cache, d_keys, d_values):
        """Returns (dA, dP, named parameter gradients)."""
        stacks = self.stacks[kind]
        prefix = f'hubsm.{kind.lower()}'
        if self.mode == 'hubsm':
            H = self.hidden
            d_a_hat = d_values[:, :, :H]
            d_p_hat = d_values[:, :, H:] + d_keys
            dA, a_grads, _ = stacks['action'].backward(cache['action'], d_a_hat)
            dP, p_grads, _ = stacks['item'].backward(cache['item'], d_p_hat)
            grads = GruStack.named_grads(f'{prefix}_action', a_grads)
            grads.update(GruStack.named_grads(f'{prefix}_item', p_grads))
            return dA, dP, grads
        d_joint = d_keys + d_values
        dJ, j_grads, _ = stacks['joint'].backward(cache['joint'], d_joint)
        Da = dJ.shape[2] - self.feature_cfg.item_dim
        return dJ[:, :, :Da], dJ[:, :, Da:], GruStack.named_grads(f'{prefix}_joint', j_grads)


@dataclass
class SequenceWindow:
    max_length: int
    keys: deque = None
    values: deque = None
    records: deque = None
    states: dict = field(default_factory=dict)
    appended: int = 0

    def __post_init__(self):
        self.keys = deque(maxlen=self.max_length)
        self.values = deque(maxlen=self.max_length)
        self.records = deque(maxlen=self.max_length)

    @property
    def valid_length(self):
        return len(self.keys)


class BehaviorContext:
    """
    Live, mutable behavior context for one user (single writer).

    Readers take a ``snapshot()``; later appends never affect a snapshot.
    """

    def __init__(self, encoder):
        self.encoder = encoder
        self.windows = {}
        for kind in BEHAVIOR_KINDS:
            window = SequenceWindow(max_length=encoder.max_lengths[kind])
            if kind in encoder.branches:
                window.states = encoder.zero_states(kind)
            self.windows[kind] = window
        self.exposed_items = set()
        self.last_timestamp = None

    def valid_length(self, kind):
        return self.windows[kind].valid_length

    def validate(self, record):
        if record.kind not in BEHAVIOR_KINDS:
            raise BehaviorOrderError(f"Unknown behavior kind {record.kind!r}")
        if self.last_timestamp is not None and record.timestamp < self.last_timestamp:
            raise BehaviorOrderError(
                f"Behavior at ts={record.timestamp} arrived after ts={self.last_timestamp}"
            )
        if record.kind == IPV and record.item.item_id not in self.exposed_items:
            raise BehaviorOrderError(
                f"Page view of item {record.item.item_id} without a prior exposure"
            )


def append_behavior(ctx, rec, model):
    """
    Fold one finalized behavior into the context in O(1).

    Args:
        ctx: BehaviorContext (mutated and returned)
        rec: BehaviorRecord
        model: HubsmEncoder the context was created with

    Returns:
        BehaviorContext
    """
    ctx.validate(rec)
    if model is not ctx.encoder and model.hidden != ctx.encoder.hidden:
        raise DimensionMismatchError("Context and model disagree on hidden size")
    ctx.last_timestamp = rec.timestamp
    if rec.kind == IE:
        ctx.exposed_items.add(rec.item.item_id)
    if rec.kind not in model.branches:
        return ctx
    window = ctx.windows[rec.kind]
    key, value, window.states = model.encode_step(
        rec.kind, model.action_vector(rec), model.item_vector(rec), window.states
    )
    window.keys.append(key)
    window.values.append(value)
    window.records.append(rec)
    window.appended += 1
    return ctx


def encode_batch(records, model):
    """
    Encode a time-ordered record list in one pass per stack.

    Equivalent to folding append_behavior from an empty context.
    """
    records = list(records)
    for prev, cur in zip(records, records[1:]):
        if cur.timestamp < prev.timestamp:
            raise BehaviorOrderError(
                f"Records out of order: ts={cur.timestamp} after ts={prev.timestamp}"
            )
    ctx = BehaviorContext(model)
    for rec in records:
        ctx.validate(rec)
        ctx.last_timestamp = rec.timestamp
        if rec.kind == IE:
            ctx.exposed_items.add(rec.item.item_id)
    for kind in model.branches:
        kind_records = [r for r in records if r.kind == kind]
        if not kind_records:
            continue
        A = np.stack([model.action_vector(r) for r in kind_records])[None]
        P = np.stack([model.item_vector(r) for r in kind_records])[None]
        keys, values, finals, _ = model.forward_batch(kind, A, P, np.ones((1, len(kind_records))))
        window = ctx.windows[kind]
        for t in range(len(kind_records)):
            window.keys.append(keys[0, t])
            window.values.append(values[0, t])
            window.records.append(kind_records[t])
        window.states = {name: [h[0] for h in layer_states] for name, layer_states in finals.items()}
        window.appended = len(kind_records)
    return ctx


@dataclass(frozen=True)
class SequenceSnapshot:
    keys: np.ndarray
    values: np.ndarray
    records: tuple
    states: tuple

    @property
    def valid_length(self):
        return self.keys.shape[0]

    def __eq__(self, other):
        if not isinstance(other, SequenceSnapshot):
            return NotImplemented
        return (np.array_equal(self.keys, other.keys)
                and np.array_equal(self.values, other.values)
                and self.records == other.records
                and len(self.states) == len(other.states)
                and all(np.array_equal(a, b) for a, b in zip(self.states, other.states)))


@dataclass(frozen=True)
class ContextSnapshot:
    sequences: dict

    def __getitem__(self, kind):
        return self.sequences[kind]

    def valid_length(self, kind):
        return self.sequences[kind].valid_length

    def __eq__(self, other):
        if not isinstance(other, ContextSnapshot):
            return NotImplemented
        return all(self.sequences[k] == other.sequences[k] for k in BEHAVIOR_KINDS)


def _frozen(arr):
    arr = np.array(arr, dtype=DTYPE, copy=True)
    arr.setflags(write=False)
    return arr


def snapshot(ctx):
    """Deep, read-only copy of the context for one rerank request."""
    hidden = ctx.encoder.hidden
    value_dim = ctx.encoder.value_dim()
    sequences = {}
    for kind in BEHAVIOR_KINDS:
        window = ctx.windows[kind]
        if window.valid_length:
            keys = _frozen(np.stack(window.keys))
            values = _frozen(np.stack(window.values))
        else:
            keys = _frozen(np.zeros((0, hidden)))
            values = _frozen(np.zeros((0, value_dim)))
        states = tuple(_frozen(h) for name in sorted(window.states) for h in window.states[name])
        sequences[kind] = SequenceSnapshot(keys, values, tuple(window.records), states)
    return ContextSnapshot(sequences)


# ----------------------------------------------------------------------
# On-device persistence


def save_context(ctx, path):
    """Write the context (states, encoding windows, records) to a JSON file."""
    payload = {'last_timestamp': ctx.last_timestamp, 'exposed_items': sorted(ctx.exposed_items),
               'sequences': {}}
    for kind, window in ctx.windows.items():
        payload['sequences'][kind] = {
            'appended': window.appended,
            'keys': [tensor_to_record(f'{kind}.key.{i}', k) for i, k in enumerate(window.keys)],
            'values': [tensor_to_record(f'{kind}.value.{i}', v) for i, v in enumerate(window.values)],
            'records': [r.to_dict() for r in window.records],
            'states': {
                name: [tensor_to_record(f'{kind}.{name}.l{i}', h) for i, h in enumerate(layers)]
                for name, layers in window.states.items()
            },
        }
    with open(path, 'w') as fh:
        json.dump(payload, fh)
    logger.info(f"Saved behavior context to {path}")


def load_context(path, encoder):
    with open(path) as fh:
        payload = json.load(fh)
    ctx = BehaviorContext(encoder)
    ctx.last_timestamp = payload['last_timestamp']
    ctx.exposed_items = set(payload['exposed_items'])
    for kind, data in payload['sequences'].items():
        window = ctx.windows[kind]
        window.appended = data['appended']
        for rec in data['keys']:
            window.keys.append(tensor_from_record(rec)[1])
        for rec in data['values']:
            window.values.append(tensor_from_record(rec)[1])
        for rec in data['records']:
            window.records.append(BehaviorRecord.from_dict(rec))
        if data['states']:
            window.states = {
                name: [tensor_from_record(r)[1] for r in layers]
                for name, layers in data['states'].items()
            }
    return ctx
