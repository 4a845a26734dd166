"""
Context-aware Reranking with Behavior Attention Networks

Scores every unexposed candidate of a cached page from:

- the candidate's own encoding from a GRU run over the candidate list in its
  initial (cloud) order, whose final state is the local ranking context
- attention over the user's IE and IPV behavior encodings, queried by the
  candidate encoding, keyed by behavior item encodings and valued by the fused
  action+item encodings

Also holds the variant table that switches these pieces on and off for the
baseline models.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .exceptions import DimensionMismatchError, EmptyCandidatesError, UnknownVariantError
from .hubsm import IE, IPV
from .nn_core import DTYPE, AdditiveAttention, GruStack, Mlp, sigmoid

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class VariantSpec:
    name: str
    candidate_gru: bool
    branches: tuple
    behavior_mode: str = None

    @property
    def uses_behaviors(self):
        return bool(self.branches)


VARIANTS = {
    'DNN-rank': VariantSpec('DNN-rank', candidate_gru=False, branches=()),
    'DLCM': VariantSpec('DLCM', candidate_gru=True, branches=()),
    'CRBAN+HUBSM(IE)': VariantSpec('CRBAN+HUBSM(IE)', True, (IE,), 'hubsm'),
    'CRBAN+HUBSM(IPV)': VariantSpec('CRBAN+HUBSM(IPV)', True, (IPV,), 'hubsm'),
    'CRBAN+HUISM(IE&IPV)': VariantSpec('CRBAN+HUISM(IE&IPV)', True, (IE, IPV), 'huism'),
    'CRBAN+HUBSM(IE&IPV)': VariantSpec('CRBAN+HUBSM(IE&IPV)', True, (IE, IPV), 'hubsm'),
}

FULL_VARIANT = 'CRBAN+HUBSM(IE&IPV)'


def variant_spec(name):
    spec = VARIANTS.get(name)
    if spec is None:
        raise UnknownVariantError(
            f"Unknown variant {name!r}; valid variants: {', '.join(VARIANTS)}"
        )
    return spec


@dataclass(frozen=True)
class CandidateList:
    """Candidates in initial cloud-rank order; each is a ResolvedItem."""
    items: tuple

    def __post_init__(self):
        object.__setattr__(self, 'items', tuple(self.items))

    def __len__(self):
        return len(self.items)

    @property
    def item_ids(self):
        return [item.item_id for item in self.items]


@dataclass(frozen=True)
class ScoredCandidate:
    item_id: int
    score: float
    initial_rank: int
    ie_weights: tuple = ()
    ipv_weights: tuple = ()

    def weights(self, kind):
        return self.ie_weights if kind == IE else self.ipv_weights


@dataclass
class CandidateEncoding:
    """Output of encode_candidates: raw vectors, their encodings and s_CND."""
    item_ids: list
    X: np.ndarray
    P_hat: np.ndarray
    s: np.ndarray


class CrbanScorer:
    """
    The reranking half of a model.

    Parameter names: ``crban.cand.*`` (candidate GRU), ``crban.att_ie.*`` and
    ``crban.att_ipv.*`` (one attention per branch), ``crban.mlp.*``.
    """

    def __init__(self, params, spec, mlp_input='encoding'):
        self.spec = spec
        self.mlp_input = mlp_input if spec.candidate_gru else 'raw'
        self.cand = GruStack.from_params(params, 'crban.cand') if spec.candidate_gru else None
        self.attention = {
            kind: AdditiveAttention.from_params(params, f'crban.att_{kind.lower()}')
            for kind in spec.branches
        }
        self.mlp = Mlp.from_params(params, 'crban.mlp')

    @staticmethod
    def init_params(rng, spec, item_dim, value_dim, dims):
        params = {}
        H = dims.gru_hidden
        width = 0
        if spec.candidate_gru:
            params.update(GruStack.init_params(
                rng, 'crban.cand', item_dim, H, dims.gru_layers, dims.init_scale))
            for kind in spec.branches:
                params.update(AdditiveAttention.init_params(
                    rng, f'crban.att_{kind.lower()}', H, H, dims.attention_hidden, dims.init_scale))
                width += value_dim
            width += (H if dims.mlp_input == 'encoding' else item_dim) + H
        else:
            width = item_dim
        params.update(Mlp.init_params(rng, 'crban.mlp', width, dims.mlp_hidden, dims.init_scale))
        return params

    def forward_batch(self, cand_x, cand_mask, target_req, target_pos, behaviors):
        """
        Score N targets drawn from B candidate lists.

        Args:
            cand_x: (B, K, Dp) candidate item vectors in initial order
            cand_mask: (B, K) validity of candidate slots
            target_req, target_pos: (N,) which list and slot each target is
            behaviors: {kind: (keys (B, M, H), values (B, M, Dv), mask (B, M))}

        Returns:
            tuple: (logits (N,), {kind: weights (N, M)}, cache)
        """
        target_x = cand_x[target_req, target_pos]
        cache = {'req': target_req, 'pos': target_pos, 'cand_shape': cand_x.shape}
        if self.cand is None:
            logits, acts = self.mlp.forward(target_x)
            cache['mlp'] = acts
            return logits, {}, cache

        P_hat, finals, cand_cache = self.cand.forward(cand_x, cand_mask)
        s = finals[-1]
        p_t = P_hat[target_req, target_pos]
        parts = []
        traces = {}
        att_caches = {}
        for kind in self.spec.branches:
            keys, values, mask = behaviors[kind]
            weights, context, att_cache = self.attention[kind].forward(p_t, keys, values, mask, target_req)
            traces[kind] = weights
            att_caches[kind] = att_cache
            parts.append(context)
        parts.append(p_t if self.mlp_input == 'encoding' else target_x)
        parts.append(s[target_req])
        X = np.concatenate(parts, axis=1)
        logits, acts = self.mlp.forward(X)
        cache.update({'cand': cand_cache, 'att': att_caches, 'mlp': acts,
                      'widths': [p.shape[1] for p in parts], 'hidden': s.shape[1]})
        return logits, traces, cache

    def backward_batch(self, cache, d_logits):
        """
        Returns:
            tuple: (d_cand_x (B, K, Dp), {kind: (d_keys, d_values)}, named grads)
        """
        req, pos = cache['req'], cache['pos']
        d_X, mlp_grads = self.mlp.backward(cache['mlp'], d_logits)
        grads = Mlp.named_grads('crban.mlp', mlp_grads)
        d_cand_x = np.zeros(cache['cand_shape'], dtype=DTYPE)
        if self.cand is None:
            np.add.at(d_cand_x, (req, pos), d_X)
            return d_cand_x, {}, grads

        offsets = np.cumsum([0] + cache['widths'])
        chunks = [d_X[:, a:b] for a, b in zip(offsets[:-1], offsets[1:])]
        d_behaviors = {}
        B, K, _ = cache['cand_shape']
        H = cache['hidden']
        d_p_t = np.zeros((len(req), H), dtype=DTYPE)
        for kind, d_context in zip(self.spec.branches, chunks):
            dq, d_keys, d_values, att_grads = self.attention[kind].backward(cache['att'][kind], d_context)
            d_p_t += dq
            d_behaviors[kind] = (d_keys, d_values)
            prefix = f'crban.att_{kind.lower()}'
            grads.update({f'{prefix}.{key}': value for key, value in att_grads.items()})
        d_target, d_s_target = chunks[-2], chunks[-1]
        if self.mlp_input == 'encoding':
            d_p_t += d_target
        else:
            np.add.at(d_cand_x, (req, pos), d_target)
        d_P_hat = np.zeros((B, K, H), dtype=DTYPE)
        np.add.at(d_P_hat, (req, pos), d_p_t)
        d_s = np.zeros((B, H), dtype=DTYPE)
        np.add.at(d_s, req, d_s_target)
        d_final = [None] * (len(self.cand.layers) - 1) + [d_s]
        d_x, cand_grads, _ = self.cand.backward(cache['cand'], d_P_hat, d_final)
        d_cand_x += d_x
        grads.update(GruStack.named_grads('crban.cand', cand_grads))
        return d_cand_x, d_behaviors, grads


# ----------------------------------------------------------------------
# Serving path: one request, one behavior snapshot


def encode_candidates(cands, model):
    """
    Run the candidate GRU over the list in initial order.

    Args:
        cands: CandidateList
        model: DeviceModel or EdgeRecModel

    Returns:
        CandidateEncoding: P_hat (K, H) and s (H,) are None for variants
        without a candidate GRU
    """
    if len(cands) == 0:
        raise EmptyCandidatesError("Cannot encode an empty candidate list")
    X = np.stack([model.item_vector(item) for item in cands.items])
    scorer = model.crban
    if scorer.cand is None:
        return CandidateEncoding(cands.item_ids, X, None, None)
    P_hat, finals, _ = scorer.cand.forward(X[None])
    return CandidateEncoding(cands.item_ids, X, P_hat[0], finals[-1][0])


def _snapshot_behaviors(snap, scorer):
    behaviors = {}
    for kind in scorer.spec.branches:
        seq = snap[kind]
        keys = np.asarray(seq.keys)[None]
        values = np.asarray(seq.values)[None]
        behaviors[kind] = (keys, values, np.ones(keys.shape[:2], dtype=bool))
    return behaviors


def _score_targets(positions, encoding, snap, model):
    scorer = model.crban
    positions = np.asarray(positions, dtype=int)
    req = np.zeros(len(positions), dtype=int)
    X = encoding.X[None]
    logits, traces, _ = scorer.forward_batch(
        X, np.ones(X.shape[:2], dtype=bool), req, positions, _snapshot_behaviors(snap, scorer)
    )
    scores = sigmoid(logits)
    results = []
    for n, t in enumerate(positions):
        results.append(ScoredCandidate(
            item_id=encoding.item_ids[t],
            score=float(scores[n]),
            initial_rank=int(t),
            ie_weights=tuple(float(w) for w in traces[IE][n]) if IE in traces else (),
            ipv_weights=tuple(float(w) for w in traces[IPV][n]) if IPV in traces else (),
        ))
    return results


def score_candidate(t, encoding, snap, model):
    """
    Score candidate ``t`` of an encoded list against a behavior snapshot.

    Returns:
        ScoredCandidate with IE/IPV attention traces
    """
    if not 0 <= t < len(encoding.item_ids):
        raise EmptyCandidatesError(f"Candidate index {t} outside list of {len(encoding.item_ids)}")
    hubsm = model.hubsm
    if hubsm is not None:
        for kind in model.crban.spec.branches:
            width = np.asarray(snap[kind].keys).shape[1]
            if width != hubsm.hidden:
                raise DimensionMismatchError(
                    f"{kind} context width {width} does not match model hidden size {hubsm.hidden}"
                )
    return _score_targets([t], encoding, snap, model)[0]


def rerank(cands, snap, model):
    """
    Order candidates by score, descending; ties keep initial rank.

    Args:
        cands: CandidateList (unexposed remainder, initial order)
        snap: ContextSnapshot
        model: DeviceModel or EdgeRecModel

    Returns:
        list: ScoredCandidate, best first
    """
    encoding = encode_candidates(cands, model)
    scored = _score_targets(range(len(cands)), encoding, snap, model)
    return sorted(scored, key=lambda c: (-c.score, c.initial_rank))
