"""Small configurations and hand-built records shared by the test modules."""

import numpy as np

from reranker.config import EdgeRecConfig
from reranker.feature_codec import ExposureAction, ItemAttributes, PageViewAction, ResolvedItem
from reranker.hubsm import IE, IPV, BehaviorRecord

TINY = dict(
    max_ie_length=4,
    max_ipv_length=3,
    candidate_count=12,
    page_size=8,
    k_expose=3,
    bucket_count=4,
    emb_dim_category=3,
    emb_dim_brand=3,
    emb_dim_gender=2,
    emb_dim_price_level=2,
    emb_dim_age_level=2,
    emb_dim_bc_type=2,
    vocab_category=6,
    vocab_brand=12,
    vocab_gender=3,
    vocab_price_level=4,
    vocab_age_level=4,
    vocab_bc_type=2,
    score_count=2,
    gru_layers=2,
    gru_hidden=5,
    attention_hidden=4,
    mlp_hidden=(6,),
    init_scale=0.3,
    catalog_items=120,
    catalog_categories=6,
    catalog_brands=12,
    sim_users=6,
    sim_pages=2,
    sim_base_logit=-2.0,
    sim_delete_rate=0.03,
    batch_size=32,
    max_epochs=2,
)


def tiny_config(**overrides):
    params = dict(TINY)
    params.update(overrides)
    return EdgeRecConfig(**params)


def make_item(item_id, category=0, brand=0, scores=(0.5, 0.1)):
    return ItemAttributes(
        item_id=item_id,
        category_id=category,
        brand_id=brand,
        gender_id=item_id % 3,
        price_level=item_id % 4,
        age_level=item_id % 4,
        bc_type=item_id % 2,
        scores=tuple(scores),
        price=10.0,
    )


def resolved(attrs, tables):
    return ResolvedItem(attrs, {t: np.array(m[attrs.index_for(t)]) for t, m in tables.items()})


def exposure(item, ts, dwell=800, delete_reason='none', decay=0):
    action = ExposureAction(
        exposure_duration_ms=dwell,
        exposure_count=1,
        scroll_speed_max=300.0,
        scroll_duration_max_ms=200,
        scroll_count=1,
        delete_reason=delete_reason,
        expose_decay_ms=decay,
    )
    return BehaviorRecord(IE, ts, item, action)


def page_view(item, ts, duration=5000, decay=0, **flags):
    return BehaviorRecord(IPV, ts, item, PageViewAction.with_flags(duration, decay, **flags))


def random_stream(rng, length, vocab_category=6, vocab_brand=12):
    """A valid time-ordered behavior stream: every page view follows an exposure of its item."""
    records = []
    exposed = []
    ts = 1000
    for _ in range(length):
        ts += int(rng.integers(1, 500))
        if exposed and rng.random() < 0.3:
            item = exposed[int(rng.integers(len(exposed)))]
            records.append(page_view(item, ts, duration=int(rng.integers(0, 60000)),
                                     cart=bool(rng.random() < 0.5), buy=bool(rng.random() < 0.2)))
        else:
            item = make_item(
                int(rng.integers(0, 1000)),
                category=int(rng.integers(vocab_category)),
                brand=int(rng.integers(vocab_brand)),
                scores=tuple(rng.uniform(0, 1, size=2)),
            )
            exposed.append(item)
            records.append(exposure(item, ts, dwell=int(rng.integers(0, 5000)),
                                    decay=int(rng.integers(0, 100000))))
    return records


PLANTED_CATEGORIES = 4


def planted_category_model(gain=40.0):
    """
    A hand-set full model over categories 0-3.

    Every GRU passes tanh(gain * category one-hot) straight through, plus one
    constant unit. Attention peaks on behaviors sharing the candidate's
    category, and the MLP scores a candidate up when the page views hold its
    category.

    Returns:
        tuple: (EdgeRecConfig, EdgeRecModel)
    """
    from reranker.crban import FULL_VARIANT
    from reranker.trainer import variant

    config = tiny_config(gru_layers=1, emb_dim_category=6)
    model = variant(FULL_VARIANT, config)
    params = model.params
    for value in params.values():
        value[...] = 0.0
    H = config.gru_hidden
    const = PLANTED_CATEGORIES
    params['emb.category'][...] = np.eye(6)
    for prefix in ('crban.cand', 'hubsm.ie_item', 'hubsm.ipv_item'):
        params[f'{prefix}.l0.b_z'][...] = 50.0
        params[f'{prefix}.l0.b_h'][const] = gain
        for c in range(PLANTED_CATEGORIES):
            params[f'{prefix}.l0.W_h'][c, c] = gain
    for prefix in ('crban.att_ie', 'crban.att_ipv'):
        params[f'{prefix}.v'][...] = 2.0
        for c in range(PLANTED_CATEGORIES):
            params[f'{prefix}.W_q'][c, c] = gain
            params[f'{prefix}.W_q'][c, const] = -1.5 * gain
            params[f'{prefix}.W_k'][c, c] = gain
    # MLP input: IE context (2H), IPV context (2H, item half last), candidate (H), list state (H)
    for c in range(PLANTED_CATEGORIES):
        params['crban.mlp.l0.W'][c, 3 * H + c] = gain
        params['crban.mlp.l0.W'][c, 4 * H + c] = gain
        params['crban.mlp.l0.W'][c, 4 * H + const] = -1.5 * gain
        params['crban.mlp.out.W'][0, c] = 1.0
    return config, model
