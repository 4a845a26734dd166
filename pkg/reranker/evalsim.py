"""
Evaluation and Session Simulation

Synthetic users with planted feedback structure drive the edge runtime and
the cloud recommender end to end:

- category affinity sets the base click propensity
- a click on a category boosts later clicks on it (decaying per exposure)
- repeated exposure of a category builds fatigue (decaying per exposure)

Metrics are computed from the resulting session log only, so a log written by
any run can be re-scored: GAUC over rerank requests, PV / CLICK / CTR, a GMV
proxy (buys x synthetic price), CTR by display position and the number of
system feedbacks per page.
"""

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from sklearn.metrics import roc_auc_score

from .cloud_service import Catalog, CloudRecommender, EmbeddingStore
from .edge_runtime import EdgeEvent, EdgeRuntime
from .exceptions import UndefinedMetricError
from .feature_codec import DELETE_REASONS, PAGEVIEW_FLAGS
from .nn_core import sigmoid
from .session_log import SessionLog, request_outcomes

logger = logging.getLogger(__name__)

BASELINE_ARM = 'baseline'

# Base probability of each detail-page action, scaled by category affinity.
PAGEVIEW_PROPENSITY = {
    'cart': 0.15,
    'favorite': 0.10,
    'comment': 0.20,
    'select_sku': 0.25,
    'wdj': 0.05,
    'wangwang': 0.05,
    'detail': 0.60,
    'shop': 0.15,
    'recommendation': 0.20,
}

SESSION_SPACING_MS = 3_600_000


# ----------------------------------------------------------------------
# Metrics


def auc(labels, scores):
    """
    Probability that a random positive outscores a random negative; ties count 0.5.

    Raises:
        UndefinedMetricError: labels are all one class
    """
    labels = np.asarray(labels)
    if labels.size == 0 or labels.min() == labels.max():
        raise UndefinedMetricError("AUC is undefined for single-class labels")
    return float(roc_auc_score(labels, np.asarray(scores, dtype=float)))


def gauc(per_request):
    """
    Impression-weighted mean of per-request AUC.

    Args:
        per_request: Iterable of (labels, scores, impressions)

    Returns:
        float: sum(impressions_r * AUC_r) / sum(impressions_r) over requests
        whose labels contain both classes
    """
    numerator = 0.0
    denominator = 0
    for labels, scores, impressions in per_request:
        if len(labels) != len(scores):
            raise UndefinedMetricError("Labels and scores differ in length")
        try:
            value = auc(labels, scores)
        except UndefinedMetricError:
            continue
        numerator += impressions * value
        denominator += impressions
    if denominator == 0:
        raise UndefinedMetricError("GAUC is undefined: no request has both clicks and non-clicks")
    return numerator / denominator


@dataclass
class MetricsReport:
    arm: str
    users: int
    pv: int
    clicks: int
    gmv: float
    pages: int
    triggers: int
    reorders: int
    gauc: float = None
    ctr_by_position: list = field(default_factory=list)
    config_hash: str = ''

    @property
    def ctr(self):
        return self.clicks / self.pv

    @property
    def triggers_per_page(self):
        return self.triggers / self.pages if self.pages else 0.0

    @property
    def reorders_per_page(self):
        return self.reorders / self.pages if self.pages else 0.0

    def mean_ctr(self, first, last):
        """Mean CTR over 1-based display positions first..last inclusive."""
        window = [c for c in self.ctr_by_position[first - 1:last] if c is not None]
        return float(np.mean(window)) if window else 0.0

    def to_dict(self):
        return {
            'arm': self.arm,
            'users': self.users,
            'pv': self.pv,
            'click': self.clicks,
            'ctr': self.ctr,
            'gmv_proxy': self.gmv,
            'gauc': self.gauc,
            'pages': self.pages,
            'triggers_per_page': self.triggers_per_page,
            'reorders_per_page': self.reorders_per_page,
            'config_hash': self.config_hash,
        }

    def to_text(self):
        gauc_text = f"{self.gauc:.5f}" if self.gauc is not None else 'undefined'
        lines = [
            f"EdgeRec metrics report ({self.arm})",
            f"config hash        {self.config_hash}",
            f"users              {self.users}",
            f"PV                 {self.pv}",
            f"CLICK              {self.clicks}",
            f"CTR                {self.ctr:.5f}",
            f"GMV (proxy)        {self.gmv:.2f}",
            f"GAUC               {gauc_text}",
            f"pages              {self.pages}",
            f"triggers / page    {self.triggers_per_page:.3f}",
            f"reorders / page    {self.reorders_per_page:.3f}",
        ]
        return '\n'.join(lines) + '\n'


def metrics_report(log, page_size=50, arm=None):
    """
    Compute every metric from a session log.

    Raises:
        UndefinedMetricError: the log holds no exposures
    """
    header = log.header or {}
    buy_index = PAGEVIEW_FLAGS.index('buy')
    pv = clicks = pages = triggers = reorders = 0
    gmv = 0.0
    exposures_at = np.zeros(page_size, dtype=int)
    clicks_at = np.zeros(page_size, dtype=int)
    per_request = []
    grouped = log.by_user()
    for user, records in grouped.items():
        for record in records:
            kind = record.kind
            if kind == 'expose':
                pv += 1
                if record.payload['position'] <= page_size:
                    exposures_at[record.payload['position'] - 1] += 1
            elif kind == 'click':
                clicks += 1
                if record.payload['position'] <= page_size:
                    clicks_at[record.payload['position'] - 1] += 1
            elif kind == 'page':
                pages += 1
            elif kind == 'trigger':
                triggers += 1
            elif kind == 'rerank' and record.payload['reordered']:
                reorders += 1
            elif kind == 'behavior':
                rec = record.payload['record']
                if rec['kind'] == 'IPV' and rec['action']['flags'][buy_index]:
                    gmv += rec['item']['price']
        for outcome in request_outcomes(user, records):
            if outcome.rerank is None or not outcome.exposed:
                continue
            scores = {o['item_id']: o['score'] for o in outcome.rerank.payload['order']}
            per_request.append((
                outcome.labels(),
                [scores[item_id] for item_id in outcome.exposed],
                len(outcome.exposed),
            ))
    if pv == 0:
        raise UndefinedMetricError("No exposures in the log; CTR is undefined")
    try:
        gauc_value = gauc(per_request)
    except UndefinedMetricError:
        logger.warning("GAUC undefined for this log (no mixed-label requests)")
        gauc_value = None
    ctr_by_position = [
        float(c / e) if e else None for c, e in zip(clicks_at, exposures_at)
    ]
    return MetricsReport(
        arm=arm or header.get('arm', BASELINE_ARM),
        users=len(grouped),
        pv=pv,
        clicks=clicks,
        gmv=round(gmv, 2),
        pages=pages,
        triggers=triggers,
        reorders=reorders,
        gauc=gauc_value,
        ctr_by_position=ctr_by_position,
        config_hash=header.get('config_hash', ''),
    )


def write_position_csv(reports, path):
    """One row per display position: ``position,ctr_<arm>,...``."""
    arms = list(reports)
    positions = max(len(r.ctr_by_position) for r in reports.values())
    with open(path, 'w', newline='') as fh:
        writer = csv.writer(fh)
        writer.writerow(['position'] + [f'ctr_{arm}' for arm in arms])
        for index in range(positions):
            row = [index + 1]
            for arm in arms:
                values = reports[arm].ctr_by_position
                value = values[index] if index < len(values) else None
                row.append('' if value is None else f'{value:.6f}')
            writer.writerow(row)
    logger.info(f"Wrote per-position CTR for {len(arms)} arms to {path}")


def variant_table(rows):
    """
    Variant comparison table.

    Args:
        rows: Iterable of (variant name, GAUC or None)
    """
    rows = list(rows)
    width = max([len('Model')] + [len(name) for name, _ in rows])
    lines = [f"{'Model':<{width}}  GAUC", f"{'-' * width}  -------"]
    for name, value in rows:
        lines.append(f"{name:<{width}}  {value:.5f}" if value is not None else f"{name:<{width}}  n/a")
    return '\n'.join(lines) + '\n'


# ----------------------------------------------------------------------
# Synthetic users


class SyntheticUser:
    """
    A simulated user with per-category affinity, post-click boost and fatigue.

    All randomness comes from the user's own generator, so a user's behavior
    depends only on the seed and on what the client shows.
    """

    def __init__(self, user_id, category_affinity, params, rng):
        self.user_id = user_id
        self.category_affinity = category_affinity
        self.params = params
        self.rng = rng
        self.boost = np.zeros_like(category_affinity)
        self.fatigue = np.zeros_like(category_affinity)
        self.dwell_scale = float(rng.uniform(600.0, 1500.0))
        self.scroll_scale = float(rng.uniform(300.0, 2000.0))

    @classmethod
    def create(cls, user_id, params, categories, seed):
        rng = np.random.default_rng([seed, 3, user_id])
        mass = rng.dirichlet(np.full(categories, params.affinity_concentration))
        affinity = np.clip(np.log(categories * mass + 1e-3), -3.0, 3.0) / 3.0
        return cls(user_id, affinity, params, rng)

    def affinity(self, item):
        return float(self.category_affinity[item.category_id])

    def click_probability(self, item):
        c = item.category_id
        logit = (self.params.base_logit
                 + self.params.affinity_weight * self.category_affinity[c]
                 + self.boost[c] - self.fatigue[c])
        return float(sigmoid(np.float64(logit)))

    def delete_probability(self, item):
        c = item.category_id
        scale = (1.0 + self.fatigue[c]) * (1.0 if self.category_affinity[c] < 0 else 0.5)
        return float(min(1.0, self.params.delete_rate * scale))

    def after_exposure(self, item):
        self.boost *= self.params.boost_decay
        self.fatigue *= self.params.fatigue_decay
        self.fatigue[item.category_id] += self.params.fatigue_rate

    def after_click(self, item):
        self.boost[item.category_id] += self.params.click_boost

    def dwell_ms(self, item):
        return int(self.rng.exponential(self.dwell_scale * (1.0 + 0.5 * self.affinity(item)))) + 100

    def scroll_speed(self, item):
        return float(self.rng.lognormal(np.log(self.scroll_scale) - 0.3 * self.affinity(item), 0.4))

    def delete_reason(self):
        return str(self.rng.choice(DELETE_REASONS[1:]))

    def pageview_flags(self, item):
        scale = 1.0 + 0.5 * self.affinity(item)
        flags = [name for name, p in PAGEVIEW_PROPENSITY.items() if self.rng.random() < min(1.0, p * scale)]
        if self.rng.random() < min(1.0, self.params.buy_rate * scale):
            flags.append('buy')
        return flags

    def ipv_duration_ms(self, item):
        return int(self.rng.exponential(15000.0 * (1.0 + 0.5 * self.affinity(item)))) + 1000


def simulate_session(runtime, user, start_ts, pages, page_size):
    """Drive one user's session through the edge runtime."""
    uid = user.user_id
    rng = user.rng
    ts = start_ts
    runtime.start_session(uid, ts)
    for _ in range(pages * page_size):
        cached = runtime.next_item(uid, ts)
        if cached is None:
            break
        item = cached.item.attrs
        ts += int(rng.integers(150, 400))
        runtime.ingest_event(uid, EdgeEvent('expose', ts, item.item_id))
        for _ in range(int(rng.poisson(1.0))):
            ts += int(rng.integers(50, 300))
            runtime.ingest_event(uid, EdgeEvent('scroll', ts, item.item_id, {
                'speed': user.scroll_speed(item),
                'duration_ms': int(rng.integers(50, 1500)),
            }))
        ts += user.dwell_ms(item)
        roll = rng.random()
        p_click = user.click_probability(item)
        if roll < p_click:
            trigger = runtime.ingest_event(uid, EdgeEvent('click', ts, item.item_id))
            runtime.serve_trigger(uid, trigger)
            user.after_click(item)
            ts = trigger.ts + 1
            for flag in user.pageview_flags(item):
                ts += int(rng.integers(500, 3000))
                runtime.ingest_event(uid, EdgeEvent('pageview_action', ts, item.item_id, {'flag': flag}))
            ts += user.ipv_duration_ms(item)
            runtime.ingest_event(uid, EdgeEvent('leave_detail', ts, item.item_id))
        elif roll < p_click + user.delete_probability(item):
            trigger = runtime.ingest_event(uid, EdgeEvent(
                'delete', ts, item.item_id, {'reason': user.delete_reason()}))
            runtime.serve_trigger(uid, trigger)
            ts = trigger.ts + 1
        else:
            trigger = runtime.ingest_event(uid, EdgeEvent('leave_viewport', ts, item.item_id))
            if trigger is not None:
                runtime.serve_trigger(uid, trigger)
                ts = trigger.ts + 1
        user.after_exposure(item)
    runtime.end_session(uid, ts + 1000)


def run_sessions(config, users=None, bundle=None, seed=None, store=None):
    """
    Simulate ``users`` sessions and return their log.

    Args:
        config: EdgeRecConfig
        users: Number of users (defaults to SIM_USERS)
        bundle: ModelBundle to publish and serve; None for the no-rerank arm
        seed: Overrides SEED for catalog, users and pages
        store: EmbeddingStore to publish into (a fresh one by default)

    Returns:
        SessionLog
    """
    if seed is not None and seed != config.seed:
        config = config.replace(seed=seed)
    params = config.simulator_params()
    users = params.users if users is None else users
    store = store or EmbeddingStore(config.retained_versions)
    model = None
    if bundle is not None:
        if store.get(bundle.version) is None:
            store.publish_version(bundle)
        model = store.device_model(bundle.version)
    cloud = CloudRecommender(Catalog.generate(config), store, config)
    log = SessionLog()
    arm = model.variant if model is not None else BASELINE_ARM
    log.write_header(config.config_hash(), config.seed, arm, model.version if model else None)
    runtime = EdgeRuntime(cloud, config, log, model)
    for uid in range(users):
        user = SyntheticUser.create(uid, params, config.catalog_categories, config.seed)
        cloud.register_user(uid, user.category_affinity)
        simulate_session(runtime, user, uid * SESSION_SPACING_MS, params.pages, config.page_size)
    logger.info(f"Simulated {users} sessions ({arm}): {len(log)} log records")
    return log


def simulate(config, users=None, bundle=None, seed=None, store=None):
    """
    Returns:
        tuple: (SessionLog, MetricsReport)
    """
    log = run_sessions(config, users=users, bundle=bundle, seed=seed, store=store)
    return log, metrics_report(log, config.page_size)
