"""
Edge Runtime

The on-device pair of client and model serving:

- PageCache: the current page of cloud candidates; an immutable exposed prefix
  followed by the unexposed suffix whose display order reranking may rewrite
- TriggerPolicy: fires on a click, a delete, or k exposures without a click
- EdgeRuntime: ingests viewport, click, delete and detail-page events per user,
  finalizes behavior records, encodes them into the behavior context and
  serves reranks from a context snapshot
- ModelServing: runs reranks on a worker pool, decoupled from ingestion

Each behavior is encoded into the context the moment it is finalized, stamped
with the timestamp of the event that finalized it; its decay feature is the
time since the behavior began, measured at that moment. An item still in the
viewport when a trigger fires is finalized at the triggering event, strictly
before the trigger itself, and keeps being tracked until it leaves.
"""

import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .crban import CandidateList, ScoredCandidate, rerank
from .exceptions import BehaviorOrderError, UnknownItemError
from .feature_codec import DELETE_REASONS, PAGEVIEW_FLAGS, ExposureAction, PageViewAction
from .hubsm import IE, IPV, BehaviorRecord, append_behavior, snapshot

logger = logging.getLogger(__name__)

TRIGGER_CLICK = 'click'
TRIGGER_DELETE = 'delete'
TRIGGER_EXPOSURES = 'exposures'

EVENT_KINDS = (
    'expose', 'scroll', 'leave_viewport', 'click', 'delete',
    'pageview_action', 'leave_detail',
)


@dataclass(frozen=True)
class EdgeEvent:
    kind: str
    ts: int
    item_id: int
    data: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Trigger:
    kind: str
    ts: int
    request_id: str


@dataclass
class RerankResult:
    request_id: str
    user: int
    trigger_kind: str
    ts: int
    model_version: int = None
    order: list = field(default_factory=list)
    reordered: bool = False
    disabled: bool = False
    noop: bool = False

    @property
    def item_order(self):
        return [c.item_id for c in self.order]


@dataclass
class CachedItem:
    item: object
    initial_rank: int
    deleted: bool = False
    position: int = None

    @property
    def item_id(self):
        return self.item.item_id


class PageCache:
    """One page of cloud candidates; only the unexposed suffix may be reordered."""

    def __init__(self, page_size=50):
        self.page_size = page_size
        self.exposed = []
        self.pending = []
        self.request_id = None

    def refill(self, response):
        self.exposed = []
        self.pending = [CachedItem(item, rank) for rank, item in enumerate(response.items)]
        self.request_id = response.request_id

    @property
    def page_exposed(self):
        return len(self.exposed)

    @property
    def page_complete(self):
        return self.page_exposed >= self.page_size or not self.pending

    def lookup(self, item_id):
        for cached in self.exposed:
            if cached.item_id == item_id:
                return cached
        for cached in self.pending:
            if cached.item_id == item_id:
                return cached
        raise UnknownItemError(f"Item {item_id} is not in the page cache")

    def next_item(self):
        return self.pending[0] if self.pending else None

    def expose(self, item_id):
        for index, cached in enumerate(self.pending):
            if cached.item_id == item_id:
                self.pending.pop(index)
                cached.position = len(self.exposed) + 1
                self.exposed.append(cached)
                return cached
        raise UnknownItemError(f"Item {item_id} is not pending display")

    def candidates(self):
        """Unexposed items in initial cloud order."""
        ordered = sorted((c for c in self.pending if not c.deleted), key=lambda c: c.initial_rank)
        return CandidateList([c.item for c in ordered])

    def apply_order(self, item_ids):
        """
        Rewrite the unexposed suffix. Items exposed since the rerank started are
        skipped; pending items missing from ``item_ids`` keep their relative order
        after the ranked ones.

        Returns:
            bool: whether the display order changed
        """
        by_id = {c.item_id: c for c in self.pending}
        ranked = [by_id[i] for i in item_ids if i in by_id]
        ranked_ids = {c.item_id for c in ranked}
        new_pending = ranked + [c for c in self.pending if c.item_id not in ranked_ids]
        changed = [c.item_id for c in new_pending] != [c.item_id for c in self.pending]
        self.pending = new_pending
        return changed

    def display_list(self):
        return [c.item_id for c in self.exposed] + [c.item_id for c in self.pending]

    def remove_pending(self, item_id):
        self.pending = [c for c in self.pending if c.item_id != item_id]


class TriggerPolicy:
    def __init__(self, k_expose=10):
        self.k_expose = k_expose
        self.unclicked = 0

    def on_exposure(self):
        self.unclicked += 1
        if self.unclicked >= self.k_expose:
            self.unclicked = 0
            return TRIGGER_EXPOSURES
        return None

    def on_click(self):
        self.unclicked = 0
        return TRIGGER_CLICK

    def on_delete(self):
        self.unclicked = 0
        return TRIGGER_DELETE

    def on_page(self):
        self.unclicked = 0


@dataclass
class ExposureInProgress:
    cached: CachedItem
    start_ts: int
    exposure_count: int
    scroll_speed_max: float = 0.0
    scroll_duration_max_ms: int = 0
    scroll_count: int = 0


@dataclass
class PageViewInProgress:
    cached: CachedItem
    start_ts: int
    flags: dict = field(default_factory=dict)


class UserSession:
    def __init__(self, user, page_size, k_expose, context):
        self.user = user
        self.cache = PageCache(page_size)
        self.policy = TriggerPolicy(k_expose)
        self.context = context
        self.exposing = {}
        # Exposures finalized by a trigger while still in the viewport; the
        # state tracks what happens after the trigger until the item leaves
        self.finalized_early = {}
        self.exposure_counts = {}
        self.detail = None
        self.rerank_enabled = context is not None
        self.requests = 0
        self.pages = 0
        self.lock = threading.RLock()


@dataclass
class PreparedRerank:
    """Everything a rerank needs, captured under the session lock."""
    user: int
    trigger: Trigger
    candidates: CandidateList
    snapshot: object
    model: object
    display_order: list


class EdgeRuntime:
    """
    Client-side state for every simulated user, sharing one device model.

    Args:
        cloud: CloudRecommender
        config: EdgeRecConfig
        log: SessionLog receiving every logged event (optional)
        model: DeviceModel or None for the no-rerank arm
    """

    def __init__(self, cloud, config, log=None, model=None):
        self.cloud = cloud
        self.config = config
        self.log = log
        self.model = model
        self.sessions = {}

    # ------------------------------------------------------------------
    # Model lifecycle

    @property
    def model_version(self):
        return self.model.version if self.model is not None else None

    def install_model(self, device_model):
        self.model = device_model
        for session in self.sessions.values():
            with session.lock:
                session.context = device_model.new_context()
                session.rerank_enabled = True
        logger.info(f"Installed device model v{device_model.version} ({device_model.variant})")

    # ------------------------------------------------------------------
    # Sessions and paging

    def start_session(self, user, ts):
        context = self.model.new_context() if self.model is not None else None
        session = UserSession(user, self.config.page_size, self.config.k_expose, context)
        session.rerank_enabled = self.model is not None
        self.sessions[user] = session
        self.request_page(user, ts)
        return session

    def session(self, user):
        session = self.sessions.get(user)
        if session is None:
            raise UnknownItemError(f"No open session for user {user}")
        return session

    def request_page(self, user, ts, model_version=None):
        """
        Replace the cache with a fresh page from the cloud.

        A fallback response disables reranking until a new model is installed.
        """
        session = self.session(user)
        version = self.model_version if model_version is None else model_version
        response = self.cloud.page(user, version)
        with session.lock:
            session.cache.refill(response)
            session.policy.on_page()
            session.pages += 1
            if response.fallback and session.rerank_enabled:
                session.rerank_enabled = False
                logger.warning(
                    f"User {user}: cloud served v{response.served_version} for v{version}; "
                    f"rerank disabled until a model refresh"
                )
        self._log(ts, user, 'page', {
            'request_id': response.request_id,
            'served_version': response.served_version,
            'fallback': response.fallback,
            'items': [item.attrs.to_dict() for item in response.items],
        })
        return response

    def next_item(self, user, ts):
        """The item the viewport reaches next; pages in a new cache at page end."""
        session = self.session(user)
        if session.cache.page_complete:
            self.request_page(user, ts)
        return session.cache.next_item()

    def end_session(self, user, ts):
        session = self.session(user)
        with session.lock:
            if session.detail is not None:
                self._finish_detail(session, ts)
            for item_id in list(session.exposing):
                self._finish_exposure(session, item_id, ts)
            session.finalized_early.clear()
        self._log(ts, user, 'session_end', {})
        del self.sessions[user]

    # ------------------------------------------------------------------
    # Event ingestion

    def ingest_event(self, user, event):
        """
        Apply one client event.

        Behaviors the event finalizes are encoded before this returns. When
        the event fires a trigger, items still in the viewport are finalized
        at the event's timestamp so the trigger (one millisecond later) sees
        all of them.

        Returns:
            Trigger or None
        """
        session = self.session(user)
        with session.lock:
            kind = self._apply_event(session, event)
            if kind is None:
                return None
            for item_id in list(session.exposing):
                state = session.exposing[item_id]
                self._finish_exposure(session, item_id, event.ts)
                session.finalized_early[item_id] = ExposureInProgress(
                    state.cached, event.ts, state.exposure_count)
            session.requests += 1
            return Trigger(kind, event.ts + 1, f'r{user}-{session.requests}')

    def _apply_event(self, session, event):
        cache = session.cache
        if event.kind == 'expose':
            cached = cache.expose(event.item_id)
            count = session.exposure_counts.get(event.item_id, 0) + 1
            session.exposure_counts[event.item_id] = count
            session.exposing[event.item_id] = ExposureInProgress(cached, event.ts, count)
            self._log(event.ts, session.user, 'expose',
                      {'item_id': event.item_id, 'position': cached.position})
            return None

        if event.kind == 'scroll':
            state = self._exposing(session, event.item_id)
            state.scroll_count += 1
            state.scroll_speed_max = max(state.scroll_speed_max, float(event.data.get('speed', 0.0)))
            state.scroll_duration_max_ms = max(
                state.scroll_duration_max_ms, int(event.data.get('duration_ms', 0)))
            return None

        if event.kind == 'leave_viewport':
            if session.finalized_early.pop(event.item_id, None) is None:
                self._exposing(session, event.item_id)
                self._finish_exposure(session, event.item_id, event.ts)
            return session.policy.on_exposure()

        if event.kind == 'click':
            cached = cache.lookup(event.item_id)
            if event.item_id in session.exposing:
                self._finish_exposure(session, event.item_id, event.ts)
            session.finalized_early.pop(event.item_id, None)
            if session.detail is not None:
                self._finish_detail(session, event.ts)
            session.detail = PageViewInProgress(cached, event.ts)
            self._log(event.ts, session.user, 'click',
                      {'item_id': event.item_id, 'position': cached.position or 1})
            return session.policy.on_click()

        if event.kind == 'delete':
            reason = event.data.get('reason', 'not_interested')
            if reason not in DELETE_REASONS[1:]:
                raise BehaviorOrderError(f"Unknown delete reason {reason!r}")
            cached = cache.lookup(event.item_id)
            if event.item_id in session.exposing:
                self._finish_exposure(session, event.item_id, event.ts, reason)
            elif event.item_id in session.finalized_early:
                # The exposure was already encoded by a trigger; the delete
                # closes the remainder of it as its own record.
                session.exposing[event.item_id] = session.finalized_early.pop(event.item_id)
                self._finish_exposure(session, event.item_id, event.ts, reason)
            cached.deleted = True
            cache.remove_pending(event.item_id)
            self._log(event.ts, session.user, 'delete', {
                'item_id': event.item_id, 'position': cached.position or 1, 'reason': reason,
            })
            return session.policy.on_delete()

        if event.kind == 'pageview_action':
            detail = self._detail(session, event.item_id)
            flag = event.data.get('flag')
            if flag not in PAGEVIEW_FLAGS:
                raise BehaviorOrderError(f"Unknown page-view flag {flag!r}")
            detail.flags[flag] = True
            return None

        if event.kind == 'leave_detail':
            self._detail(session, event.item_id)
            self._finish_detail(session, event.ts)
            return None

        raise BehaviorOrderError(f"Unknown edge event kind {event.kind!r}")

    @staticmethod
    def _exposing(session, item_id):
        state = session.exposing.get(item_id) or session.finalized_early.get(item_id)
        if state is None:
            session.cache.lookup(item_id)
            raise BehaviorOrderError(f"Item {item_id} is not in the viewport")
        return state

    @staticmethod
    def _detail(session, item_id):
        if session.detail is None or session.detail.cached.item_id != item_id:
            session.cache.lookup(item_id)
            raise BehaviorOrderError(f"Not on the detail page of item {item_id}")
        return session.detail

    def _finish_exposure(self, session, item_id, ts, reason='none'):
        state = session.exposing.pop(item_id)
        elapsed = max(0, ts - state.start_ts)
        action = ExposureAction(
            exposure_duration_ms=elapsed,
            exposure_count=state.exposure_count,
            scroll_speed_max=state.scroll_speed_max,
            scroll_duration_max_ms=state.scroll_duration_max_ms,
            scroll_count=state.scroll_count,
            delete_reason=reason,
            expose_decay_ms=elapsed,
        )
        item = state.cached.item
        self._encode(session, BehaviorRecord(IE, ts, item.attrs, action, item.embeddings or None))

    def _finish_detail(self, session, ts):
        detail = session.detail
        session.detail = None
        elapsed = max(0, ts - detail.start_ts)
        action = PageViewAction.with_flags(elapsed, elapsed, **detail.flags)
        item = detail.cached.item
        self._encode(session, BehaviorRecord(IPV, ts, item.attrs, action, item.embeddings or None))

    def _encode(self, session, record):
        """Log a finalized behavior and fold it into the behavior context."""
        self._log(record.timestamp, session.user, 'behavior',
                  {'record': record.without_embeddings().to_dict()})
        if session.context is not None and session.rerank_enabled:
            append_behavior(session.context, record, self.model.hubsm)

    # ------------------------------------------------------------------
    # Serving

    def prepare_rerank(self, user, trigger):
        """Capture candidates plus a context snapshot; encodes nothing."""
        session = self.session(user)
        with session.lock:
            candidates = session.cache.candidates()
            self._log(trigger.ts, user, 'trigger', {
                'request_id': trigger.request_id,
                'trigger_kind': trigger.kind,
                'candidates': candidates.item_ids,
            })
            enabled = session.rerank_enabled and self.model is not None
            snap = snapshot(session.context) if enabled and session.context is not None else None
            return PreparedRerank(
                user=user,
                trigger=trigger,
                candidates=candidates,
                snapshot=snap,
                model=self.model if enabled else None,
                display_order=[c.item for c in session.cache.pending],
            )

    @staticmethod
    def execute_rerank(prepared):
        """Pure scoring step; safe on any thread."""
        if len(prepared.candidates) == 0:
            return None
        if prepared.model is None:
            return [
                ScoredCandidate(item.item_id, float(item.attrs.scores[0]) if item.attrs.scores else 0.0, rank)
                for rank, item in enumerate(prepared.display_order)
            ]
        return rerank(prepared.candidates, prepared.snapshot, prepared.model)

    def apply_rerank(self, prepared, order):
        trigger = prepared.trigger
        result = RerankResult(
            request_id=trigger.request_id,
            user=prepared.user,
            trigger_kind=trigger.kind,
            ts=trigger.ts,
            model_version=prepared.model.version if prepared.model is not None else None,
            disabled=prepared.model is None,
        )
        if order is None:
            result.noop = True
            logger.info(f"User {prepared.user}: {trigger.kind} trigger with no unexposed candidates")
            return result
        result.order = order
        if not result.disabled:
            session = self.session(prepared.user)
            with session.lock:
                result.reordered = session.cache.apply_order([c.item_id for c in order])
        self._log(trigger.ts, prepared.user, 'rerank', {
            'request_id': trigger.request_id,
            'model_version': result.model_version,
            'disabled': result.disabled,
            'reordered': result.reordered,
            'order': [{'item_id': c.item_id, 'score': c.score} for c in order],
        })
        return result

    def serve_trigger(self, user, trigger):
        """Synchronous rerank: prepare, score and apply in one call."""
        prepared = self.prepare_rerank(user, trigger)
        return self.apply_rerank(prepared, self.execute_rerank(prepared))

    # ------------------------------------------------------------------

    def _log(self, ts, user, kind, payload):
        if self.log is not None:
            self.log.append(ts, user, kind, payload)


class ModelServing:
    """Runs reranks on worker threads; the snapshot is taken on the caller's thread."""

    def __init__(self, runtime, workers=2):
        self.runtime = runtime
        self.executor = ThreadPoolExecutor(max_workers=workers, thread_name_prefix='edgerec-serving')

    def submit_trigger(self, user, trigger):
        """
        Returns:
            concurrent.futures.Future resolving to a RerankResult
        """
        prepared = self.runtime.prepare_rerank(user, trigger)
        return self.executor.submit(self._run, prepared)

    def _run(self, prepared):
        order = self.runtime.execute_rerank(prepared)
        return self.runtime.apply_rerank(prepared, order)

    def shutdown(self, wait=True):
        self.executor.shutdown(wait=wait)
