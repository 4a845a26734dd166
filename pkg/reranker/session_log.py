"""
Session Log

Line-delimited JSON, one self-describing record per event, trigger or rerank:
``{"ts": ..., "user": ..., "kind": ..., "payload": {...}}``. The first line is
a ``header`` record carrying the config hash and seed of the run that wrote it.
Records are validated with DRF serializers on read; lines that fail are
skipped and counted.
"""

import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field

from .exceptions import MalformedLogError
from .serializers import LogRecordSerializer

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LogRecord:
    ts: int
    user: int
    kind: str
    payload: dict

    def to_json(self):
        return json.dumps(
            {'ts': self.ts, 'user': self.user, 'kind': self.kind, 'payload': self.payload},
            sort_keys=True, separators=(',', ':'),
        )


@dataclass
class SessionLog:
    records: list = field(default_factory=list)
    skipped: int = 0

    def append(self, ts, user, kind, payload):
        record = LogRecord(int(ts), user, kind, payload)
        self.records.append(record)
        return record

    def write_header(self, config_hash, seed, arm, model_version=None):
        return self.append(0, None, 'header', {
            'config_hash': config_hash,
            'seed': seed,
            'arm': arm,
            'model_version': model_version,
        })

    @property
    def header(self):
        for record in self.records:
            if record.kind == 'header':
                return record.payload
        return None

    def __len__(self):
        return len(self.records)

    def of_kind(self, kind):
        return [r for r in self.records if r.kind == kind]

    def by_user(self):
        """Records grouped per user, each group in log order; users ascending."""
        grouped = defaultdict(list)
        for record in self.records:
            if record.user is not None:
                grouped[record.user].append(record)
        return dict(sorted(grouped.items()))

    def save(self, path):
        with open(path, 'w') as fh:
            for record in self.records:
                fh.write(record.to_json())
                fh.write('\n')
        logger.info(f"Wrote {len(self.records)} log records to {path}")

    @classmethod
    def load(cls, path, strict=False):
        """
        Read and validate a log file.

        Args:
            path: JSONL file
            strict: Raise MalformedLogError on the first bad line instead of skipping it

        Returns:
            SessionLog: with ``skipped`` counting rejected lines
        """
        with open(path) as fh:
            return cls.from_lines(fh, strict=strict)

    @classmethod
    def from_lines(cls, lines, strict=False):
        log = cls()
        for number, line in enumerate(lines, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                log.records.append(parse_line(line))
            except MalformedLogError as e:
                if strict:
                    raise
                log.skipped += 1
                logger.warning(f"Skipping malformed log line {number}: {e}")
        return log


def parse_line(line):
    try:
        data = json.loads(line)
    except json.JSONDecodeError as e:
        raise MalformedLogError(f"Invalid JSON: {e}") from e
    if not isinstance(data, dict):
        raise MalformedLogError("Log line is not a JSON object")
    serializer = LogRecordSerializer(data=data)
    if not serializer.is_valid():
        raise MalformedLogError(str(serializer.errors))
    # Keep the raw payload so scores and floats survive unchanged.
    return LogRecord(int(data['ts']), data['user'], data['kind'], data['payload'])


@dataclass
class RequestOutcome:
    """One trigger of one user and what happened to its candidates afterwards."""
    user: int
    trigger: LogRecord
    candidates: list
    rerank: LogRecord = None
    behaviors: list = field(default_factory=list)
    exposed: list = field(default_factory=list)
    clicked: set = field(default_factory=set)
    session_start: int = 0

    @property
    def request_id(self):
        return self.trigger.payload['request_id']

    def labels(self):
        return [1 if item_id in self.clicked else 0 for item_id in self.exposed]


def request_outcomes(user, records):
    """
    Split one user's records (log order) into per-trigger outcomes.

    ``behaviors`` holds the behavior payloads logged before the trigger.
    ``exposed`` holds the trigger's candidates exposed after it, up to the end
    of the page the trigger was served on. Later triggers on the same page do
    not close earlier requests, so one exposure can be a target of several
    requests. An exposed candidate is in ``clicked`` when that exposure was
    clicked at any point before the session ended.
    """
    outcomes = []
    behaviors = []
    # requests served on the current page, with their candidate sets
    open_requests = []
    # item id -> outcomes its latest exposure was attributed to
    attributed = {}
    start = records[0].ts if records else 0
    for record in records:
        if record.kind == 'behavior':
            behaviors.append(record.payload['record'])
        elif record.kind == 'page':
            open_requests = []
        elif record.kind == 'trigger':
            candidates = list(record.payload['candidates'])
            outcome = RequestOutcome(user, record, candidates, behaviors=list(behaviors),
                                     session_start=start)
            open_requests.append((outcome, set(candidates)))
            outcomes.append(outcome)
        elif record.kind == 'rerank':
            for outcome, _ in reversed(open_requests):
                if outcome.request_id == record.payload['request_id']:
                    outcome.rerank = record
                    break
        elif record.kind == 'expose':
            item_id = record.payload['item_id']
            attributed[item_id] = []
            for outcome, candidate_set in open_requests:
                if item_id in candidate_set and item_id not in outcome.exposed:
                    outcome.exposed.append(item_id)
                    attributed[item_id].append(outcome)
        elif record.kind == 'click':
            for outcome in attributed.get(record.payload['item_id'], ()):
                outcome.clicked.add(record.payload['item_id'])
    return outcomes
