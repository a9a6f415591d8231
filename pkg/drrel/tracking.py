"""
Click-behavior tracking: session log parsing and the daily/weekly/monthly
aggregation dictionaries behind the dense click-feature vector.

Events are kept as hourly buckets of sufficient statistics. Each window
dictionary is a snapshot summed over its coverage ``(B - span, B]``, where
``B`` is the last refresh boundary of its cadence, and is swapped in whole
on refresh. Cadences run on the simulated clock through
:class:`drrel.schedule.Scheduler`.
"""
import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from drrel.click_sim import Interaction, SessionLog
from drrel.exceptions import DomainError, ScheduleValueError, SchemaError
from drrel.log import logger
from drrel.mixins import ToDictMixin
from drrel.schedule import Scheduler

SESSION_LOG_SCHEMA = 'drrel.session-log/1'
SNAPSHOT_SCHEMA = 'drrel.tracking-snapshot/1'
FEATURE_SCHEMA = 'drrel.click-features/1'

# (kind, span hours, refresh cadence hours)
WINDOWS = (('daily', 24, 1), ('weekly', 168, 24), ('monthly', 672, 168))
RETENTION_HOURS = max(span for _, span, _ in WINDOWS)
STAT_NAMES = ('impressions', 'clicks', 'e_sum', 'position_sum', 'display_sum', 'dwell_sum', 'skips')
WINDOW_FEATURES = ('log_impressions', 'ctr', 'examined_ctr', 'mean_position', 'mean_display_s',
                   'mean_dwell_s', 'skip_rate')
FEATURE_NAMES = tuple('{}_{}'.format(kind, name) for kind, _, _ in WINDOWS for name in WINDOW_FEATURES)
FEATURE_DIM = len(FEATURE_NAMES)
_N_STATS = len(STAT_NAMES)

PairKey = Tuple[str, str]


@dataclass(frozen=True)
class Reject:
    line_no: int
    reason: str
    raw: str


@dataclass
class ParsedLog:
    sessions: List[SessionLog] = field(default_factory=list)
    rejects: List[Reject] = field(default_factory=list)
    header: Optional[dict] = None


def _session_from_record(record) -> SessionLog:
    qid = record['query_id']
    interactions = tuple(
        Interaction(qid, i['doc_id'], int(i['pos']), int(i['click']), float(i['display_s']), float(i['dwell_s']),
                    int(i['ts']), None if i.get('e_hat') is None else float(i['e_hat']))
        for i in record['interactions'])
    return SessionLog(qid, tuple(record['docs']), interactions)


def parse_click_log(lines: Iterable[str], schema_version=SESSION_LOG_SCHEMA) -> ParsedLog:
    """
    Parse session JSONL. A header line (an object with ``schema_version``
    and no ``query_id``) must declare ``schema_version``; malformed session
    lines are collected as rejects with a reason.
    """
    parsed = ParsedLog()
    for line_no, line in enumerate(lines, start=1):
        raw = line.strip()
        if not raw:
            continue
        try:
            record = json.loads(raw)
        except json.JSONDecodeError as ex:
            parsed.rejects.append(Reject(line_no, 'invalid json: {}'.format(ex.msg), raw))
            continue
        if isinstance(record, dict) and 'schema_version' in record and 'query_id' not in record:
            if record['schema_version'] != schema_version:
                raise SchemaError('session log schema {!r}, expected {!r}'.format(
                    record['schema_version'], schema_version))
            parsed.header = record
            continue
        try:
            parsed.sessions.append(_session_from_record(record))
        except KeyError as ex:
            parsed.rejects.append(Reject(line_no, 'missing field {}'.format(ex), raw))
        except (DomainError, TypeError, ValueError) as ex:
            parsed.rejects.append(Reject(line_no, str(ex), raw))
    if parsed.rejects:
        logger.warning('rejected session log lines', rejects=len(parsed.rejects),
                       first=parsed.rejects[0].reason)
    return parsed


def session_events(session: SessionLog):
    """(hour, pair, stats) per interaction; skips are unclicked results above the last click."""
    ordered = session.ordered()
    clicked = [i.position for i in ordered if i.clicked]
    last_click = max(clicked) if clicked else 0
    for inter in ordered:
        skip = int(not inter.clicked and inter.position < last_click)
        e_hat = 0.0 if inter.e_hat is None else inter.e_hat
        yield inter.timestamp, (inter.query_id, inter.doc_id), (
            1.0, float(inter.clicked), e_hat, float(inter.position), inter.display_time_s, inter.dwell_time_s,
            float(skip))


class ShardAggregate(object):
    """
    Sufficient statistics per (hour, pair) for a partition of sessions.
    ``merge`` is associative and commutative.
    """

    def __init__(self, cells: Optional[Dict[Tuple[int, str, str], np.ndarray]] = None):
        self.cells = cells if cells is not None else {}

    def __len__(self):
        return len(self.cells)

    def add_session(self, session: SessionLog):
        for hour, (qid, did), stats in session_events(session):
            key = (hour, qid, did)
            cell = self.cells.get(key)
            if cell is None:
                self.cells[key] = np.array(stats)
            else:
                cell += stats

    @classmethod
    def from_sessions(cls, sessions: Iterable[SessionLog]) -> "ShardAggregate":
        agg = cls()
        for session in sessions:
            agg.add_session(session)
        return agg

    def merge(self, other: "ShardAggregate") -> "ShardAggregate":
        cells = dict((k, v.copy()) for k, v in self.cells.items())
        for key, stats in other.cells.items():
            if key in cells:
                cells[key] += stats
            else:
                cells[key] = stats.copy()
        return ShardAggregate(cells)

    def digest(self) -> str:
        sha = hashlib.sha256()
        for key in sorted(self.cells):
            sha.update(json.dumps(key).encode('utf-8'))
            sha.update(self.cells[key].astype('<f8').tobytes())
        return sha.hexdigest()


def aggregate_sessions(sessions: Sequence[SessionLog], shards=1, jobs=1) -> ShardAggregate:
    sessions = list(sessions)
    shards = max(1, min(shards, len(sessions) or 1))
    parts = [sessions[i::shards] for i in range(shards)]
    if jobs > 1 and shards > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            partials = list(pool.map(ShardAggregate.from_sessions, parts))
    else:
        partials = [ShardAggregate.from_sessions(p) for p in parts]
    total = ShardAggregate()
    for p in partials:
        total = total.merge(p)
    return total


class PairIndex(object):
    """Append-only dense index of (query_id, doc_id) pairs."""

    def __init__(self, keys: Iterable[PairKey] = ()):
        self.keys: List[PairKey] = []
        self._ids: Dict[PairKey, int] = {}
        for key in keys:
            self.add(key)

    def __len__(self):
        return len(self.keys)

    def add(self, key: PairKey) -> int:
        pid = self._ids.get(key)
        if pid is None:
            pid = self._ids[key] = len(self.keys)
            self.keys.append(key)
        return pid

    def get(self, key: PairKey) -> Optional[int]:
        return self._ids.get(key)


@dataclass(frozen=True, eq=False)
class WindowDict:
    kind: str
    span_hours: int
    cadence_hours: int
    coverage: Tuple[int, int]  # (start, end]: events with start < hour <= end
    refreshed_at: int
    index: PairIndex
    stats: np.ndarray  # one row of STAT_NAMES per indexed pair known at refresh

    def lookup(self, key: PairKey) -> np.ndarray:
        pid = self.index.get(key)
        if pid is None or pid >= self.stats.shape[0]:
            return np.zeros(_N_STATS)
        return self.stats[pid]

    def covers(self, hour) -> bool:
        return self.coverage[0] < hour <= self.coverage[1]

    @property
    def total_impressions(self) -> float:
        return float(self.stats[:, 0].sum()) if self.stats.size else 0.0

    def pair_stats(self):
        for pid in np.flatnonzero(self.stats[:, 0] > 0) if self.stats.size else ():
            yield self.index.keys[pid], self.stats[pid]


def _empty_window(kind, span, cadence, index):
    return WindowDict(kind, span, cadence, (0, 0), -1, index, np.zeros((0, _N_STATS)))


class ClickTracker(object):
    """
    The three aggregation dictionaries plus the hourly buckets they are
    built from. Drive it with :func:`advance_clock_and_aggregate`.
    """

    def __init__(self, windows=WINDOWS):
        self.index = PairIndex()
        self.buckets: Dict[int, Tuple[np.ndarray, np.ndarray]] = {}
        self.clock: Optional[int] = None
        self.late_events = 0
        self.future_events = 0
        self.applied = set()
        self.window_specs = tuple(windows)
        self.windows: Dict[str, WindowDict] = dict(
            (kind, _empty_window(kind, span, cadence, self.index)) for kind, span, cadence in windows)
        self.scheduler = Scheduler()
        for kind, span, cadence in windows:
            self.scheduler.every(cadence, 'h').tag(kind).do(self._refresh, kind, span, cadence)

    def ingest(self, aggregate: ShardAggregate, clock: int):
        by_hour: Dict[int, List[Tuple[int, np.ndarray]]] = {}
        for (hour, qid, did), stats in sorted(aggregate.cells.items()):
            if hour > clock:
                self.future_events += int(stats[0])
                continue
            if hour <= clock - RETENTION_HOURS:
                self.late_events += int(stats[0])
                continue
            by_hour.setdefault(hour, []).append((self.index.add((qid, did)), stats))
        for hour, rows in by_hour.items():
            ids = np.array([r[0] for r in rows], dtype=int)
            stats = np.vstack([r[1] for r in rows])
            if hour in self.buckets:
                old_ids, old_stats = self.buckets[hour]
                ids = np.concatenate([old_ids, ids])
                stats = np.vstack([old_stats, stats])
            uniq, inverse = np.unique(ids, return_inverse=True)
            summed = np.zeros((uniq.size, _N_STATS))
            np.add.at(summed, inverse, stats)
            self.buckets[hour] = (uniq, summed)

    def evict(self, clock: int):
        horizon = clock - RETENTION_HOURS
        for hour in [h for h in self.buckets if h <= horizon]:
            del self.buckets[hour]
        self.applied = set(key for key in self.applied if key[0] > horizon)

    def _refresh(self, kind, span, cadence, clock):
        boundary = (clock // cadence) * cadence
        start = boundary - span
        stats = np.zeros((len(self.index), _N_STATS))
        for hour, (ids, values) in self.buckets.items():
            if start < hour <= boundary:
                np.add.at(stats, ids, values)
        windows = dict(self.windows)
        windows[kind] = WindowDict(kind, span, cadence, (start, boundary), clock, self.index, stats)
        self.windows = windows

    def snapshot(self) -> "TrackerSnapshot":
        return TrackerSnapshot(dict(self.windows), self.clock, self.late_events, self.future_events)


def advance_clock_and_aggregate(tracker: ClickTracker, sessions: Iterable[SessionLog], clock: int,
                                shards=1, jobs=1) -> ClickTracker:
    """
    Add ``sessions`` and move the simulated clock to ``clock``, refreshing
    each dictionary whose cadence boundary was crossed. Replaying the same
    ``(clock, sessions)`` leaves the state unchanged; events newer than the
    clock or older than the longest window are counted and skipped.
    """
    if tracker.clock is not None and clock < tracker.clock:
        raise ScheduleValueError('clock moved backwards: {} < {}'.format(clock, tracker.clock))
    aggregate = aggregate_sessions(list(sessions), shards, jobs)
    key = (clock, aggregate.digest())
    if key in tracker.applied:
        logger.debug('batch already applied', clock=clock)
    else:
        late, future = tracker.late_events, tracker.future_events
        tracker.ingest(aggregate, clock)
        tracker.applied.add(key)
        if tracker.late_events > late or tracker.future_events > future:
            logger.warning('events outside the tracking window skipped', clock=clock,
                           late=tracker.late_events - late, future=tracker.future_events - future)
    tracker.scheduler.run_pending(clock)
    tracker.clock = clock
    tracker.evict(clock)
    return tracker


@dataclass(frozen=True)
class ClickFeatureVector(ToDictMixin):
    values: np.ndarray
    schema: str = FEATURE_SCHEMA

    def __post_init__(self):
        if self.values.shape != (FEATURE_DIM,) or not np.all(np.isfinite(self.values)):
            raise DomainError('click features must be {} finite values'.format(FEATURE_DIM))

    @property
    def is_zero(self) -> bool:
        return not np.any(self.values)


def window_features(stats: np.ndarray) -> np.ndarray:
    """Per-window feature block(s) from STAT_NAMES rows; works on one row or a matrix."""
    stats = np.atleast_2d(stats)
    imps, clicks, e_sum, pos_sum, disp_sum, dwell_sum, skips = stats.T
    safe = lambda num, den: np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    out = np.stack([
        np.log1p(imps),
        safe(clicks, imps),
        np.clip(safe(clicks, e_sum), 0.0, 1.0),
        safe(pos_sum, imps),
        safe(disp_sum, imps),
        safe(dwell_sum, clicks),
        safe(skips, imps),
    ], axis=1)
    return out


def feature_matrix(dicts, keys: Sequence[PairKey], min_impressions=0) -> np.ndarray:
    """
    Feature rows for many pairs against ``dicts`` (a tracker or a snapshot).

    Pairs whose largest window holds fewer than ``min_impressions``
    impressions read as unseen and get the zero row.
    """
    if not keys:
        return np.zeros((0, FEATURE_DIM))
    blocks = []
    support = np.zeros(len(keys))
    for kind, _, _ in WINDOWS:
        window = dicts.windows[kind]
        rows = np.zeros((len(keys), _N_STATS))
        for i, key in enumerate(keys):
            pid = window.index.get(key)
            if pid is not None and pid < window.stats.shape[0]:
                rows[i] = window.stats[pid]
        support = np.maximum(support, rows[:, 0])
        blocks.append(window_features(rows))
    out = np.hstack(blocks)
    out[support < max(min_impressions, 1)] = 0.0
    return out


def build_click_features(dicts, query_id, doc_id, min_impressions=0) -> ClickFeatureVector:
    """The dense click vector of a pair; pairs never seen get the zero vector."""
    return ClickFeatureVector(feature_matrix(dicts, [(query_id, doc_id)], min_impressions)[0])


@dataclass(frozen=True, eq=False)
class TrackerSnapshot:
    """A read-only set of window dictionaries, persisted as JSON."""
    windows: Dict[str, WindowDict]
    clock: Optional[int] = None
    late_events: int = 0
    future_events: int = 0

    def to_json(self) -> str:
        payload = {
            'schema_version': SNAPSHOT_SCHEMA,
            'clock': self.clock,
            'late_events': self.late_events,
            'future_events': self.future_events,
            'windows': dict((kind, {
                'span_hours': w.span_hours,
                'cadence_hours': w.cadence_hours,
                'coverage': list(w.coverage),
                'refreshed_at': w.refreshed_at,
                'pairs': [{'query_id': q, 'doc_id': d, 'stats': stats.tolist()} for (q, d), stats in w.pair_stats()],
            }) for kind, w in self.windows.items()),
        }
        return json.dumps(payload, sort_keys=True)

    @classmethod
    def from_json(cls, text) -> "TrackerSnapshot":
        payload = json.loads(text)
        if payload.get('schema_version') != SNAPSHOT_SCHEMA:
            raise SchemaError('tracking snapshot schema {!r}, expected {!r}'.format(
                payload.get('schema_version'), SNAPSHOT_SCHEMA))
        windows = {}
        for kind, w in payload['windows'].items():
            index = PairIndex((p['query_id'], p['doc_id']) for p in w['pairs'])
            stats = np.array([p['stats'] for p in w['pairs']], dtype=float).reshape(-1, _N_STATS)
            windows[kind] = WindowDict(kind, int(w['span_hours']), int(w['cadence_hours']), tuple(w['coverage']),
                                       int(w['refreshed_at']), index, stats)
        return cls(windows, payload['clock'], int(payload['late_events']), int(payload['future_events']))


def features_at_timestamps(sessions: Sequence[SessionLog], requests: Sequence[Tuple[int, str, str]],
                           tracker: Optional[ClickTracker] = None, hook=None,
                           min_impressions=0) -> Tuple[np.ndarray, ClickTracker]:
    """
    Replay ``sessions`` hour by hour and read, for each ``(timestamp,
    query_id, doc_id)`` request, the click features current at that hour.

    ``hook(hour, batch)``, if given, may transform each hour's sessions
    before they are aggregated (e.g. re-annotate examination). Pairs below
    ``min_impressions`` read as unseen, as in :func:`feature_matrix`.
    """
    tracker = tracker or ClickTracker()
    by_hour: Dict[int, List[SessionLog]] = {}
    for s in sessions:
        by_hour.setdefault(s.timestamp, []).append(s)
    wanted: Dict[int, List[int]] = {}
    for i, (ts, _, _) in enumerate(requests):
        wanted.setdefault(int(ts), []).append(i)
    hours = set(by_hour) | set(wanted)
    out = np.zeros((len(requests), FEATURE_DIM))
    if not hours:
        return out, tracker
    for hour in range(min(hours), max(hours) + 1):
        batch = by_hour.get(hour, [])
        if hook is not None:
            batch = hook(hour, batch)
        advance_clock_and_aggregate(tracker, batch, hour)
        if hour in wanted:
            idx = wanted[hour]
            out[idx] = feature_matrix(tracker, [(requests[i][1], requests[i][2]) for i in idx], min_impressions)
    return out, tracker
