"""
Ranking-quality metrics against oracle judgments: DCG@K, ERR@K, simulated
side-by-side GSB, and frequency-bucketed comparisons between systems.
"""
import csv
import io
import math
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from drrel.click_sim import QueryCatalog
from drrel.exceptions import ConfigError, DomainError, PairingError
from drrel.mixins import ToDictMixin

GRADE_THRESHOLDS = (0.2, 0.4, 0.6, 0.8)
REPORT_COLUMNS = ('system', 'bucket', 'metric', 'K', 'value', 'relative_improvement', 'n_queries')
NOT_AVAILABLE = 'N/A'


def grade_from_gamma(gamma: float, thresholds: Sequence[float] = GRADE_THRESHOLDS) -> int:
    return int(np.searchsorted(np.asarray(thresholds, dtype=float), gamma, side='right'))


def gain_from_gamma(gamma: float, thresholds: Sequence[float] = GRADE_THRESHOLDS) -> float:
    return float(2 ** grade_from_gamma(gamma, thresholds) - 1)


@dataclass(frozen=True)
class JudgedRanking(ToDictMixin):
    query_id: str
    doc_ids: Tuple[str, ...]
    gains: Tuple[float, ...]
    relevances: Tuple[float, ...]

    def __post_init__(self):
        if not len(self.doc_ids) == len(self.gains) == len(self.relevances):
            raise DomainError('one gain and one relevance per ranked document')
        if any(g < 0 for g in self.gains):
            raise DomainError('gains must be nonnegative')
        if any(not 0.0 <= r <= 1.0 for r in self.relevances):
            raise DomainError('relevance probabilities must lie in [0, 1]')


def judge_ranking(query_id, doc_ids: Sequence[str], catalog: QueryCatalog,
                  thresholds: Sequence[float] = GRADE_THRESHOLDS) -> JudgedRanking:
    """Oracle judgments from the catalog's true relevance."""
    gammas = [catalog.gamma(query_id, d) for d in doc_ids]
    return JudgedRanking(query_id, tuple(doc_ids), tuple(gain_from_gamma(g, thresholds) for g in gammas),
                         tuple(gammas))


def _check_k(k):
    if k < 1:
        raise DomainError('K must be at least 1')


def dcg_at_k(ranking: JudgedRanking, k: int) -> float:
    _check_k(k)
    return math.fsum(g / math.log2(i + 2) for i, g in enumerate(ranking.gains[:k]))


def err_at_k(ranking: JudgedRanking, k: int) -> float:
    _check_k(k)
    total, not_stopped = 0.0, 1.0
    for i, r in enumerate(ranking.relevances[:k]):
        total += not_stopped * r / (i + 1)
        not_stopped *= 1.0 - r
    return total


@dataclass(frozen=True)
class GsbResult(ToDictMixin):
    good: int
    same: int
    bad: int

    @property
    def delta(self) -> float:
        total = self.good + self.same + self.bad
        return (self.good - self.bad) / total if total else 0.0


def simulated_gsb(rankings_a: Mapping[str, JudgedRanking], rankings_b: Mapping[str, JudgedRanking],
                  tie_epsilon=1e-6, k=4) -> GsbResult:
    """
    Side-by-side judgment per query by oracle DCG@k: Good when A beats B by
    more than ``tie_epsilon``, Bad when B beats A, Same otherwise.
    """
    if set(rankings_a) != set(rankings_b):
        raise PairingError('side-by-side comparison needs identical query sets ({} vs {} queries)'.format(
            len(rankings_a), len(rankings_b)))
    good = same = bad = 0
    for qid in sorted(rankings_a):
        diff = dcg_at_k(rankings_a[qid], k) - dcg_at_k(rankings_b[qid], k)
        if diff > tie_epsilon:
            good += 1
        elif -diff > tie_epsilon:
            bad += 1
        else:
            same += 1
    return GsbResult(good, same, bad)


@dataclass(frozen=True)
class BucketSpec:
    """Monthly frequency cut points; bucket i holds thresholds[i-1] <= f < thresholds[i]."""
    thresholds: Tuple[float, ...] = (10.0, 1000.0)
    names: Tuple[str, ...] = ('Tail', 'Mid', 'High')

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.thresholds, self.thresholds[1:])):
            raise ConfigError('bucket thresholds must be strictly increasing')
        if len(self.names) != len(self.thresholds) + 1:
            raise ConfigError('need one bucket name more than thresholds')

    def bucket(self, frequency: float) -> str:
        return self.names[int(np.searchsorted(np.asarray(self.thresholds), frequency, side='right'))]


def per_query_metrics(rankings: Mapping[str, JudgedRanking], k: int) -> Dict[str, Dict[str, float]]:
    return dict((qid, {'DCG': dcg_at_k(r, k), 'ERR': err_at_k(r, k)}) for qid, r in rankings.items())


@dataclass(frozen=True)
class ReportRow(ToDictMixin):
    system: str
    bucket: str
    metric: str
    k: int
    value: Optional[float]
    relative_improvement: Optional[float]
    n_queries: int


def bucketed_report(per_query: Mapping[str, Mapping[str, Mapping[str, float]]], frequencies: Mapping[str, float],
                    spec: BucketSpec, baseline: str, k: int, metrics=('DCG', 'ERR')) -> List[ReportRow]:
    """
    Mean metric per (system, bucket) and its relative improvement in percent
    over ``baseline``. Empty buckets and zero baselines yield ``None``.
    """
    if baseline not in per_query:
        raise ConfigError('baseline system {!r} was not scored'.format(baseline))
    members: Dict[str, List[str]] = dict((name, []) for name in spec.names)
    for qid in sorted(per_query[baseline]):
        members[spec.bucket(frequencies[qid])].append(qid)

    def mean(system, bucket, metric):
        qids = members[bucket]
        return math.fsum(per_query[system][q][metric] for q in qids) / len(qids) if qids else None

    rows = []
    for system in sorted(per_query):
        for bucket in spec.names:
            for metric in metrics:
                value = mean(system, bucket, metric)
                base = mean(baseline, bucket, metric)
                rel = None if value is None or not base else (value - base) / base * 100.0
                rows.append(ReportRow(system, bucket, metric, k, value, rel, len(members[bucket])))
    return rows


def _fmt(value):
    return NOT_AVAILABLE if value is None else '{:.6f}'.format(value)


def write_report_csv(rows: Sequence[ReportRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator='\n')
    writer.writerow(REPORT_COLUMNS)
    for r in rows:
        writer.writerow([r.system, r.bucket, r.metric, r.k, _fmt(r.value), _fmt(r.relative_improvement), r.n_queries])
    return buf.getvalue()
