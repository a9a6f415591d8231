"""
Synthetic query/document catalogs and biased click simulation.

Users follow a position-based model extended with trust bias: a result at
position k is examined with probability theta_k, and an examined result is
clicked with probability eps_plus_k if relevant, eps_minus_k otherwise.
Marginally P(click) = alpha_k * gamma + beta_k with
alpha_k = theta_k (eps_plus_k - eps_minus_k) and beta_k = theta_k eps_minus_k.

Optionally examination decays below clicks (``anchor_factor`` < 1): the
examination probability at k is multiplied by anchor_factor once per click
above k.
"""
import json
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from drrel.cache import cached_property
from drrel.exceptions import ConfigError, DomainError, SchemaError
from drrel.log import logger
from drrel.mixins import ToDictMixin

CATALOG_SCHEMA = 'drrel.catalog/1'

EXAMINED_DISPLAY_MU, EXAMINED_DISPLAY_SIGMA = 2.0, 0.5
UNEXAMINED_DISPLAY_MEAN = 0.4
DWELL_MU, DWELL_SIGMA = 3.0, 1.0


def _as_probabilities(name, values, size=None):
    arr = np.atleast_1d(np.asarray(values, dtype=float))
    if size is not None and arr.shape == (1,):
        arr = np.repeat(arr, size)
    if arr.ndim != 1 or arr.size == 0:
        raise DomainError('{} must be a non-empty vector'.format(name))
    if not np.all(np.isfinite(arr)) or np.any(arr < 0.0) or np.any(arr > 1.0):
        raise DomainError('{} entries must lie in [0, 1]'.format(name))
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ClickModelParams(ToDictMixin):
    theta: np.ndarray
    eps_plus: np.ndarray
    eps_minus: np.ndarray
    anchor_factor: float = 1.0

    def __post_init__(self):
        theta = _as_probabilities('theta', self.theta)
        size = theta.size
        eps_plus = _as_probabilities('eps_plus', self.eps_plus, size)
        eps_minus = _as_probabilities('eps_minus', self.eps_minus, size)
        if not (eps_plus.size == eps_minus.size == size):
            raise DomainError('theta, eps_plus and eps_minus must have one entry per position')
        if np.any(theta <= 0.0):
            raise DomainError('theta must be positive at every position')
        if np.any(eps_minus >= eps_plus):
            raise DomainError('eps_minus must be strictly below eps_plus at every position')
        if not 0.0 < float(self.anchor_factor) <= 1.0:
            raise DomainError('anchor_factor must lie in (0, 1]')
        object.__setattr__(self, 'theta', theta)
        object.__setattr__(self, 'eps_plus', eps_plus)
        object.__setattr__(self, 'eps_minus', eps_minus)
        object.__setattr__(self, 'anchor_factor', float(self.anchor_factor))

    @property
    def num_positions(self) -> int:
        return int(self.theta.size)

    @cached_property
    def alpha(self) -> np.ndarray:
        return self.theta * (self.eps_plus - self.eps_minus)

    @cached_property
    def beta(self) -> np.ndarray:
        return self.theta * self.eps_minus

    def check_position(self, k):
        if not 1 <= int(k) <= self.num_positions or int(k) != k:
            raise DomainError('position {} outside 1..{}'.format(k, self.num_positions))
        return int(k)

    def click_probability(self, k, gamma):
        return click_probability(self, k, gamma)

    def with_top_examination(self, theta_top=1.0):
        """Same noise levels, with examination at position 1 forced to ``theta_top``."""
        theta = np.array(self.theta)
        theta[0] = theta_top
        return ClickModelParams(theta, self.eps_plus, self.eps_minus, self.anchor_factor)

    @classmethod
    def from_config(cls, conf):
        """
        Build parameters from a ``[click_model]`` section.

        theta_k = k ** -theta_power unless an explicit ``theta`` list is given;
        ``last_position_uptick`` is added to the last position; eps_plus is a
        scalar or a list; eps_minus_k = eps_minus_top / k unless ``eps_minus``
        lists it explicitly.
        """
        k = int(conf.get('num_positions', 10))
        if k < 1:
            raise ConfigError('click_model.num_positions must be positive')
        positions = np.arange(1, k + 1, dtype=float)
        theta = list(conf.get('theta') or [])
        if theta:
            if len(theta) != k:
                raise ConfigError('click_model.theta must list {} values'.format(k))
            theta = np.asarray(theta, dtype=float)
        else:
            theta = positions ** -float(conf.get('theta_power', 1.0))
        theta[-1] = min(1.0, theta[-1] + float(conf.get('last_position_uptick', 0.0)))
        eps_minus = conf.get('eps_minus')
        if eps_minus is None:
            eps_minus = float(conf.get('eps_minus_top', 0.0)) / positions
        try:
            return cls(theta, conf.get('eps_plus', 1.0), eps_minus, conf.get('anchor_factor', 1.0))
        except DomainError as ex:
            raise ConfigError('invalid [click_model]: {}'.format(ex))


def click_probability(params: ClickModelParams, k, gamma) -> float:
    k = params.check_position(k)
    if not 0.0 <= gamma <= 1.0:
        raise DomainError('gamma {} outside [0, 1]'.format(gamma))
    return float(params.alpha[k - 1] * gamma + params.beta[k - 1])


def examination_posterior(params: ClickModelParams, k, gamma) -> Tuple[float, float]:
    """
    True P(E=1 | C=0) and P(E=1 | C=1) at position k for relevance gamma
    (pure position-based examination). A click implies examination.
    """
    k = params.check_position(k)
    theta = params.theta[k - 1]
    q = params.eps_plus[k - 1] * gamma + params.eps_minus[k - 1] * (1.0 - gamma)
    no_click = 1.0 - theta * q
    e_no_click = 1.0 if no_click <= 0.0 else theta * (1.0 - q) / no_click
    return float(e_no_click), 1.0


@dataclass(frozen=True)
class RelevancePrior:
    kind: str = 'beta'
    a: float = 1.0
    b: float = 1.0
    value: float = 0.5

    def __post_init__(self):
        if self.kind not in ('beta', 'uniform', 'point'):
            raise ConfigError('unknown relevance prior {!r}'.format(self.kind))
        if self.kind == 'point' and not 0.0 <= self.value <= 1.0:
            raise ConfigError('point relevance prior must lie in [0, 1]')
        if self.kind == 'beta' and (self.a <= 0 or self.b <= 0):
            raise ConfigError('beta relevance prior needs positive a and b')

    def sample(self, rng, size):
        if self.kind == 'point':
            return np.full(size, float(self.value))
        if self.kind == 'uniform':
            return rng.random(size)
        return rng.beta(self.a, self.b, size)


@dataclass(frozen=True)
class CatalogConfig:
    n_queries: int
    docs_per_query: int
    zipf_exponent: float = 1.0
    monthly_volume: float = 60000.0
    relevance_prior: RelevancePrior = field(default_factory=RelevancePrior)

    def __post_init__(self):
        if self.n_queries < 1 or self.docs_per_query < 1:
            raise ConfigError('catalog sizes must be positive')
        if not self.zipf_exponent > 0:
            raise ConfigError('zipf_exponent must be positive')
        if not self.monthly_volume > 0:
            raise ConfigError('monthly_volume must be positive')

    @classmethod
    def from_config(cls, conf):
        prior = dict(conf.get('relevance_prior') or {})
        return cls(int(conf['n_queries']), int(conf['docs_per_query']),
                   float(conf.get('zipf_exponent', 1.0)), float(conf.get('monthly_volume', 60000)),
                   RelevancePrior(**prior))


@dataclass(frozen=True)
class Document:
    doc_id: str
    gamma: float
    feature_seed: int


@dataclass(frozen=True)
class Query:
    query_id: str
    weight: float
    documents: Tuple[Document, ...]

    @cached_property
    def gammas(self) -> np.ndarray:
        return np.array([d.gamma for d in self.documents], dtype=float)

    @property
    def doc_ids(self) -> Tuple[str, ...]:
        return tuple(d.doc_id for d in self.documents)


@dataclass(frozen=True, eq=False)
class QueryCatalog(ToDictMixin):
    queries: Tuple[Query, ...]
    monthly_volume: float = 60000.0

    def __post_init__(self):
        qids, dids = set(), set()
        for q in self.queries:
            if q.query_id in qids:
                raise DomainError('duplicate query_id {}'.format(q.query_id))
            qids.add(q.query_id)
            if not q.weight > 0:
                raise DomainError('query {} has a non-positive frequency weight'.format(q.query_id))
            for d in q.documents:
                if d.doc_id in dids:
                    raise DomainError('duplicate doc_id {}'.format(d.doc_id))
                dids.add(d.doc_id)
                if not 0.0 <= d.gamma <= 1.0:
                    raise DomainError('relevance of {} outside [0, 1]'.format(d.doc_id))

    def __len__(self):
        return len(self.queries)

    @cached_property
    def _query_index(self):
        return dict((q.query_id, i) for i, q in enumerate(self.queries))

    @cached_property
    def _documents(self):
        return dict(((q.query_id, d.doc_id), d) for q in self.queries for d in q.documents)

    @cached_property
    def weights(self) -> np.ndarray:
        w = np.array([q.weight for q in self.queries], dtype=float)
        return w / w.sum()

    def query(self, query_id) -> Query:
        try:
            return self.queries[self._query_index[query_id]]
        except KeyError:
            raise DomainError('unknown query {}'.format(query_id))

    def document(self, query_id, doc_id) -> Document:
        try:
            return self._documents[(query_id, doc_id)]
        except KeyError:
            raise DomainError('unknown pair ({}, {})'.format(query_id, doc_id))

    def gamma(self, query_id, doc_id) -> float:
        return self.document(query_id, doc_id).gamma

    def frequency(self, query_id) -> float:
        """Expected searches per simulated month."""
        return float(self.weights[self._query_index[query_id]] * self.monthly_volume)

    def pairs(self) -> List[Tuple[str, str]]:
        return [(q.query_id, d.doc_id) for q in self.queries for d in q.documents]

    def to_json(self) -> str:
        payload = {
            'schema_version': CATALOG_SCHEMA,
            'monthly_volume': self.monthly_volume,
            'queries': [{
                'query_id': q.query_id,
                'weight': q.weight,
                'documents': [{'doc_id': d.doc_id, 'gamma': d.gamma, 'feature_seed': d.feature_seed}
                              for d in q.documents],
            } for q in self.queries],
        }
        return json.dumps(payload, sort_keys=True)

    @classmethod
    def from_json(cls, text) -> "QueryCatalog":
        payload = json.loads(text)
        if payload.get('schema_version') != CATALOG_SCHEMA:
            raise SchemaError('catalog schema {!r}, expected {!r}'.format(
                payload.get('schema_version'), CATALOG_SCHEMA))
        queries = tuple(
            Query(q['query_id'], float(q['weight']),
                  tuple(Document(d['doc_id'], float(d['gamma']), int(d['feature_seed'])) for d in q['documents']))
            for q in payload['queries'])
        return cls(queries, float(payload['monthly_volume']))


def generate_catalog(config: CatalogConfig, seed) -> QueryCatalog:
    """Zipf-weighted queries, relevance drawn from the configured prior."""
    rng = np.random.default_rng(seed)
    ranks = np.arange(1, config.n_queries + 1, dtype=float)
    weights = ranks ** -config.zipf_exponent
    weights = weights / weights.sum()
    queries = []
    for i in range(config.n_queries):
        gammas = np.clip(config.relevance_prior.sample(rng, config.docs_per_query), 0.0, 1.0)
        seeds = rng.integers(0, 2 ** 31 - 1, size=config.docs_per_query)
        qid = 'q{:05d}'.format(i)
        docs = tuple(Document('{}-d{:03d}'.format(qid, j), float(g), int(s))
                     for j, (g, s) in enumerate(zip(gammas, seeds)))
        queries.append(Query(qid, float(weights[i]), docs))
    return QueryCatalog(tuple(queries), config.monthly_volume)


@dataclass(frozen=True)
class Interaction:
    query_id: str
    doc_id: str
    position: int
    clicked: int
    display_time_s: float
    dwell_time_s: float
    timestamp: int
    e_hat: Optional[float] = None

    def __post_init__(self):
        if self.position < 1:
            raise DomainError('position must be >= 1')
        if self.clicked not in (0, 1):
            raise DomainError('clicked must be 0 or 1')
        if self.display_time_s < 0 or self.dwell_time_s < 0:
            raise DomainError('display and dwell times must be nonnegative')
        if self.clicked and not self.display_time_s > 0:
            raise DomainError('a clicked result must have been displayed')

    def to_record(self):
        record = {'doc_id': self.doc_id, 'pos': self.position, 'click': self.clicked,
                  'display_s': self.display_time_s, 'dwell_s': self.dwell_time_s, 'ts': self.timestamp}
        if self.e_hat is not None:
            record['e_hat'] = self.e_hat
        return record


@dataclass(frozen=True)
class ExaminationTruth:
    """Hidden examination bits of one session, position order. Oracle use only."""
    examined: Tuple[bool, ...]


@dataclass(frozen=True)
class SessionLog:
    query_id: str
    docs: Tuple[str, ...]
    interactions: Tuple[Interaction, ...]
    truth: Optional[ExaminationTruth] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if sorted(i.position for i in self.interactions) != list(range(1, len(self.docs) + 1)):
            raise DomainError('interaction positions must be exactly 1..{}'.format(len(self.docs)))
        for inter in self.interactions:
            if inter.query_id != self.query_id or self.docs[inter.position - 1] != inter.doc_id:
                raise DomainError('interaction at position {} does not match the ranking'.format(inter.position))
        if self.truth is not None and len(self.truth.examined) != len(self.docs):
            raise DomainError('examination truth must cover every displayed position')

    @property
    def timestamp(self) -> int:
        return min(i.timestamp for i in self.interactions) if self.interactions else 0

    def ordered(self) -> Tuple[Interaction, ...]:
        return tuple(sorted(self.interactions, key=lambda i: i.position))

    @property
    def clicks(self) -> Tuple[int, ...]:
        return tuple(i.clicked for i in self.ordered())

    def with_examination(self, e_hat: Sequence[float]) -> "SessionLog":
        ordered = self.ordered()
        if len(e_hat) != len(ordered):
            raise DomainError('one examination estimate per interaction is required')
        annotated = tuple(Interaction(i.query_id, i.doc_id, i.position, i.clicked, i.display_time_s,
                                      i.dwell_time_s, i.timestamp, float(e)) for i, e in zip(ordered, e_hat))
        return SessionLog(self.query_id, self.docs, annotated, self.truth)

    def to_record(self):
        return {'query_id': self.query_id, 'docs': list(self.docs),
                'interactions': [i.to_record() for i in self.ordered()]}

    def to_json(self) -> str:
        return json.dumps(self.to_record(), sort_keys=True)


@dataclass(frozen=True)
class RandomizationRecord:
    query_id: str
    doc_id: str
    clicked: int
    timestamp: int


class RankingPolicy(ABC):
    name = ''

    @abstractmethod
    def order(self, query: Query, rng) -> np.ndarray:
        """Indices into ``query.documents``, best first."""


class FixedPolicy(RankingPolicy):
    name = 'fixed'

    def order(self, query, rng):
        return np.arange(len(query.documents))


class ShufflePolicy(RankingPolicy):
    name = 'shuffle'

    def order(self, query, rng):
        return rng.permutation(len(query.documents))


class NoisyRelevancePolicy(RankingPolicy):
    """Production-like logging ranker: sorts by relevance plus gaussian noise."""
    name = 'noisy_relevance'

    def __init__(self, noise=0.25):
        if noise < 0:
            raise ConfigError('policy noise must be nonnegative')
        self.noise = float(noise)

    def order(self, query, rng):
        scores = query.gammas + self.noise * rng.standard_normal(len(query.documents))
        return np.argsort(-scores, kind='stable')


class PermutationPolicy(RankingPolicy):
    name = 'permutation'

    def __init__(self, orders):
        self.orders = dict((qid, list(docs)) for qid, docs in orders.items())

    def order(self, query, rng):
        try:
            wanted = self.orders[query.query_id]
        except KeyError:
            raise ConfigError('no ranking supplied for query {}'.format(query.query_id))
        index = dict((doc_id, i) for i, doc_id in enumerate(query.doc_ids))
        return np.array([index[doc_id] for doc_id in wanted], dtype=int)


def make_policy(name, noise=0.25) -> RankingPolicy:
    if name == FixedPolicy.name:
        return FixedPolicy()
    if name == ShufflePolicy.name:
        return ShufflePolicy()
    if name == NoisyRelevancePolicy.name:
        return NoisyRelevancePolicy(noise)
    raise ConfigError('unknown ranking policy {!r}'.format(name))


def _simulate_shard(catalog, params, policy, timestamps, rng) -> List[SessionLog]:
    n = len(timestamps)
    if n == 0:
        return []
    K = params.num_positions
    q_idx = rng.choice(len(catalog.queries), size=n, p=catalog.weights)
    orders = [np.asarray(policy.order(catalog.queries[qi], rng))[:K] for qi in q_idx]
    gammas = np.zeros((n, K))
    shown = np.zeros((n, K), dtype=bool)
    for row, (qi, order) in enumerate(zip(q_idx, orders)):
        gammas[row, :len(order)] = catalog.queries[qi].gammas[order]
        shown[row, :len(order)] = True

    examined = np.zeros((n, K), dtype=bool)
    clicked = np.zeros((n, K), dtype=bool)
    clicks_above = np.zeros(n)
    for k in range(K):
        p_exam = params.theta[k] * params.anchor_factor ** clicks_above
        e = (rng.random(n) < p_exam) & shown[:, k]
        relevant = rng.random(n) < gammas[:, k]
        p_click = np.where(relevant, params.eps_plus[k], params.eps_minus[k])
        c = e & (rng.random(n) < p_click)
        examined[:, k] = e
        clicked[:, k] = c
        clicks_above += c

    display = np.where(examined,
                       rng.lognormal(EXAMINED_DISPLAY_MU, EXAMINED_DISPLAY_SIGMA, (n, K)),
                       rng.exponential(UNEXAMINED_DISPLAY_MEAN, (n, K)))
    dwell = np.where(clicked, rng.lognormal(DWELL_MU, DWELL_SIGMA, (n, K)), 0.0)
    display = np.round(display, 3)
    dwell = np.round(dwell, 3)

    sessions = []
    for row, (qi, order) in enumerate(zip(q_idx, orders)):
        query = catalog.queries[qi]
        ts = int(timestamps[row])
        docs = tuple(query.documents[j].doc_id for j in order)
        interactions = tuple(
            Interaction(query.query_id, doc_id, pos + 1, int(clicked[row, pos]), float(display[row, pos]),
                        float(dwell[row, pos]), ts)
            for pos, doc_id in enumerate(docs))
        truth = ExaminationTruth(tuple(bool(x) for x in examined[row, :len(docs)]))
        sessions.append(SessionLog(query.query_id, docs, interactions, truth))
    return sessions


def simulate_sessions(catalog: QueryCatalog, params: ClickModelParams, policy: RankingPolicy,
                      n_sessions: int, seed, start_hour=0, horizon_hours=672,
                      shards=1, jobs=1) -> Iterator[SessionLog]:
    """
    Stream ``n_sessions`` simulated sessions in timestamp order.

    Sessions are split into ``shards`` contiguous slices, each simulated from
    its own RNG stream spawned off ``seed``; ``jobs`` only sets how many
    shards run at once, so the stream is identical for any ``jobs``.
    """
    if n_sessions < 0:
        raise DomainError('n_sessions must be nonnegative')
    if not catalog.queries or any(not q.documents for q in catalog.queries):
        raise ConfigError('cannot simulate sessions over an empty catalog')
    if horizon_hours < 1 or shards < 1:
        raise ConfigError('horizon_hours and shards must be positive')

    streams = np.random.SeedSequence(seed).spawn(shards + 1)
    timestamps = np.sort(np.random.default_rng(streams[0]).integers(
        start_hour, start_hour + horizon_hours, size=n_sessions))
    slices = np.array_split(timestamps, shards)

    def run(i):
        return _simulate_shard(catalog, params, policy, slices[i], np.random.default_rng(streams[i + 1]))

    def stream():
        logger.debug('simulating sessions', n_sessions=n_sessions, shards=shards, policy=policy.name)
        if jobs > 1 and shards > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                for shard in pool.map(run, range(shards)):
                    yield from shard
        else:
            for i in range(shards):
                yield from run(i)

    return stream()


def generate_randomization_data(catalog: QueryCatalog, params: ClickModelParams, n: int, seed,
                                theta_top=1.0, start_hour=0, horizon_hours=672) -> List[RandomizationRecord]:
    """
    Top-1 randomization data: uniformly sampled pairs shown at position 1,
    examined with probability ``theta_top``; only the top-1 outcome is kept.
    """
    if n < 0:
        raise DomainError('n must be nonnegative')
    pairs = catalog.pairs()
    if not pairs:
        raise ConfigError('cannot draw randomization data from an empty catalog')
    if not 0.0 < theta_top <= 1.0:
        raise ConfigError('randomization theta_top must lie in (0, 1]')
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(pairs), size=n)
    gammas = np.array([catalog.gamma(*pairs[i]) for i in idx], dtype=float)
    p = theta_top * (params.eps_plus[0] * gammas + params.eps_minus[0] * (1.0 - gammas))
    clicks = rng.random(n) < p
    timestamps = rng.integers(start_hour, start_hour + horizon_hours, size=n)
    order = np.argsort(timestamps, kind='stable')
    return [RandomizationRecord(pairs[idx[i]][0], pairs[idx[i]][1], int(clicks[i]), int(timestamps[i]))
            for i in order]
