"""
Online approximation of the doubly robust estimator.

Two networks read the dense click vector of a pair: an approximated affine
model (sigmoid head) and a trade-off coefficient model (tanh head). The
served score is ``zeta * gamma_imp + gamma_aff``. The trade-off model is
trained on randomization clicks turned into rewards ``2c - 1`` while the
imputation and affine models stay frozen. Pairs without click evidence
score with a unit coefficient, so they rank by imputation.
"""
import json
import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from drrel.click_sim import QueryCatalog
from drrel.exceptions import (AlignmentError, DivergenceError, DomainError, EmptyDataError,
                              FrozenParameterError, SchemaError, StaleArtifactError)
from drrel.imputation import ImputationModel
from drrel.log import logger
from drrel.mlp import MlpModel, TrainConfig, mlp_backward, mlp_forward, train_binary_mlp
from drrel.tracking import FEATURE_DIM, FEATURE_SCHEMA, feature_matrix

AFFINE_SCHEMA = 'drrel.approx-affine/1'
TRADEOFF_SCHEMA = 'drrel.tradeoff/1'
BUNDLE_SCHEMA = 'drrel.scorer-bundle/1'
CLAMP_FLOOR = 1e-6
# trade-off coefficient of pairs without click evidence
UNSEEN_ZETA = 1.0


class InputScaler(object):
    """Per-column standardisation fitted on training features."""

    def __init__(self, mean, scale):
        self.mean = np.asarray(mean, dtype=float)
        self.scale = np.asarray(scale, dtype=float)

    @classmethod
    def fit(cls, x) -> "InputScaler":
        x = np.asarray(x, dtype=float)
        std = x.std(axis=0)
        return cls(x.mean(axis=0), np.where(std > 1e-12, std, 1.0))

    @classmethod
    def identity(cls, dim) -> "InputScaler":
        return cls(np.zeros(dim), np.ones(dim))

    def transform(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.mean) / self.scale

    def to_dict(self):
        return {'mean': self.mean.tolist(), 'scale': self.scale.tolist()}

    @classmethod
    def from_dict(cls, payload):
        return cls(payload['mean'], payload['scale'])


class _ScaledMlp(object):
    schema = ''

    def __init__(self, mlp: MlpModel, scaler: Optional[InputScaler] = None):
        if mlp.input_dim != FEATURE_DIM:
            raise DomainError('{} reads {}-dim click vectors, got an MLP of width {}'.format(
                type(self).__name__, FEATURE_DIM, mlp.input_dim))
        self.mlp = mlp
        self.scaler = scaler or InputScaler.identity(FEATURE_DIM)

    def predict(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return self.mlp.predict(self.scaler.transform(x))[:, 0]

    def predict_one(self, x) -> float:
        return float(self.predict(x)[0])

    def freeze(self):
        self.mlp.freeze()
        return self

    @property
    def frozen(self) -> bool:
        return self.mlp.frozen

    def parameter_digest(self) -> str:
        return self.mlp.parameter_digest()

    def to_json(self) -> str:
        return json.dumps({'schema_version': self.schema, 'feature_schema': FEATURE_SCHEMA,
                           'scaler': self.scaler.to_dict(), 'mlp': self.mlp.to_dict()}, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        payload = json.loads(text)
        if payload.get('schema_version') != cls.schema:
            raise SchemaError('checkpoint schema {!r}, expected {!r}'.format(payload.get('schema_version'), cls.schema))
        if payload.get('feature_schema') != FEATURE_SCHEMA:
            raise SchemaError('checkpoint reads click features {!r}, expected {!r}'.format(
                payload.get('feature_schema'), FEATURE_SCHEMA))
        return cls(MlpModel.from_dict(payload['mlp']), InputScaler.from_dict(payload['scaler']))


class ApproxAffineModel(_ScaledMlp):
    """Click vector to gamma-aff in (0, 1)."""
    schema = AFFINE_SCHEMA

    @classmethod
    def build(cls, hidden=(64, 32), activation='tanh', init='glorot', seed=0, scaler=None):
        return cls(MlpModel.build(FEATURE_DIM, hidden, 1, activation, 'sigmoid', init=init, seed=seed), scaler)


class TradeoffModel(_ScaledMlp):
    """Click vector to the trade-off coefficient zeta in [-1, 1]."""
    schema = TRADEOFF_SCHEMA

    @classmethod
    def build(cls, hidden=(64, 32, 16), activation='tanh', init='glorot', seed=0, scaler=None):
        return cls(MlpModel.build(FEATURE_DIM, hidden, 1, activation, 'tanh', init=init, seed=seed), scaler)


def approx_affine_train(features, labels, config: TrainConfig, hidden=(64, 32), activation='tanh',
                        model: Optional[ApproxAffineModel] = None) -> Tuple[ApproxAffineModel, List[float]]:
    """Cross-entropy fit of randomization clicks on the click vector current at each record's timestamp."""
    x = np.asarray(features, dtype=float)
    y = np.asarray(labels, dtype=float).reshape(-1)
    if x.ndim != 2 or x.shape[0] != y.size:
        raise AlignmentError('{} feature rows for {} labels'.format(x.shape[0] if x.ndim else 0, y.size))
    if y.size == 0:
        raise EmptyDataError('approximated affine training needs randomization data')
    if model is None:
        model = ApproxAffineModel.build(hidden, activation, seed=config.seed, scaler=InputScaler.fit(x))
    _, losses = train_binary_mlp(model.mlp, model.scaler.transform(x), y, config, name='approx_affine')
    logger.info('approximated affine model trained', records=int(y.size), steps=len(losses),
                final_loss=losses[-1] if losses else None)
    return model, losses


def reward_weighted_log_loss(zeta, gamma_imp, gamma_aff, reward, floor=CLAMP_FLOOR,
                             l2=0.0) -> Tuple[float, np.ndarray]:
    """
    Reward-weighted log-likelihood of the combined score and its gradient
    with respect to zeta. The score is clamped to ``[floor, 1]`` inside the
    log; outside that range the gradient is zero. ``l2`` adds
    ``l2 * mean(zeta ** 2)``, which pulls the coefficient toward zero.
    """
    zeta = np.asarray(zeta, dtype=float).reshape(-1)
    gamma_imp = np.asarray(gamma_imp, dtype=float).reshape(-1)
    gamma_aff = np.asarray(gamma_aff, dtype=float).reshape(-1)
    reward = np.asarray(reward, dtype=float).reshape(-1)
    n = zeta.size
    if not (gamma_imp.size == gamma_aff.size == reward.size == n):
        raise AlignmentError('trade-off inputs must be aligned')
    if l2 < 0:
        raise DomainError('trade-off penalty must be non-negative')
    value = zeta * gamma_imp + gamma_aff
    clamped = np.clip(value, floor, 1.0)
    loss = float(-np.mean(reward * np.log(clamped)) + l2 * np.mean(zeta ** 2))
    inside = (value > floor) & (value < 1.0)
    grad = np.where(inside, -reward * gamma_imp / np.where(inside, value, 1.0) / n, 0.0)
    return loss, grad + 2.0 * l2 * zeta / n


def tradeoff_train(features, clicks, gamma_imp, imputation: ImputationModel, affine: ApproxAffineModel,
                   config: TrainConfig, hidden=(64, 32, 16), activation='tanh', floor=CLAMP_FLOOR, l2=0.0,
                   model: Optional[TradeoffModel] = None) -> Tuple[TradeoffModel, List[float]]:
    """
    Train the trade-off model with the imputation and affine outputs held
    constant. Both collaborators are frozen for the duration; their
    parameter digests are compared before and after and any change aborts.

    ``gamma_imp`` are the imputation predictions for the records' pairs.
    Records with a zero click vector are skipped: unseen pairs always take
    :data:`UNSEEN_ZETA`.
    """
    x = np.asarray(features, dtype=float)
    c = np.asarray(clicks, dtype=float).reshape(-1)
    g_imp = np.asarray(gamma_imp, dtype=float).reshape(-1)
    if x.ndim != 2 or not (x.shape[0] == c.size == g_imp.size):
        raise AlignmentError('trade-off training inputs must be aligned')
    seen = np.any(x, axis=1)
    if not np.any(seen):
        raise EmptyDataError('trade-off training needs randomization data with click evidence')
    x, c, g_imp = x[seen], c[seen], g_imp[seen]
    imputation.freeze()
    affine.freeze()
    digests = (imputation.parameter_digest(), affine.parameter_digest())

    g_aff = affine.predict(x)
    reward = 2.0 * c - 1.0
    if model is None:
        model = TradeoffModel.build(hidden, activation, seed=config.seed, scaler=InputScaler.fit(x))
    xs = model.scaler.transform(x)
    rng = np.random.default_rng(config.seed)
    losses, step = [], 0
    for epoch in range(config.epochs):
        order = rng.permutation(c.size)
        for start in range(0, c.size, config.batch_size):
            batch = order[start:start + config.batch_size]
            out, cache = mlp_forward(model.mlp, xs[batch])
            loss, grad = reward_weighted_log_loss(out[:, 0], g_imp[batch], g_aff[batch], reward[batch], floor, l2)
            if not math.isfinite(loss):
                raise DivergenceError(step, loss)
            model.mlp.apply_gradients(mlp_backward(model.mlp, cache, grad[:, None]), config.learning_rate(step))
            losses.append(loss)
            step += 1
        logger.debug('epoch finished', model='tradeoff', epoch=epoch, loss=losses[-1] if losses else None)

    if (imputation.parameter_digest(), affine.parameter_digest()) != digests:
        raise FrozenParameterError('a frozen model changed during trade-off training')
    logger.info('trade-off model trained', records=int(c.size), skipped=int(seen.size - c.size), steps=len(losses),
                final_loss=losses[-1] if losses else None)
    return model, losses


@dataclass(frozen=True)
class DrScore:
    value: float
    zeta: float
    gamma_imp: float
    gamma_aff: float
    clamped_value: float

    def __post_init__(self):
        if self.value != self.zeta * self.gamma_imp + self.gamma_aff:
            raise DomainError('score does not compose from its components')


def _compose(zeta, gamma_imp, gamma_aff, floor=CLAMP_FLOOR) -> DrScore:
    value = zeta * gamma_imp + gamma_aff
    return DrScore(value, zeta, gamma_imp, gamma_aff, min(1.0, max(floor, value)))


def dr_score(query_id, doc_id, dicts, imputation: ImputationModel, affine: ApproxAffineModel,
             tradeoff: TradeoffModel, min_impressions=0) -> DrScore:
    return score_pairs([(query_id, doc_id)], dicts, imputation, affine, tradeoff, min_impressions)[0]


def score_pairs(keys: Sequence[Tuple[str, str]], dicts, imputation: ImputationModel, affine: ApproxAffineModel,
                tradeoff: TradeoffModel, min_impressions=0) -> List[DrScore]:
    """Batch form of :func:`dr_score`. Unseen pairs take :data:`UNSEEN_ZETA`."""
    keys = list(keys)
    if not keys:
        return []
    x = feature_matrix(dicts, keys, min_impressions)
    zeta = np.where(np.any(x, axis=1), tradeoff.predict(x), UNSEEN_ZETA)
    g_aff = affine.predict(x)
    g_imp = imputation.predict_many(keys)
    return [_compose(float(z), float(i), float(a)) for z, i, a in zip(zeta, g_imp, g_aff)]


def rank_documents(query_id, doc_ids: Sequence[str], scorer: Callable[[str, str], float]) -> List[str]:
    """Descending score, ties broken by ascending doc_id."""
    doc_ids = list(doc_ids)
    if not doc_ids:
        raise DomainError('nothing to rank for query {}'.format(query_id))
    scores = {}
    for doc_id in doc_ids:
        score = scorer(query_id, doc_id)
        scores[doc_id] = score.value if isinstance(score, DrScore) else float(score)
    return sorted(doc_ids, key=lambda d: (-scores[d], d))


class ScorerBundle(object):
    """
    The three scoring models, loaded from their checkpoint files and tied
    to the click-feature schema and support floor they were trained on.
    """

    def __init__(self, imputation: ImputationModel, affine: ApproxAffineModel, tradeoff: TradeoffModel,
                 min_impressions=0):
        self.imputation = imputation
        self.affine = affine
        self.tradeoff = tradeoff
        self.min_impressions = int(min_impressions)

    def score(self, query_id, doc_id, dicts) -> DrScore:
        return dr_score(query_id, doc_id, dicts, self.imputation, self.affine, self.tradeoff, self.min_impressions)

    def score_pairs(self, keys, dicts) -> List[DrScore]:
        return score_pairs(keys, dicts, self.imputation, self.affine, self.tradeoff, self.min_impressions)

    def manifest(self, files) -> dict:
        return {
            'schema_version': BUNDLE_SCHEMA,
            'feature_schema': FEATURE_SCHEMA,
            'min_impressions': self.min_impressions,
            'files': dict(files),
            'digests': {
                'imputation': self.imputation.parameter_digest(),
                'affine': self.affine.parameter_digest(),
                'tradeoff': self.tradeoff.parameter_digest(),
            },
        }

    @classmethod
    def load(cls, manifest: dict, reader: Callable[[str], str], catalog: QueryCatalog) -> "ScorerBundle":
        """``reader(file_name)`` returns the checkpoint JSON stored under that name."""
        if manifest.get('schema_version') != BUNDLE_SCHEMA:
            raise SchemaError('scorer bundle schema {!r}, expected {!r}'.format(
                manifest.get('schema_version'), BUNDLE_SCHEMA))
        if manifest.get('feature_schema') != FEATURE_SCHEMA:
            raise SchemaError('scorer bundle built for click features {!r}, expected {!r}'.format(
                manifest.get('feature_schema'), FEATURE_SCHEMA))
        read = lambda name: reader(manifest['files'][name])
        bundle = cls(ImputationModel.from_json(read('imputation'), catalog),
                     ApproxAffineModel.from_json(read('affine')), TradeoffModel.from_json(read('tradeoff')),
                     manifest.get('min_impressions', 0))
        for name, model in (('imputation', bundle.imputation), ('affine', bundle.affine),
                            ('tradeoff', bundle.tradeoff)):
            if model.parameter_digest() != manifest['digests'][name]:
                raise StaleArtifactError('{} checkpoint does not match the scorer bundle'.format(name))
        return bundle
