"""
Relevance imputation from query-document features.

A feed-forward model maps the pair's feature vector to gamma-imp in (0, 1)
and is fine-tuned on top-1 randomization clicks with cross-entropy. The
default :class:`SyntheticEncoder` derives the features from the catalog's
true relevance plus noise, so semantics predict relevance only imperfectly.
"""
import json
from abc import ABC, abstractmethod
from typing import Iterable, List, Sequence, Tuple

import numpy as np

from drrel.cache import memoized_method
from drrel.click_sim import QueryCatalog, RandomizationRecord
from drrel.exceptions import ConfigError, EmptyDataError, SchemaError
from drrel.log import logger
from drrel.mlp import PROB_EPS, MlpModel, TrainConfig, train_binary_mlp

IMPUTATION_SCHEMA = 'drrel.imputation/1'

_SIGNALS = (
    lambda g: g,
    lambda g: g ** 2,
    lambda g: np.sqrt(g),
    lambda g: 0.5 + 0.5 * np.sin(np.pi * (g - 0.5)),
    lambda g: np.log1p(4.0 * g) / np.log(5.0),
    lambda g: 0.5 + 0.5 * np.tanh(3.0 * (g - 0.5)) / np.tanh(1.5),
    lambda g: g ** 0.75,
    lambda g: 0.5 + 0.5 * (2.0 * g - 1.0) ** 3,
)


class FeatureEncoder(ABC):
    """Maps a (query_id, doc_id) pair to a fixed-width real vector."""
    name = ''
    dim = 0

    @abstractmethod
    def encode(self, query_id, doc_id) -> np.ndarray:
        pass

    def encode_many(self, pairs: Iterable[Tuple[str, str]]) -> np.ndarray:
        rows = [self.encode(q, d) for q, d in pairs]
        if not rows:
            return np.zeros((0, self.dim))
        return np.vstack(rows)

    @abstractmethod
    def spec(self) -> dict:
        pass


class SyntheticEncoder(FeatureEncoder):
    """
    ``n_signal`` noisy monotone transforms of the true relevance followed by
    pure-noise distractors, all drawn from the document's feature seed.
    """
    name = 'synthetic'

    def __init__(self, catalog: QueryCatalog, dim=16, n_signal=6, noise=0.35):
        if dim < 1 or not 0 <= n_signal <= min(dim, len(_SIGNALS)):
            raise ConfigError('encoder needs 0 <= n_signal <= min(dim, {})'.format(len(_SIGNALS)))
        if noise < 0:
            raise ConfigError('encoder noise must be nonnegative')
        self.catalog = catalog
        self.dim = int(dim)
        self.n_signal = int(n_signal)
        self.noise = float(noise)

    @memoized_method
    def encode(self, query_id, doc_id) -> np.ndarray:
        doc = self.catalog.document(query_id, doc_id)
        rng = np.random.default_rng(doc.feature_seed)
        signal = np.array([2.0 * f(doc.gamma) - 1.0 for f in _SIGNALS[:self.n_signal]])
        signal = signal + self.noise * rng.standard_normal(self.n_signal)
        vec = np.concatenate([signal, rng.standard_normal(self.dim - self.n_signal)])
        vec.setflags(write=False)
        return vec

    def spec(self):
        return {'name': self.name, 'dim': self.dim, 'n_signal': self.n_signal, 'noise': self.noise}

    @classmethod
    def from_spec(cls, spec, catalog):
        if spec.get('name') != cls.name:
            raise SchemaError('cannot rebuild encoder {!r}'.format(spec.get('name')))
        return cls(catalog, spec['dim'], spec['n_signal'], spec['noise'])

    @classmethod
    def from_config(cls, conf, catalog):
        return cls(catalog, int(conf.get('encoder_dim', 16)), int(conf.get('encoder_signal', 6)),
                   float(conf.get('encoder_noise', 0.8)))


def build_imputation_mlp(encoder: FeatureEncoder, hidden=(64, 32, 16), activation='tanh',
                         init='glorot', seed=0) -> MlpModel:
    return MlpModel.build(encoder.dim, hidden, 1, activation, 'sigmoid', init=init, seed=seed)


def imp_predict(model: MlpModel, encoder: FeatureEncoder, query_id, doc_id) -> float:
    p = float(model.predict(encoder.encode(query_id, doc_id))[0])
    return min(1.0 - PROB_EPS, max(PROB_EPS, p))


def imp_predict_many(model: MlpModel, encoder: FeatureEncoder, pairs: Sequence[Tuple[str, str]]) -> np.ndarray:
    pairs = list(pairs)
    if not pairs:
        return np.zeros(0)
    return np.clip(model.predict(encoder.encode_many(pairs))[:, 0], PROB_EPS, 1.0 - PROB_EPS)


def imp_train(model: MlpModel, encoder: FeatureEncoder, rand_data: Sequence[RandomizationRecord],
              config: TrainConfig) -> Tuple[MlpModel, List[float]]:
    """Fine-tune on randomization clicks; returns the model and its loss trace."""
    rand_data = list(rand_data)
    if not rand_data:
        raise EmptyDataError('imputation training needs randomization data')
    x = encoder.encode_many((r.query_id, r.doc_id) for r in rand_data)
    y = np.array([r.clicked for r in rand_data], dtype=float)
    model, losses = train_binary_mlp(model, x, y, config, name='imputation')
    logger.info('imputation model trained', records=len(rand_data), steps=len(losses),
                final_loss=losses[-1] if losses else None)
    return model, losses


class ImputationModel(object):
    """A trained MLP together with the encoder it reads features from."""

    def __init__(self, mlp: MlpModel, encoder: FeatureEncoder):
        self.mlp = mlp
        self.encoder = encoder

    def predict(self, query_id, doc_id) -> float:
        return imp_predict(self.mlp, self.encoder, query_id, doc_id)

    def predict_many(self, pairs) -> np.ndarray:
        return imp_predict_many(self.mlp, self.encoder, pairs)

    def freeze(self) -> "ImputationModel":
        self.mlp.freeze()
        return self

    def parameter_digest(self) -> str:
        return self.mlp.parameter_digest()

    def to_json(self) -> str:
        return json.dumps({'schema_version': IMPUTATION_SCHEMA, 'encoder': self.encoder.spec(),
                           'mlp': self.mlp.to_dict()}, sort_keys=True)

    @classmethod
    def from_json(cls, text, catalog: QueryCatalog) -> "ImputationModel":
        payload = json.loads(text)
        if payload.get('schema_version') != IMPUTATION_SCHEMA:
            raise SchemaError('imputation schema {!r}, expected {!r}'.format(
                payload.get('schema_version'), IMPUTATION_SCHEMA))
        return cls(MlpModel.from_dict(payload['mlp']), SyntheticEncoder.from_spec(payload['encoder'], catalog))
