"""
Gradient-boosted regression trees for binary classification (logistic loss).

Splits are found by exact search over each feature's distinct values, which
is cheap for the small-cardinality behavioral features the examination
model uses. Leaves take L2-regularised Newton steps scaled by the shrinkage
rate.
"""
import json
import math
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np
from scipy.special import expit

from drrel.cache import memoized_method
from drrel.exceptions import AlignmentError, ConfigError, DegenerateDataError, SchemaError
from drrel.log import logger
from drrel.mixins import ToDictMixin

GBDT_SCHEMA = 'drrel.gbdt/1'
_BACKTRACK_STEPS = 10
_MIN_GAIN = 1e-12


@dataclass(frozen=True)
class GbdtConfig(ToDictMixin):
    n_trees: int = 50
    max_depth: int = 3
    shrinkage: float = 0.1
    min_leaf: int = 20
    l2: float = 1.0

    def __post_init__(self):
        if self.n_trees < 0 or self.max_depth < 1 or self.min_leaf < 1:
            raise ConfigError('n_trees >= 0, max_depth >= 1 and min_leaf >= 1 are required')
        if self.shrinkage < 0 or self.l2 < 0:
            raise ConfigError('shrinkage and l2 must be nonnegative')

    @classmethod
    def from_config(cls, conf):
        return cls(int(conf.get('n_trees', 50)), int(conf.get('max_depth', 3)),
                   float(conf.get('shrinkage', 0.1)), int(conf.get('min_leaf', 20)), float(conf.get('l2', 1.0)))


@dataclass(frozen=True)
class TreeNode:
    feature: int = -1
    threshold: float = 0.0
    left: int = -1
    right: int = -1
    value: float = 0.0

    @property
    def is_leaf(self) -> bool:
        return self.feature < 0


@dataclass(frozen=True)
class RegressionTree:
    nodes: Tuple[TreeNode, ...]

    def predict(self, x: np.ndarray) -> np.ndarray:
        node = np.zeros(x.shape[0], dtype=int)
        feature = np.array([n.feature for n in self.nodes])
        threshold = np.array([n.threshold for n in self.nodes])
        left = np.array([n.left for n in self.nodes])
        right = np.array([n.right for n in self.nodes])
        active = feature[node] >= 0
        while np.any(active):
            rows = np.flatnonzero(active)
            cur = node[rows]
            go_left = x[rows, feature[cur]] <= threshold[cur]
            node[rows] = np.where(go_left, left[cur], right[cur])
            active = feature[node] >= 0
        return np.array([n.value for n in self.nodes])[node]

    def scaled(self, factor) -> "RegressionTree":
        return RegressionTree(tuple(TreeNode(n.feature, n.threshold, n.left, n.right, n.value * factor)
                                    for n in self.nodes))

    @property
    def depth(self) -> int:
        def walk(i):
            n = self.nodes[i]
            return 0 if n.is_leaf else 1 + max(walk(n.left), walk(n.right))
        return walk(0)

    def to_list(self):
        return [{'feature': n.feature, 'threshold': n.threshold, 'left': n.left, 'right': n.right,
                 'value': n.value} for n in self.nodes]

    @classmethod
    def from_list(cls, nodes):
        return cls(tuple(TreeNode(int(n['feature']), float(n['threshold']), int(n['left']), int(n['right']),
                                  float(n['value'])) for n in nodes))


def _best_split(x, g, h, rows, config: GbdtConfig):
    g_total, h_total = g[rows].sum(), h[rows].sum()
    parent = g_total ** 2 / (h_total + config.l2)
    best = None
    for f in range(x.shape[1]):
        values, inverse = np.unique(x[rows, f], return_inverse=True)
        if values.size < 2:
            continue
        g_left = np.cumsum(np.bincount(inverse, weights=g[rows]))[:-1]
        h_left = np.cumsum(np.bincount(inverse, weights=h[rows]))[:-1]
        n_left = np.cumsum(np.bincount(inverse))[:-1]
        n_right = rows.size - n_left
        gain = (g_left ** 2 / (h_left + config.l2)
                + (g_total - g_left) ** 2 / (h_total - h_left + config.l2) - parent)
        gain[(n_left < config.min_leaf) | (n_right < config.min_leaf)] = -np.inf
        i = int(np.argmax(gain))
        if gain[i] > _MIN_GAIN and (best is None or gain[i] > best[0]):
            best = (float(gain[i]), f, float((values[i] + values[i + 1]) / 2.0))
    return best


def build_tree(x, g, h, config: GbdtConfig) -> RegressionTree:
    """One regression tree on gradient/hessian statistics, grown depth-first."""
    nodes: List[dict] = []

    def grow(rows, depth):
        index = len(nodes)
        nodes.append(None)
        split = _best_split(x, g, h, rows, config) if depth < config.max_depth else None
        if split is None:
            nodes[index] = {'value': float(-g[rows].sum() / (h[rows].sum() + config.l2))}
            return index
        _, f, threshold = split
        mask = x[rows, f] <= threshold
        left = grow(rows[mask], depth + 1)
        right = grow(rows[~mask], depth + 1)
        nodes[index] = {'feature': f, 'threshold': threshold, 'left': left, 'right': right}
        return index

    grow(np.arange(x.shape[0]), 0)
    return RegressionTree(tuple(TreeNode(n.get('feature', -1), n.get('threshold', 0.0), n.get('left', -1),
                                         n.get('right', -1), n.get('value', 0.0)) for n in nodes))


def log_loss(y, margin) -> float:
    # log(1 + e^m) - y m, stable for large |m|
    return float(np.mean(np.logaddexp(0.0, margin) - y * margin))


@dataclass(eq=False)
class GbdtModel(ToDictMixin):
    base_score: float
    trees: List[RegressionTree] = field(default_factory=list)
    shrinkage: float = 0.1
    max_depth: int = 3
    n_features: int = 0
    train_losses: List[float] = field(default_factory=list, repr=False)

    def decision_function(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        margin = np.full(x.shape[0], self.base_score)
        for tree in self.trees:
            margin += tree.predict(x)
        return margin

    def predict_proba(self, x) -> np.ndarray:
        return np.clip(expit(self.decision_function(x)), 1e-12, 1.0 - 1e-12)

    @memoized_method
    def predict_one(self, features: tuple) -> float:
        return float(self.predict_proba(np.array(features, dtype=float)[None, :])[0])

    def to_json(self) -> str:
        return json.dumps({
            'schema_version': GBDT_SCHEMA,
            'base_score': self.base_score,
            'shrinkage': self.shrinkage,
            'max_depth': self.max_depth,
            'n_features': self.n_features,
            'trees': [t.to_list() for t in self.trees],
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text) -> "GbdtModel":
        payload = json.loads(text)
        if payload.get('schema_version') != GBDT_SCHEMA:
            raise SchemaError('GBDT schema {!r}, expected {!r}'.format(payload.get('schema_version'), GBDT_SCHEMA))
        return cls(float(payload['base_score']), [RegressionTree.from_list(t) for t in payload['trees']],
                   float(payload['shrinkage']), int(payload['max_depth']), int(payload['n_features']))


def gbdt_train(features, labels, config: GbdtConfig) -> GbdtModel:
    """
    Stagewise logistic boosting. A stage whose tree would raise the training
    loss is halved until it does not (up to ten times), else dropped, so the
    training loss never increases.
    """
    x = np.asarray(features, dtype=float)
    y = np.asarray(labels, dtype=float).reshape(-1)
    if x.ndim != 2 or x.shape[0] != y.size:
        raise AlignmentError('{} feature rows for {} labels'.format(x.shape[0] if x.ndim else 0, y.size))
    rate = y.mean() if y.size else 0.0
    if y.size == 0 or rate in (0.0, 1.0):
        raise DegenerateDataError('examination labels contain a single class')
    base = math.log(rate / (1.0 - rate))
    model = GbdtModel(base, [], config.shrinkage, config.max_depth, x.shape[1])
    margin = np.full(y.size, base)
    loss = log_loss(y, margin)
    model.train_losses.append(loss)
    for stage in range(config.n_trees):
        p = expit(margin)
        tree = build_tree(x, p - y, p * (1.0 - p), config).scaled(config.shrinkage)
        step = tree.predict(x)
        for _ in range(_BACKTRACK_STEPS):
            candidate = log_loss(y, margin + step)
            if candidate <= loss:
                break
            tree, step = tree.scaled(0.5), step * 0.5
        else:
            tree, step = tree.scaled(0.0), np.zeros_like(step)
            candidate = loss
            logger.debug('boosting stage dropped', stage=stage)
        margin = margin + step
        loss = candidate
        model.trees.append(tree)
        model.train_losses.append(loss)
    logger.debug('gbdt trained', trees=len(model.trees), loss=loss, rows=int(y.size))
    return model
