"""
Examination model: labels mined from display time, click-history features,
a boosted-tree predictor of the examination probability, and the
position/anchor-click curves of its predictions.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import rankdata

from drrel.click_sim import SessionLog
from drrel.exceptions import DegenerateDataError, DomainError
from drrel.gbdt import GbdtConfig, GbdtModel, gbdt_train
from drrel.log import logger
from drrel.mixins import ToDictMixin

FEATURE_NAMES = ('position', 'clicked', 'clicks_before', 'dist_prev_click', 'session_click_total',
                 'is_last_on_page')
POSITIVE_THRESHOLD_S = 5.0
NEGATIVE_THRESHOLD_S = 1.0


@dataclass(frozen=True)
class ExamFeatures(ToDictMixin):
    position: int
    clicked: int
    clicks_before: int
    dist_prev_click: int
    session_click_total: int
    is_last_on_page: int

    def __post_init__(self):
        if self.clicks_before > self.session_click_total:
            raise DomainError('clicks_before exceeds the session click total')
        if self.dist_prev_click < 1:
            raise DomainError('dist_prev_click must be at least 1')

    def as_tuple(self) -> Tuple[int, ...]:
        return (self.position, self.clicked, self.clicks_before, self.dist_prev_click,
                self.session_click_total, self.is_last_on_page)


@dataclass(frozen=True)
class ExamLabeledExample:
    features: ExamFeatures
    label: int


def session_features(session: SessionLog, num_positions: int) -> List[ExamFeatures]:
    """Features of every displayed position, in position order."""
    clicks = session.clicks
    total = sum(clicks)
    sentinel = num_positions + 1
    out, before, last_click = [], 0, None
    for pos, clicked in enumerate(clicks, start=1):
        dist = sentinel if last_click is None else pos - last_click
        out.append(ExamFeatures(pos, clicked, before, dist, total, int(pos == len(clicks))))
        if clicked:
            before += 1
            last_click = pos
    return out


def extract_exam_features(session: SessionLog, position: int, num_positions: Optional[int] = None) -> ExamFeatures:
    """
    Features of one displayed position, computed from the session's click
    pattern only. ``dist_prev_click`` is ``num_positions + 1`` without a
    click above.
    """
    if not 1 <= position <= len(session.docs):
        raise DomainError('position {} was not displayed in the session'.format(position))
    return session_features(session, num_positions or len(session.docs))[position - 1]


def mine_exam_labels(sessions: Iterable[SessionLog], num_positions: int,
                     positive_threshold=POSITIVE_THRESHOLD_S,
                     negative_threshold=NEGATIVE_THRESHOLD_S) -> List[ExamLabeledExample]:
    """Display time above the positive threshold labels 1, below the negative one 0; the band between is dropped."""
    examples = []
    for session in sessions:
        features = session_features(session, num_positions)
        for inter in session.ordered():
            t = inter.display_time_s
            if t > positive_threshold:
                examples.append(ExamLabeledExample(features[inter.position - 1], 1))
            elif t < negative_threshold:
                examples.append(ExamLabeledExample(features[inter.position - 1], 0))
    return examples


def exam_feature_matrix(features: Sequence[ExamFeatures]) -> np.ndarray:
    if not features:
        return np.zeros((0, len(FEATURE_NAMES)))
    return np.array([f.as_tuple() for f in features], dtype=float)


def exam_train(examples: Sequence[ExamLabeledExample], config: GbdtConfig) -> GbdtModel:
    x = exam_feature_matrix([e.features for e in examples])
    y = np.array([e.label for e in examples], dtype=float)
    model = gbdt_train(x, y, config)
    logger.info('examination model trained', examples=len(examples), positives=int(y.sum()),
                trees=len(model.trees), loss=model.train_losses[-1])
    return model


def exam_predict(model: GbdtModel, features: ExamFeatures) -> float:
    return model.predict_one(features.as_tuple())


def attach_examination(sessions: Iterable[SessionLog], model: GbdtModel, num_positions: int) -> List[SessionLog]:
    """Annotate every interaction with its predicted examination probability."""
    out = []
    for session in sessions:
        e_hat = [exam_predict(model, f) for f in session_features(session, num_positions)]
        out.append(session.with_examination(e_hat))
    return out


def roc_auc(labels, scores) -> float:
    """Mann-Whitney AUC, ties counted half."""
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateDataError('AUC needs both classes')
    ranks = rankdata(np.asarray(scores, dtype=float))
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def split_holdout(sessions: Sequence[SessionLog], fraction: float) -> Tuple[List[SessionLog], List[SessionLog]]:
    """Time-ordered split: the last ``fraction`` of sessions is held out."""
    sessions = list(sessions)
    cut = len(sessions) - int(round(len(sessions) * fraction))
    return sessions[:cut], sessions[cut:]


def holdout_auc(model: GbdtModel, sessions: Sequence[SessionLog], num_positions: int) -> Tuple[float, int]:
    """AUC of the predictions against the hidden examination bits."""
    labels, scores = [], []
    for session in sessions:
        if session.truth is None:
            continue
        for f, examined in zip(session_features(session, num_positions), session.truth.examined):
            labels.append(examined)
            scores.append(exam_predict(model, f))
    return roc_auc(labels, scores), len(labels)


@dataclass
class CurveSums:
    """Mergeable partial sums behind the examination curves."""
    num_positions: int
    by_position: np.ndarray = None
    by_position_n: np.ndarray = None
    by_offset: np.ndarray = None
    by_offset_n: np.ndarray = None
    below_anchor: np.ndarray = None
    below_anchor_n: np.ndarray = None

    def __post_init__(self):
        size = self.num_positions + 1
        for name in ('by_position', 'by_position_n', 'by_offset', 'by_offset_n', 'below_anchor', 'below_anchor_n'):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(size))

    def add(self, features: Sequence[ExamFeatures], e_hat: Sequence[float]):
        for f, e in zip(features, e_hat):
            self.by_position[f.position] += e
            self.by_position_n[f.position] += 1
            if f.clicks_before > 0:
                self.by_offset[f.dist_prev_click] += e
                self.by_offset_n[f.dist_prev_click] += 1
                self.below_anchor[f.position] += e
                self.below_anchor_n[f.position] += 1

    def merge(self, other: "CurveSums") -> "CurveSums":
        return CurveSums(self.num_positions, *(getattr(self, n) + getattr(other, n) for n in (
            'by_position', 'by_position_n', 'by_offset', 'by_offset_n', 'below_anchor', 'below_anchor_n')))


@dataclass(frozen=True)
class ExamCurves(ToDictMixin):
    # rows of (index, mean_e, n)
    position: Tuple[Tuple[int, float, int], ...]
    anchor_offset: Tuple[Tuple[int, float, int], ...]
    # rows of (position, mean_e below an anchor click, unconditional mean_e, n below)
    below_anchor: Tuple[Tuple[int, float, float, int], ...] = field(default=())

    def rows(self):
        for curve in ('position', 'anchor_offset'):
            for index, mean_e, n in getattr(self, curve):
                yield {'curve': curve, 'index': index, 'mean_e': mean_e, 'n': n}

    def below_anchor_gap(self) -> float:
        """Count-weighted mean of (below-anchor mean - unconditional mean) over positions."""
        n = sum(r[3] for r in self.below_anchor)
        if n == 0:
            return 0.0
        return float(sum((r[1] - r[2]) * r[3] for r in self.below_anchor) / n)


def _curve_rows(sums, counts):
    return tuple((i, float(sums[i] / counts[i]), int(counts[i])) for i in range(1, counts.size) if counts[i] > 0)


def exam_curves(model: GbdtModel, sessions: Sequence[SessionLog], num_positions: int, shards=1, jobs=1) -> ExamCurves:
    """
    Mean predicted examination by position, and by offset below the most
    recent click above (anchor curve, positions strictly below a click only).
    """
    sessions = list(sessions)

    def run(part):
        sums = CurveSums(num_positions)
        for session in part:
            features = session_features(session, num_positions)
            sums.add(features, [exam_predict(model, f) for f in features])
        return sums

    parts = [sessions[i::max(1, shards)] for i in range(max(1, shards))]
    if jobs > 1 and len(parts) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            partials = list(pool.map(run, parts))
    else:
        partials = [run(p) for p in parts]
    total = partials[0]
    for p in partials[1:]:
        total = total.merge(p)

    below = tuple((k, float(total.below_anchor[k] / total.below_anchor_n[k]),
                   float(total.by_position[k] / total.by_position_n[k]), int(total.below_anchor_n[k]))
                  for k in range(1, num_positions + 1) if total.below_anchor_n[k] > 0)
    return ExamCurves(_curve_rows(total.by_position, total.by_position_n),
                      _curve_rows(total.by_offset, total.by_offset_n), below)


class ExaminationRetrainer(object):
    """
    Periodic retraining on a simulated clock. Sessions are observed as they
    arrive; every ``every_hours`` the model is refit on everything seen up
    to the clock. A refit without both label classes keeps the old model.
    """

    def __init__(self, config: GbdtConfig, num_positions: int, every_hours: int,
                 positive_threshold=POSITIVE_THRESHOLD_S, negative_threshold=NEGATIVE_THRESHOLD_S,
                 model: Optional[GbdtModel] = None):
        self.config = config
        self.num_positions = num_positions
        self.every_hours = int(every_hours)
        self.thresholds = (positive_threshold, negative_threshold)
        self.model = model
        self.retrained_at: List[int] = []
        self._seen: List[SessionLog] = []

    def observe(self, sessions: Iterable[SessionLog]):
        self._seen.extend(sessions)

    def retrain(self, clock: int):
        sessions = [s for s in self._seen if s.timestamp <= clock]
        examples = mine_exam_labels(sessions, self.num_positions, *self.thresholds)
        try:
            self.model = exam_train(examples, self.config)
        except DegenerateDataError:
            logger.warning('examination retrain skipped, single label class', clock=clock, examples=len(examples))
            return
        self.retrained_at.append(clock)

    def attach(self, scheduler) -> bool:
        """Register on ``scheduler``; ``every_hours`` of 0 disables retraining."""
        if self.every_hours <= 0:
            return False
        scheduler.every(self.every_hours, 'h').tag('exam-retrain').do(self.retrain)
        return True
