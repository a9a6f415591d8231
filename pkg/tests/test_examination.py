import numpy as np
import pytest

from drrel.click_sim import CatalogConfig, ClickModelParams, Interaction, SessionLog, ShufflePolicy, \
    generate_catalog, simulate_sessions
from drrel.examination import (ExaminationRetrainer, ExamFeatures, attach_examination, exam_curves,
                               exam_feature_matrix, exam_predict, exam_train, extract_exam_features,
                               holdout_auc, mine_exam_labels, roc_auc, session_features, split_holdout)
from drrel.exceptions import DegenerateDataError, DomainError
from drrel.gbdt import GbdtConfig
from drrel.schedule import Scheduler


def make_session(clicks, displays=None, ts=0, qid='q'):
    displays = displays or [6.0 if c else 0.5 for c in clicks]
    docs = tuple('{}-d{}'.format(qid, i) for i in range(len(clicks)))
    interactions = tuple(Interaction(qid, d, pos, c, t, 20.0 if c else 0.0, ts)
                         for pos, (d, c, t) in enumerate(zip(docs, clicks, displays), start=1))
    return SessionLog(qid, docs, interactions)


def simulated(anchor_factor=1.0, n=3000, seed=1):
    catalog = generate_catalog(CatalogConfig(30, 10), seed=seed)
    params = ClickModelParams.from_config({'num_positions': 10, 'theta_power': 1.0, 'eps_plus': 0.9,
                                           'eps_minus_top': 0.1, 'anchor_factor': anchor_factor})
    return list(simulate_sessions(catalog, params, ShufflePolicy(), n, seed=seed + 1))


@pytest.fixture(scope='module')
def sessions():
    return simulated()


@pytest.fixture(scope='module')
def model(sessions):
    return exam_train(mine_exam_labels(sessions, 10), GbdtConfig(n_trees=20, min_leaf=20))


def test_session_features():
    features = session_features(make_session([0, 1, 0, 0, 1]), num_positions=5)
    assert [f.as_tuple() for f in features] == [
        (1, 0, 0, 6, 2, 0),
        (2, 1, 0, 6, 2, 0),
        (3, 0, 1, 1, 2, 0),
        (4, 0, 1, 2, 2, 0),
        (5, 1, 1, 3, 2, 1),
    ]
    assert extract_exam_features(make_session([1, 0]), 2, num_positions=10).dist_prev_click == 1
    assert extract_exam_features(make_session([0, 0]), 1, num_positions=10).dist_prev_click == 11
    with pytest.raises(DomainError):
        extract_exam_features(make_session([0, 0]), 3)
    assert exam_feature_matrix(features).shape == (5, 6)
    assert exam_feature_matrix([]).shape == (0, 6)


def test_feature_invariants():
    with pytest.raises(DomainError):
        ExamFeatures(2, 0, 2, 1, 1, 0)
    with pytest.raises(DomainError):
        ExamFeatures(2, 0, 0, 0, 0, 0)


def test_mine_exam_labels_thresholds():
    session = make_session([1, 0, 0, 0, 0], displays=[6.0, 0.5, 3.0, 10.0, 0.2])
    examples = mine_exam_labels([session], 5)
    assert [(e.features.position, e.label) for e in examples] == [(1, 1), (2, 0), (4, 1), (5, 0)]
    assert len(mine_exam_labels([session], 5, positive_threshold=2.0)) == 5


def test_roc_auc():
    assert roc_auc([0, 0, 1, 1], [0.1, 0.4, 0.35, 0.8]) == pytest.approx(0.75)
    assert roc_auc([0, 1, 0, 1], [0.5] * 4) == pytest.approx(0.5)
    with pytest.raises(DegenerateDataError):
        roc_auc([1, 1], [0.2, 0.3])


def test_split_holdout():
    items = [make_session([0], ts=t) for t in range(10)]
    train, holdout = split_holdout(items, 0.2)
    assert [s.timestamp for s in holdout] == [8, 9]
    assert len(train) == 8
    assert split_holdout(items, 0.0)[1] == []


def test_exam_train_degenerate():
    only_clicked = [make_session([1, 1])]
    with pytest.raises(DegenerateDataError):
        exam_train(mine_exam_labels(only_clicked, 2), GbdtConfig())


def test_model_recovers_examination(sessions, model):
    train, holdout = split_holdout(sessions, 0.2)
    auc, n = holdout_auc(model, holdout, 10)
    assert n == sum(len(s.docs) for s in holdout)
    assert auc > 0.7
    features = session_features(sessions[0], 10)
    assert 0.0 < exam_predict(model, features[0]) < 1.0


def test_attach_examination(sessions, model):
    annotated = attach_examination(sessions[:20], model, 10)
    assert len(annotated) == 20
    for original, session in zip(sessions, annotated):
        e_hat = [i.e_hat for i in session.ordered()]
        assert all(0.0 < e < 1.0 for e in e_hat)
        assert session.clicks == original.clicks


def test_exam_curves(sessions, model):
    curves = exam_curves(model, sessions, 10)
    by_position = dict((index, mean_e) for index, mean_e, _ in curves.position)
    assert by_position[1] > by_position[5] > by_position[9]
    assert sum(n for _, _, n in curves.position) == 10 * len(sessions)
    assert all(index >= 1 for index, _, _ in curves.anchor_offset)
    rows = list(curves.rows())
    assert {r['curve'] for r in rows} == {'position', 'anchor_offset'}
    sharded = exam_curves(model, sessions, 10, shards=3, jobs=2)
    np.testing.assert_allclose([r[1] for r in sharded.position], [r[1] for r in curves.position])
    assert [r[2] for r in sharded.position] == [r[2] for r in curves.position]


def test_anchor_effect_lowers_curve_below_clicks():
    plain = simulated(1.0, n=2000, seed=5)
    anchored = simulated(0.5, n=2000, seed=5)
    config = GbdtConfig(n_trees=20, min_leaf=20)
    gaps = []
    for data in (plain, anchored):
        fitted = exam_train(mine_exam_labels(data, 10), config)
        gaps.append(exam_curves(fitted, data, 10).below_anchor_gap())
    assert gaps[1] < gaps[0]


def test_retrainer(sessions):
    retrainer = ExaminationRetrainer(GbdtConfig(n_trees=3), 10, every_hours=168)
    assert not ExaminationRetrainer(GbdtConfig(), 10, every_hours=0).attach(Scheduler())
    scheduler = Scheduler()
    assert retrainer.attach(scheduler)
    # nothing observed yet: a single-class refit keeps the old (absent) model
    scheduler.run_pending(0)
    assert retrainer.model is None and retrainer.retrained_at == []
    retrainer.observe(sessions)
    scheduler.run_pending(200)
    assert retrainer.retrained_at == [200]
    assert len(retrainer.model.trees) == 3
