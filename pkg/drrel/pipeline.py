"""
Experiment stages. Each stage reads the artifacts of its upstream stages
from the experiment directory, verifies they belong to the current
configuration, and writes its own artifacts plus a manifest.

    simulate -> train-exam -> train-imp -> train-affine -> train-tradeoff
             -> score -> evaluate;   verify-theory is standalone.
"""
import dataclasses
import hashlib
import json
from typing import Callable, Dict, List

import numpy as np

from drrel.artifacts import ArtifactStore, StageRecorder, canonical_json
from drrel.click_sim import (CATALOG_SCHEMA, CatalogConfig, ClickModelParams, ExaminationTruth, QueryCatalog,
                             RandomizationRecord, SessionLog, ShufflePolicy, generate_catalog,
                             generate_randomization_data, make_policy, simulate_sessions)
from drrel.estimators import (EstimatorParams, affine_estimate, dr_estimate, estimate_theta_from_randomized_logs,
                              group_interactions, ipw_estimate, naive_ctr)
from drrel.examination import (ExaminationRetrainer, attach_examination, exam_curves, exam_train, holdout_auc,
                               mine_exam_labels, split_holdout)
from drrel.exceptions import AcceptanceError, AlignmentError, DegenerateDataError, FrozenParameterError
from drrel.gbdt import GBDT_SCHEMA, GbdtConfig, GbdtModel
from drrel.imputation import IMPUTATION_SCHEMA, ImputationModel, SyntheticEncoder, build_imputation_mlp, imp_train
from drrel.metrics import (BucketSpec, ReportRow, bucketed_report, judge_ranking, per_query_metrics, simulated_gsb,
                           write_report_csv)
from drrel.mlp import TrainConfig
from drrel.neural_dr import (AFFINE_SCHEMA, BUNDLE_SCHEMA, TRADEOFF_SCHEMA, ApproxAffineModel, ScorerBundle,
                             approx_affine_train, rank_documents, tradeoff_train)
from drrel.schedule import Scheduler
from drrel.tracking import (FEATURE_NAMES, FEATURE_SCHEMA, SESSION_LOG_SCHEMA, SNAPSHOT_SCHEMA, TrackerSnapshot,
                            features_at_timestamps, parse_click_log)
from drrel.verification import THEORY_COLUMNS, run_theory_grid, theory_report_csv

STAGES = ('simulate', 'train-exam', 'train-imp', 'train-affine', 'train-tradeoff', 'score', 'evaluate',
          'verify-theory')
SYSTEMS = ('imputation', 'affine_only', 'dr', 'naive_ctr', 'ipw', 'affine_estimator', 'dr_estimator')

RECORD_SCHEMA = 'drrel.records/1'
REPORT_SCHEMA = 'drrel.report/1'
SCORES_SCHEMA = 'drrel.scores/1'

# model checkpoints: file -> (kind, schema)
CHECKPOINTS = {
    'exam_model.json': ('exam_model', GBDT_SCHEMA),
    'imputation_model.json': ('imputation_model', IMPUTATION_SCHEMA),
    'affine_model.json': ('affine_model', AFFINE_SCHEMA),
    'tradeoff_model.json': ('tradeoff_model', TRADEOFF_SCHEMA),
}


def derive_seed(seed, label) -> int:
    """A stable 32-bit seed per (experiment seed, purpose)."""
    digest = hashlib.sha256('{}:{}'.format(seed, label).encode('utf-8')).hexdigest()
    return int(digest[:8], 16)


def _fmt(value) -> str:
    return '{:.6f}'.format(value)


class Experiment(object):
    """One configured experiment bound to its output directory."""

    def __init__(self, settings, out_dir, jobs=None):
        self.settings = settings
        self.conf = settings.as_dict()
        self.seed = int(self.conf['seed'])
        self.jobs = max(1, int(jobs if jobs is not None else self.conf.get('jobs', 1)))
        self.store = ArtifactStore(out_dir, settings.config_hash, self.seed)
        self.click_model = ClickModelParams.from_config(self.conf['click_model'])

    @property
    def num_positions(self) -> int:
        return self.click_model.num_positions

    @property
    def shards(self) -> int:
        return int(self.conf['simulation'].get('shards', 1))

    def seed_for(self, label) -> int:
        return derive_seed(self.seed, label)

    def train_config(self, section) -> TrainConfig:
        return TrainConfig.from_config(self.conf[section], self.seed_for(section))

    def stage(self, name, inputs=()) -> StageRecorder:
        return StageRecorder(self.store, name, inputs)

    def read_checkpoint(self, name) -> str:
        kind, schema = CHECKPOINTS[name]
        return canonical_json(self.store.read_json(name, kind, schema))

    def write_checkpoint(self, name, text):
        kind, schema = CHECKPOINTS[name]
        return self.store.write_json(name, kind, schema, json.loads(text))

    def load_catalog(self) -> QueryCatalog:
        return QueryCatalog.from_json(canonical_json(self.store.read_json('catalog.json', 'catalog', CATALOG_SCHEMA)))

    def load_sessions(self, name='sessions.jsonl') -> List[SessionLog]:
        kind = name.split('.')[0]
        return parse_click_log(self.store.read_jsonl_lines(name, kind, SESSION_LOG_SCHEMA)).sessions

    def load_sessions_with_truth(self) -> List[SessionLog]:
        sessions = self.load_sessions()
        truth = self.store.read_jsonl('examination_truth.jsonl', 'examination_truth', RECORD_SCHEMA)
        if len(truth) != len(sessions):
            raise AlignmentError('{} examination records for {} sessions'.format(len(truth), len(sessions)))
        return [dataclasses.replace(s, truth=ExaminationTruth(tuple(bool(x) for x in t['examined'])))
                for s, t in zip(sessions, truth)]

    def load_randomization(self) -> List[RandomizationRecord]:
        return [RandomizationRecord(r['query_id'], r['doc_id'], int(r['click']), int(r['ts']))
                for r in self.store.read_jsonl('randomization.jsonl', 'randomization', RECORD_SCHEMA)]


def simulate(exp: Experiment):
    sim = exp.conf['simulation']
    horizon = int(sim['horizon_hours'])
    with exp.stage('simulate') as rec:
        catalog = generate_catalog(CatalogConfig.from_config(exp.conf['catalog']), exp.seed_for('catalog'))
        policy = make_policy(sim['logging_policy'], float(sim.get('policy_noise', 0.25)))
        sessions = list(simulate_sessions(catalog, exp.click_model, policy, int(sim['n_sessions']),
                                          exp.seed_for('sessions'), horizon_hours=horizon, shards=exp.shards,
                                          jobs=exp.jobs))
        randomized = list(simulate_sessions(catalog, exp.click_model, ShufflePolicy(),
                                            int(sim['n_randomized_sessions']), exp.seed_for('randomized'),
                                            horizon_hours=horizon, shards=exp.shards, jobs=exp.jobs))
        records = generate_randomization_data(catalog, exp.click_model, int(sim['n_randomization']),
                                              exp.seed_for('randomization'),
                                              float(sim.get('randomization_theta_top', 1.0)), horizon_hours=horizon)

        exp.store.write_json(rec.output('catalog.json'), 'catalog', CATALOG_SCHEMA, json.loads(catalog.to_json()))
        exp.store.write_jsonl(rec.output('sessions.jsonl'), 'sessions', SESSION_LOG_SCHEMA,
                              (s.to_json() for s in sessions))
        exp.store.write_jsonl(rec.output('randomized_sessions.jsonl'), 'randomized_sessions', SESSION_LOG_SCHEMA,
                              (s.to_json() for s in randomized))
        exp.store.write_jsonl(rec.output('randomization.jsonl'), 'randomization', RECORD_SCHEMA,
                              ({'query_id': r.query_id, 'doc_id': r.doc_id, 'click': r.clicked, 'ts': r.timestamp}
                               for r in records))
        exp.store.write_jsonl(rec.output('examination_truth.jsonl'), 'examination_truth', RECORD_SCHEMA,
                              ({'query_id': s.query_id, 'examined': [int(x) for x in s.truth.examined]}
                               for s in sessions))
        rec.log.info('simulated', queries=len(catalog.queries), sessions=len(sessions),
                     randomized_sessions=len(randomized), randomization=len(records))


def _exam_thresholds(conf):
    return float(conf['positive_threshold_s']), float(conf['negative_threshold_s'])


def train_exam(exp: Experiment):
    conf = exp.conf['examination']
    k = exp.num_positions
    with exp.stage('train-exam', ['sessions.jsonl', 'examination_truth.jsonl']) as rec:
        sessions = exp.load_sessions_with_truth()
        train, holdout = split_holdout(sessions, float(conf['holdout_fraction']))
        examples = mine_exam_labels(train, k, *_exam_thresholds(conf))
        model = exam_train(examples, GbdtConfig.from_config(conf))
        try:
            auc, n_holdout = holdout_auc(model, holdout, k)
        except DegenerateDataError:
            rec.log.warning('holdout has a single examination class, AUC not reported', sessions=len(holdout))
            auc, n_holdout = None, 0
        curves = exam_curves(model, sessions, k, shards=exp.shards, jobs=exp.jobs)

        # the last position may carry an uptick
        position_curve = [mean for index, mean, _ in curves.position if index < k]
        decreasing = all(b < a for a, b in zip(position_curve, position_curve[1:]))
        report = {
            'auc': auc,
            'holdout_interactions': n_holdout,
            'examples': len(examples),
            'positive_examples': sum(e.label for e in examples),
            'trees': len(model.trees),
            'position_curve_decreasing': decreasing,
            'below_anchor_gap': curves.below_anchor_gap(),
        }
        exp.write_checkpoint(rec.output('exam_model.json'), model.to_json())
        rows = [(r['curve'], r['index'], _fmt(r['mean_e']), r['n']) for r in curves.rows()]
        rows.extend(('below_anchor', pos, _fmt(mean_below), n) for pos, mean_below, _, n in curves.below_anchor)
        exp.store.write_csv(rec.output('exam_curves.csv'), 'exam_curves', REPORT_SCHEMA,
                            ('curve', 'index', 'mean_e', 'n'), rows)
        exp.store.write_json(rec.output('exam_report.json'), 'exam_report', REPORT_SCHEMA, report)
        rec.log.info('examination model trained', **report)


def train_imp(exp: Experiment):
    conf = exp.conf['imputation']
    with exp.stage('train-imp', ['catalog.json', 'randomization.jsonl']) as rec:
        catalog = exp.load_catalog()
        encoder = SyntheticEncoder.from_config(conf, catalog)
        mlp = build_imputation_mlp(encoder, tuple(conf['hidden']), conf['activation'],
                                   seed=exp.seed_for('imputation-init'))
        mlp, _ = imp_train(mlp, encoder, exp.load_randomization(), exp.train_config('imputation'))
        exp.write_checkpoint(rec.output('imputation_model.json'), ImputationModel(mlp, encoder).to_json())


def examination_hook(exp: Experiment, model: GbdtModel) -> Callable:
    """
    Per-hour annotation of sessions with predicted examination. With
    ``retrain_every_hours`` > 0 the model is refit on the simulated clock
    from the sessions replayed so far.
    """
    conf = exp.conf['examination']
    retrainer = ExaminationRetrainer(GbdtConfig.from_config(conf), exp.num_positions,
                                     int(conf.get('retrain_every_hours', 0)), *_exam_thresholds(conf), model=model)
    scheduler = Scheduler()
    retrainer.attach(scheduler)

    def hook(hour, batch):
        retrainer.observe(batch)
        scheduler.run_pending(hour)
        return attach_examination(batch, retrainer.model, exp.num_positions)

    hook.retrainer = retrainer
    return hook


def train_affine(exp: Experiment):
    conf = exp.conf['affine']
    inputs = ['catalog.json', 'sessions.jsonl', 'randomization.jsonl', 'exam_model.json']
    with exp.stage('train-affine', inputs) as rec:
        exam_model = GbdtModel.from_json(exp.read_checkpoint('exam_model.json'))
        sessions = exp.load_sessions()
        records = exp.load_randomization()
        annotated: List[SessionLog] = []
        hook = examination_hook(exp, exam_model)

        def annotate(hour, batch):
            batch = hook(hour, batch)
            annotated.extend(batch)
            return batch

        requests = [(r.timestamp, r.query_id, r.doc_id) for r in records]
        features, tracker = features_at_timestamps(sessions, requests, hook=annotate,
                                                   min_impressions=exp.conf['tracking']['min_impressions'])
        affine, _ = approx_affine_train(features, [r.clicked for r in records], exp.train_config('affine'),
                                        tuple(conf['hidden']), conf['activation'])

        exp.write_checkpoint(rec.output('affine_model.json'), affine.to_json())
        exp.store.write_json(rec.output('tracking_snapshot.json'), 'tracking_snapshot', SNAPSHOT_SCHEMA,
                             json.loads(tracker.snapshot().to_json()))
        exp.store.write_jsonl(rec.output('annotated_sessions.jsonl'), 'annotated_sessions', SESSION_LOG_SCHEMA,
                              (s.to_json() for s in annotated))
        exp.store.write_csv(rec.output('randomization_features.csv'), 'randomization_features', FEATURE_SCHEMA,
                            ('ts', 'query_id', 'doc_id', 'click') + FEATURE_NAMES,
                            ([r.timestamp, r.query_id, r.doc_id, r.clicked] + [repr(float(v)) for v in row]
                             for r, row in zip(records, features)))
        rec.log.info('click features replayed', clock=tracker.clock, late_events=tracker.late_events,
                     future_events=tracker.future_events, retrained_at=hook.retrainer.retrained_at)


def train_tradeoff(exp: Experiment):
    conf = exp.conf['tradeoff']
    inputs = ['catalog.json', 'imputation_model.json', 'affine_model.json', 'randomization_features.csv']
    with exp.stage('train-tradeoff', inputs) as rec:
        catalog = exp.load_catalog()
        imp_text = exp.read_checkpoint('imputation_model.json')
        aff_text = exp.read_checkpoint('affine_model.json')
        frozen_files = dict((n, exp.store.sha256(n)) for n in ('imputation_model.json', 'affine_model.json'))
        imputation = ImputationModel.from_json(imp_text, catalog)
        affine = ApproxAffineModel.from_json(aff_text)

        rows = exp.store.read_csv('randomization_features.csv', 'randomization_features', FEATURE_SCHEMA)
        features = np.array([[float(r[n]) for n in FEATURE_NAMES] for r in rows], dtype=float)
        features = features.reshape(-1, len(FEATURE_NAMES))
        clicks = [int(r['click']) for r in rows]
        gamma_imp = imputation.predict_many([(r['query_id'], r['doc_id']) for r in rows])
        tradeoff, _ = tradeoff_train(features, clicks, gamma_imp, imputation, affine, exp.train_config('tradeoff'),
                                     tuple(conf['hidden']), conf['activation'], float(conf['clamp_floor']),
                                     float(conf['zeta_l2']))

        if imputation.to_json() != imp_text or affine.to_json() != aff_text:
            raise FrozenParameterError('a frozen checkpoint serializes differently after trade-off training')
        for name, digest in frozen_files.items():
            if exp.store.sha256(name) != digest:
                raise FrozenParameterError('{} changed on disk during trade-off training'.format(name))

        exp.write_checkpoint(rec.output('tradeoff_model.json'), tradeoff.to_json())
        bundle = ScorerBundle(imputation, affine, tradeoff, exp.conf['tracking']['min_impressions'])
        files = {'imputation': 'imputation_model.json', 'affine': 'affine_model.json',
                 'tradeoff': 'tradeoff_model.json'}
        exp.store.write_json(rec.output('scorer_bundle.json'), 'scorer_bundle', BUNDLE_SCHEMA, bundle.manifest(files))


def _estimates(data, e_hat, est: EstimatorParams, theta_hat, gamma_imp) -> Dict[str, float]:
    """Closed-form scores of one pair from its logged interactions; no data scores 0 (DR: imputation)."""
    if not data:
        return {'naive_ctr': 0.0, 'ipw': 0.0, 'affine_estimator': 0.0, 'dr_estimator': float(gamma_imp)}
    return {
        'naive_ctr': naive_ctr(data).value,
        'ipw': ipw_estimate(data, theta_hat).value,
        'affine_estimator': affine_estimate(data, est).value,
        'dr_estimator': dr_estimate(data, est, gamma_imp, e_hat).value,
    }


def score(exp: Experiment):
    inputs = ['catalog.json', 'annotated_sessions.jsonl', 'randomized_sessions.jsonl', 'tracking_snapshot.json',
              'scorer_bundle.json'] + sorted(n for n in CHECKPOINTS if n != 'exam_model.json')
    with exp.stage('score', inputs) as rec:
        catalog = exp.load_catalog()
        manifest = exp.store.read_json('scorer_bundle.json', 'scorer_bundle', BUNDLE_SCHEMA)
        bundle = ScorerBundle.load(manifest, exp.read_checkpoint, catalog)
        snapshot = TrackerSnapshot.from_json(canonical_json(
            exp.store.read_json('tracking_snapshot.json', 'tracking_snapshot', SNAPSHOT_SCHEMA)))

        keys = catalog.pairs()
        neural = bundle.score_pairs(keys, snapshot)
        grouped = group_interactions(exp.load_sessions('annotated_sessions.jsonl'))
        est = EstimatorParams.from_click_model(exp.click_model, exp.conf.get('misspecification'))
        theta_hat = estimate_theta_from_randomized_logs(exp.load_sessions('randomized_sessions.jsonl'),
                                                        exp.num_positions)

        rows = []
        for (qid, did), s in zip(keys, neural):
            logged = grouped.get((qid, did), [])
            values = {'imputation': s.gamma_imp, 'affine_only': s.gamma_aff, 'dr': s.value}
            values.update(_estimates([(p, c) for p, c, _ in logged], [e for _, _, e in logged], est, theta_hat,
                                     s.gamma_imp))
            rows.extend((qid, did, system, repr(float(values[system]))) for system in SYSTEMS)
        exp.store.write_csv(rec.output('scores.csv'), 'scores', SCORES_SCHEMA,
                            ('query_id', 'doc_id', 'system', 'score'), rows)
        rec.log.info('pairs scored', pairs=len(keys), logged_pairs=len(grouped), systems=len(SYSTEMS))


def _directional_checks(rows: List[ReportRow], metric='DCG') -> List[dict]:
    value = dict(((r.system, r.bucket), r.value) for r in rows if r.metric == metric)

    def compare(name, bucket, winner, losers):
        values = dict((s, value.get((s, bucket))) for s in (winner,) + losers)
        if any(v is None for v in values.values()):
            return {'name': name, 'status': 'n/a', 'values': values}
        holds = all(values[winner] >= values[s] if winner == 'dr' else values[winner] > values[s] for s in losers)
        return {'name': name, 'status': 'pass' if holds else 'fail', 'values': values}

    return [
        compare('imputation_beats_affine_on_tail', 'Tail', 'imputation', ('affine_only',)),
        compare('affine_beats_imputation_on_high', 'High', 'affine_only', ('imputation',)),
        compare('dr_at_least_both_on_high', 'High', 'dr', ('imputation', 'affine_only')),
        compare('dr_at_least_both_on_tail', 'Tail', 'dr', ('imputation', 'affine_only')),
    ]


def evaluate(exp: Experiment):
    conf = exp.conf['metrics']
    k = int(conf['k'])
    thresholds = tuple(float(t) for t in conf['grade_thresholds'])
    baseline = conf['baseline']
    with exp.stage('evaluate', ['catalog.json', 'scores.csv']) as rec:
        catalog = exp.load_catalog()
        scores: Dict[str, Dict[tuple, float]] = dict((s, {}) for s in SYSTEMS)
        for r in exp.store.read_csv('scores.csv', 'scores', SCORES_SCHEMA):
            scores.setdefault(r['system'], {})[(r['query_id'], r['doc_id'])] = float(r['score'])

        rankings = {}
        for system, table in scores.items():
            scorer = lambda q, d, table=table: table[(q, d)]
            rankings[system] = dict(
                (q.query_id, judge_ranking(q.query_id, rank_documents(q.query_id, q.doc_ids, scorer), catalog,
                                           thresholds))
                for q in catalog.queries)
        per_query = dict((system, per_query_metrics(r, k)) for system, r in rankings.items())
        frequencies = dict((q.query_id, catalog.frequency(q.query_id)) for q in catalog.queries)
        spec = BucketSpec(tuple(float(t) for t in conf['bucket_thresholds']))
        rows = bucketed_report(per_query, frequencies, spec, baseline, k)

        members = dict((name, [q for q in sorted(frequencies) if spec.bucket(frequencies[q]) == name])
                       for name in spec.names)
        for system in sorted(rankings):
            for bucket in spec.names:
                qids = members[bucket]
                gsb = simulated_gsb(dict((q, rankings[system][q]) for q in qids),
                                    dict((q, rankings[baseline][q]) for q in qids), float(conf['tie_epsilon']), k)
                rows.append(ReportRow(system, bucket, 'GSB', k, gsb.delta if qids else None, None, len(qids)))
        for bucket in spec.names:
            if not members[bucket]:
                rec.log.warning('empty frequency bucket', bucket=bucket)

        exp.store.write_csv_text(rec.output('report.csv'), 'report', REPORT_SCHEMA, write_report_csv(rows))
        per_query_rows = [(system, qid, spec.bucket(frequencies[qid]), _fmt(frequencies[qid]), _fmt(m['DCG']),
                           _fmt(m['ERR']))
                          for system in sorted(per_query) for qid, m in sorted(per_query[system].items())]
        exp.store.write_csv(rec.output('per_query.csv'), 'per_query', REPORT_SCHEMA,
                            ('system', 'query_id', 'bucket', 'frequency', 'DCG', 'ERR'), per_query_rows)
        checks = _directional_checks(rows)
        exp.store.write_json(rec.output('acceptance.json'), 'acceptance', REPORT_SCHEMA,
                             {'k': k, 'metric': 'DCG', 'checks': checks})
        for check in checks:
            if check['status'] != 'pass':
                rec.log.warning('directional check did not hold', check=check['name'], status=check['status'],
                                values=check['values'])


def verify_theory(exp: Experiment, ci=False):
    with exp.stage('verify-theory') as rec:
        result = run_theory_grid(exp.conf['theory'], exp.seed_for('theory'), exp.jobs)
        exp.store.write_csv_text(rec.output('theory_report.csv'), 'theory_report', REPORT_SCHEMA,
                                 theory_report_csv(result))
        exp.store.write_json(rec.output('theory_checks.json'), 'theory_checks', REPORT_SCHEMA,
                             {'columns': list(THEORY_COLUMNS), 'checks': [c.to_dict() for c in result.checks]})
        for check in result.checks:
            rec.log.info('theory check', check=check.name, status=check.status, detail=check.detail)
    failed = result.failed
    if ci and failed:
        raise AcceptanceError('{} theory check(s) failed: {}'.format(len(failed), ', '.join(c.name for c in failed)))
    return result


STAGE_FUNCTIONS = {
    'simulate': simulate,
    'train-exam': train_exam,
    'train-imp': train_imp,
    'train-affine': train_affine,
    'train-tradeoff': train_tradeoff,
    'score': score,
    'evaluate': evaluate,
}


def run_stage(name, exp: Experiment, ci=False):
    if name == 'verify-theory':
        return verify_theory(exp, ci=ci)
    if name == 'pipeline':
        return run_pipeline(exp, ci=ci)
    return STAGE_FUNCTIONS[name](exp)


def run_pipeline(exp: Experiment, ci=False):
    for name in STAGES:
        run_stage(name, exp, ci=ci)
