import numpy as np
import pytest

from drrel.click_sim import Document, Query, QueryCatalog
from drrel.exceptions import ConfigError, DomainError, PairingError
from drrel.metrics import (BucketSpec, JudgedRanking, bucketed_report, dcg_at_k, err_at_k, gain_from_gamma,
                           grade_from_gamma, judge_ranking, per_query_metrics, simulated_gsb, write_report_csv)


def ranking(gains, relevances=None, qid='q'):
    relevances = relevances or [0.0] * len(gains)
    return JudgedRanking(qid, tuple('d{}'.format(i) for i in range(len(gains))), tuple(gains), tuple(relevances))


def test_grades():
    assert grade_from_gamma(0.1) == 0
    assert grade_from_gamma(0.2) == 1
    assert grade_from_gamma(0.95) == 4
    assert gain_from_gamma(0.1) == 0.0
    assert gain_from_gamma(0.5) == 3.0
    assert gain_from_gamma(1.0) == 15.0


def test_dcg_and_err():
    assert dcg_at_k(ranking([3, 1]), 2) == pytest.approx(3.63093, abs=1e-5)
    assert dcg_at_k(ranking([3, 1]), 1) == 3.0
    assert dcg_at_k(ranking([3, 1]), 10) == dcg_at_k(ranking([3, 1]), 2)
    assert err_at_k(ranking([0, 0], [0.5, 0.5]), 2) == pytest.approx(0.625)
    assert err_at_k(ranking([0, 0], [1.0, 1.0]), 2) == 1.0
    with pytest.raises(DomainError):
        dcg_at_k(ranking([1]), 0)


def test_judged_ranking_invariants():
    with pytest.raises(DomainError):
        JudgedRanking('q', ('a',), (1.0, 2.0), (0.5,))
    with pytest.raises(DomainError):
        JudgedRanking('q', ('a',), (-1.0,), (0.5,))
    with pytest.raises(DomainError):
        JudgedRanking('q', ('a',), (1.0,), (1.5,))


def test_judge_ranking():
    catalog = QueryCatalog((Query('q', 1.0, (Document('a', 0.9, 0), Document('b', 0.1, 1))),))
    judged = judge_ranking('q', ['b', 'a'], catalog)
    assert judged.gains == (0.0, 15.0)
    assert judged.relevances == (0.1, 0.9)


def test_simulated_gsb():
    better = {'q1': ranking([3, 0], qid='q1'), 'q2': ranking([1, 1], qid='q2'), 'q3': ranking([0, 3], qid='q3')}
    worse = {'q1': ranking([0, 3], qid='q1'), 'q2': ranking([1, 1], qid='q2'), 'q3': ranking([3, 0], qid='q3')}
    result = simulated_gsb(better, worse)
    assert (result.good, result.same, result.bad) == (1, 1, 1)
    assert result.delta == 0.0
    forward = simulated_gsb(better, {'q1': worse['q1'], 'q2': worse['q2'], 'q3': better['q3']})
    backward = simulated_gsb({'q1': worse['q1'], 'q2': worse['q2'], 'q3': better['q3']}, better)
    assert (forward.good, forward.bad) == (backward.bad, backward.good)
    assert forward.delta == -backward.delta == pytest.approx(1.0 / 3.0)
    with pytest.raises(PairingError):
        simulated_gsb(better, {'q1': worse['q1']})



def test_simulated_gsb_random_pairs():
    rng = np.random.default_rng(21)
    for _ in range(25):
        n = int(rng.integers(1, 40))
        depth = int(rng.integers(1, 8))
        gains = [0.0, 1.0, 3.0, 7.0, 15.0]
        a, b = {}, {}
        for i in range(n):
            qid = 'q{}'.format(i)
            a[qid] = ranking([float(g) for g in rng.choice(gains, size=depth)], qid=qid)
            b[qid] = ranking([float(g) for g in rng.choice(gains, size=depth)], qid=qid)
        forward = simulated_gsb(a, b)
        backward = simulated_gsb(b, a)
        assert forward.good + forward.same + forward.bad == n
        assert (forward.good, forward.same, forward.bad) == (backward.bad, backward.same, backward.good)
        assert forward.delta == -backward.delta
        assert -1.0 <= forward.delta <= 1.0
        assert simulated_gsb(a, a).delta == 0.0


def test_bucket_spec():
    spec = BucketSpec()
    assert spec.bucket(0.0) == 'Tail'
    assert spec.bucket(9.99) == 'Tail'
    assert spec.bucket(10.0) == 'Mid'
    assert spec.bucket(999.0) == 'Mid'
    assert spec.bucket(1000.0) == 'High'
    with pytest.raises(ConfigError):
        BucketSpec((10.0, 5.0))
    with pytest.raises(ConfigError):
        BucketSpec((10.0,), ('a', 'b', 'c'))


def test_bucketed_report():
    base = {'t1': ranking([1, 0]), 'm1': ranking([3, 0])}
    better = {'t1': ranking([3, 0]), 'm1': ranking([3, 0])}
    per_query = {'imputation': per_query_metrics(base, 2), 'dr': per_query_metrics(better, 2)}
    rows = bucketed_report(per_query, {'t1': 2.0, 'm1': 50.0}, BucketSpec(), 'imputation', 2)
    assert len(rows) == 2 * 3 * 2
    by_key = dict(((r.system, r.bucket, r.metric), r) for r in rows)
    assert by_key[('dr', 'Tail', 'DCG')].relative_improvement == pytest.approx(200.0)
    assert by_key[('dr', 'Mid', 'DCG')].relative_improvement == 0.0
    assert by_key[('imputation', 'Tail', 'DCG')].relative_improvement == 0.0
    high = by_key[('dr', 'High', 'DCG')]
    assert high.value is None and high.relative_improvement is None and high.n_queries == 0
    # a zero baseline has no relative improvement
    assert by_key[('dr', 'Tail', 'ERR')].relative_improvement is None
    with pytest.raises(ConfigError):
        bucketed_report(per_query, {}, BucketSpec(), 'naive_ctr', 2)

    text = write_report_csv(rows)
    lines = text.splitlines()
    assert lines[0] == 'system,bucket,metric,K,value,relative_improvement,n_queries'
    assert 'dr,Tail,DCG,2,3.000000,200.000000,1' in lines
    assert 'dr,High,DCG,2,N/A,N/A,0' in lines
