import json

import numpy as np
import pytest

from drrel.common.log import LoggerLevel, LogRecord
from drrel.log import Logger
from drrel.mixins import ToDictMixin

logger = Logger("drrel-test-log")


def test_log_defaults_to_debug(capsys):
    logger.clear()
    logger.info('no handlers yet')
    assert capsys.readouterr().out == ""
    logger.add('stdout')
    assert logger.handlers[0].levelno == LoggerLevel.DEBUG
    assert len(logger.handlers) == 1
    logger.debug('stage started')
    captured = capsys.readouterr()
    assert captured.out.endswith("[stage started]\n")
    assert "[DEBUG] [drrel-test-log]" in captured.out
    logger.clear()


def test_log_level(capsys):
    logger.clear()
    logger.add('stdout', level="INFO")
    assert logger.handlers[0].levelno == LoggerLevel.INFO
    logger.info('sessions simulated')
    assert capsys.readouterr().out.endswith("[sessions simulated]\n")
    logger.debug('shard 3 done')
    assert capsys.readouterr().out == ""
    logger.critical('divergence')
    assert capsys.readouterr().out.endswith("[divergence]\n")
    logger.clear()


def test_log_structured_fields(capsys):
    logger.clear()
    logger.add('stdout')
    logger.info('window refreshed', window="daily", coverage={"start": -21, "end": 3, "hours": [1, 2]})
    captured = capsys.readouterr()
    assert '[window = "daily"]' in captured.out
    assert '[coverage = {"end": 3, "hours": [1, 2], "start": -21}]' in captured.out
    logger.clear()


def test_log_numpy_fields(capsys):
    logger.clear()
    logger.add('stdout')
    logger.info('trained', final_loss=np.float64(0.25), theta_hat=np.array([1.0, 0.5]), steps=np.int64(3))
    captured = capsys.readouterr()
    assert '[final_loss = 0.25]' in captured.out
    assert '[theta_hat = [1.0, 0.5]]' in captured.out
    assert '[steps = 3]' in captured.out
    logger.clear()


def test_log_fields_named_like_record_attributes(capsys):
    logger.clear()
    logger.add('stdout')
    logger.info('theory check', name='dr_bias', level=2, msg='ok', args=[1], debuginfo='x')
    captured = capsys.readouterr()
    assert '[name_ = "dr_bias"]' in captured.out
    assert '[level_ = 2]' in captured.out
    assert '[msg_ = "ok"]' in captured.out
    assert '[drrel-test-log]' in captured.out
    assert '[INFO] [drrel-test-log] [theory check]' in captured.out
    logger.bind(name='bound').warning('still fine')
    assert '[name_ = "bound"]' in capsys.readouterr().out
    logger.clear()


def test_log_unknown_handler():
    logger.clear()
    with pytest.raises(Exception):
        logger.add('socket', host='127.0.0.1', port=9000)
    assert logger.handlers == []


def test_log_init_from_config(tmpdir, capsys):
    logger.clear()
    path = str(tmpdir.join('logs', 'run.jsonl'))
    logger.init({
        'handlers': ['stdout', 'file', 'fluent'],
        'stdout': {'handler_type': 'stdout', 'level': 'warning'},
        'file': {'handler_type': 'jsonl', 'path': path, 'level': 'debug'},
        'fluent': {'handler_type': 'fluent', 'host': '127.0.0.1'},
    })
    # handler types without a class are skipped
    assert len(logger.handlers) == 2
    logger.info('quiet on stdout', n=1)
    logger.warning('loud', n=2)
    captured = capsys.readouterr()
    assert 'quiet on stdout' not in captured.out
    assert captured.out.find('[loud] [n = 2]') > 1
    logger.clear()
    with open(path) as f:
        records = [json.loads(line) for line in f]
    assert [r['message'] for r in records] == ['quiet on stdout', 'loud']
    assert records[1]['level'] == 'WARNING'
    assert records[1]['data'] == {'n': 2}
    assert records[0]['name'] == 'drrel-test-log'


def test_log_bind(capsys):
    logger.clear()
    logger.add('stdout')
    child = logger.bind(stage='score')
    assert child.handlers is logger.handlers
    child.info('pairs scored', pairs=10)
    captured = capsys.readouterr()
    assert '[pairs = 10]' in captured.out
    assert '[stage = "score"]' in captured.out
    grandchild = child.bind(shard=2)
    grandchild.info('shard')
    captured = capsys.readouterr()
    assert '[stage = "score"]' in captured.out and '[shard = 2]' in captured.out
    logger.info('parent')
    captured = capsys.readouterr()
    assert 'stage' not in captured.out
    logger.clear()


def test_log_exception(capsys):
    logger.clear()
    logger.add('stdout')
    try:
        raise ValueError('bad gamma')
    except ValueError as ex:
        logger.exception('failed', exc_info=ex)
    captured = capsys.readouterr()
    assert '[ERROR]' in captured.out
    assert '<ValueError>: bad gamma' in captured.out
    logger.clear()


class ShardStats:
    def __init__(self):
        self.sessions = 120


class CheckpointRef:
    def __init__(self):
        self.name = 'exam_model.json'

    def to_json(self):
        return json.dumps({'artifact': self.name})


class StageSummary(ToDictMixin):
    def __init__(self):
        self.stage = 'train-imp'
        self.outputs = {"imputation_model.json": {"schema": "drrel.imputation/1"}}
        self._cache = 'not logged'


def test_log_objects_as_fields(capsys):
    logger.clear()
    logger.add('stdout')
    logger.info('shard merged', shard=ShardStats())
    assert '{"sessions": 120}' in capsys.readouterr().out
    logger.info('checkpoint', ref=CheckpointRef(), kind='gbdt')
    assert '[kind = "gbdt"]' in capsys.readouterr().out
    record = LogRecord('record', "INFO", "stage finished", [], None, summary=StageSummary())
    data = record.to_dict()
    assert data['data']['summary']['stage'] == 'train-imp'
    assert '_cache' not in data['data']['summary']
    logger.info('stage finished', summary=StageSummary())
    assert 'imputation_model.json' in capsys.readouterr().out
    logger.clear()
