import json
import os

import mock
import pytest

from drrel import __version__
from drrel.cli import EXIT_ACCEPTANCE, EXIT_INVALID, EXIT_OK, build_parser, main
from drrel.log import logger
from drrel.verification import Check, TheoryResult

SMALL = os.path.join(os.path.dirname(__file__), 'assets', 'config_small', 'settings.toml')


@pytest.fixture(autouse=True)
def fresh_logger():
    logger.clear()
    yield
    logger.clear()


def test_parser():
    parser = build_parser()
    args = parser.parse_args(['score', '--set', 'seed=3', '--set', 'metrics.k=2', '--jobs', '4', '--out', 'x'])
    assert args.command == 'score'
    assert args.overrides == ['seed=3', 'metrics.k=2']
    assert args.jobs == 4 and args.out == 'x' and not args.ci
    with pytest.raises(SystemExit):
        parser.parse_args(['train-everything'])
    with pytest.raises(SystemExit):
        parser.parse_args([])


def test_version(capsys):
    with pytest.raises(SystemExit) as info:
        main(['--version'])
    assert info.value.code == 0
    assert __version__ in capsys.readouterr().out


def test_missing_upstream_artifact(tmpdir):
    out = str(tmpdir.join('run'))
    assert main(['evaluate', '--config', SMALL, '--out', out]) == EXIT_INVALID
    assert not os.path.exists(os.path.join(out, 'evaluate.manifest.json'))


def test_invalid_configuration(tmpdir):
    assert main(['simulate', '--config', str(tmpdir.join('nope.toml'))]) == EXIT_INVALID
    out = str(tmpdir.join('run'))
    assert main(['simulate', '--config', SMALL, '--out', out, '--set', 'click_model.anchor_factor=2.0']) \
        == EXIT_INVALID


def test_stage_dispatch(tmpdir):
    out = str(tmpdir.join('run'))
    with mock.patch('drrel.cli.run_stage') as run_stage:
        assert main(['train-imp', '--config', SMALL, '--out', out, '--jobs', '3', '--set', 'seed=9']) == EXIT_OK
    name, experiment = run_stage.call_args[0]
    assert name == 'train-imp'
    assert experiment.jobs == 3
    assert experiment.seed == 9
    assert run_stage.call_args[1] == {'ci': False}


def failing_grid(conf, seed, jobs=1):
    result = TheoryResult()
    check = Check('affine_bias_matches_enumeration')
    check.fail('config 0: exact 0.1 vs analytic 0.2')
    result.checks.append(check)
    return result


def test_verify_theory_ci_exit_code(tmpdir):
    out = str(tmpdir.join('run'))
    with mock.patch('drrel.pipeline.run_theory_grid', side_effect=failing_grid):
        assert main(['verify-theory', '--config', SMALL, '--out', out]) == EXIT_OK
        assert main(['verify-theory', '--config', SMALL, '--out', out, '--ci']) == EXIT_ACCEPTANCE
    with open(os.path.join(out, 'theory_checks.json')) as f:
        payload = json.load(f)
    assert payload['data']['checks'][0]['status'] == 'fail'
    assert os.path.exists(os.path.join(out, 'verify-theory.manifest.json'))


def test_verify_theory_small_grid(tmpdir):
    out = str(tmpdir.join('run'))
    assert main(['verify-theory', '--config', SMALL, '--out', out]) == EXIT_OK
    with open(os.path.join(out, 'theory_report.csv')) as f:
        header = json.loads(f.readline()[2:])
        assert header['kind'] == 'theory_report'
        assert f.readline().startswith('config_id,case,estimator,D,gamma')
