"""
Command line entry point::

    drrel <stage> [--config FILE] [--set key.path=value ...] [--out DIR] [--jobs N] [--ci]

Exit status is 0 on success, 1 on any validation or artifact error and 2
when ``verify-theory --ci`` finds a failing check.
"""
import argparse
import os
import sys

from drrel import __version__
from drrel.config import Settings
from drrel.exceptions import AcceptanceError, DrrelError
from drrel.log import logger
from drrel.pipeline import STAGES, Experiment, run_stage

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_ACCEPTANCE = 2


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', default=None, help='TOML or JSON experiment configuration')
    common.add_argument('--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE',
                        help='override a configuration value by dotted key path (repeatable)')
    common.add_argument('--out', default='runs/default', help='experiment directory for artifacts')
    common.add_argument('--jobs', type=int, default=None, help='maximum parallel workers per stage')
    common.add_argument('--ci', action='store_true', help='turn failed theory checks into exit status 2')

    parser = argparse.ArgumentParser(prog='drrel', description='doubly robust relevance estimation experiments')
    parser.add_argument('--version', action='version', version='%(prog)s {}'.format(__version__))
    sub = parser.add_subparsers(dest='command', metavar='command')
    sub.required = True
    for name in STAGES + ('pipeline',):
        sub.add_parser(name, parents=[common], help='run all stages in order' if name == 'pipeline' else None)
    return parser


def load_settings(args) -> Settings:
    return Settings(root_path=os.getcwd(), config_file=args.config, overrides=args.overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        settings = load_settings(args)
        if not logger.handlers:
            logger.init(settings.section('log'))
        experiment = Experiment(settings, args.out, args.jobs)
        logger.info('running', command=args.command, out=args.out, config_hash=settings.config_hash,
                    seed=experiment.seed, jobs=experiment.jobs)
        run_stage(args.command, experiment, ci=args.ci)
    except AcceptanceError as ex:
        logger.error('acceptance check failed', command=args.command, error=str(ex))
        return EXIT_ACCEPTANCE
    except DrrelError as ex:
        logger.error('command failed', command=args.command, error_type=type(ex).__name__, error=str(ex))
        return EXIT_INVALID
    return EXIT_OK


if __name__ == '__main__':  # pragma: no cover
    sys.exit(main())
