from __future__ import annotations

import argparse
import logging
from pathlib import Path
from typing import List, Optional, Sequence

from thermopoll import __version__
from thermopoll.config import (
    EXPERIMENT_SPECS,
    SEED_LIMIT,
    ScenarioConfig,
    load_scenario,
    with_experiment,
)
from thermopoll.errors import ConfigError, ThermopollError
from thermopoll.experiments import check_report, run_experiment, write_report

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CHECK_FAILED = 3
EXIT_RUN_FAILED = 4

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def _seed(value: str) -> int:
    try:
        seed = int(value, 0)
    except ValueError as e:
        raise argparse.ArgumentTypeError(f'not an integer: {value!r}') from e
    if not 0 <= seed < SEED_LIMIT:
        raise argparse.ArgumentTypeError(f'seed must be an unsigned 64-bit integer, got {seed}')
    return seed


def _add_run_options(parser: argparse.ArgumentParser, with_config: bool = True) -> None:
    parser.add_argument('--seed', type=_seed, help='override the scenario seed')
    parser.add_argument('--out', type=Path, default=Path('out'), help='report directory')
    if with_config:
        parser.add_argument('--config', type=Path, help='scenario file (JSON)')
    parser.add_argument(
        '--check', action='store_true', help='exit with 3 when an acceptance bound fails'
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='thermopoll',
        description='Simulate ID-polled wireless body thermometers and report the experiments.',
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    parser.add_argument('--verbose', action='store_true', help='log per-packet events')

    commands = parser.add_subparsers(dest='command', required=True)
    for kind in EXPERIMENT_SPECS:
        command = commands.add_parser(kind, help=f'run the {kind} experiment')
        _add_run_options(command)

    run = commands.add_parser('run', help='run the experiment a scenario file describes')
    run.add_argument('scenario', type=Path, help='scenario file (JSON)')
    _add_run_options(run, with_config=False)
    return parser


def _configure_logging(verbose: bool) -> None:
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format=LOG_FORMAT)


def _load(args: argparse.Namespace) -> ScenarioConfig:
    if args.command == 'run':
        config = load_scenario(args.scenario)
    else:
        config = load_scenario(args.config) if args.config else ScenarioConfig()
        config = with_experiment(config, args.command)
    if args.seed is not None:
        config = config.model_copy(update={'seed': args.seed})
    return config


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    _configure_logging(args.verbose)

    try:
        config = _load(args)
    except ConfigError as e:
        logger.error('%s', e)
        return EXIT_CONFIG

    try:
        bundle = run_experiment(config)
    except ThermopollError as e:
        # Nothing to report, e.g. a linearity thermometer that never got a reading through.
        logger.error('%s run failed: %s', config.experiment.kind, e)
        return EXIT_RUN_FAILED
    write_report(bundle, args.out)

    if args.check:
        failures: List[str] = check_report(bundle)
        for failure in failures:
            logger.error('check failed: %s', failure)
        if failures:
            return EXIT_CHECK_FAILED
        logger.info('%s: all checks passed', bundle.experiment)
    return EXIT_OK
