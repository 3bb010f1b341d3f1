"""
Command-line entry point: argument parsing, logging setup and the mapping
from failures to exit codes.
"""

import argparse
import asyncio
import json
import logging
import sys
from typing import List, Optional

from . import __version__
from .commands import COMMANDS, TRAIN_MODES
from .core import Core
from .errors import DataError, NumericalError, UsageError

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


class _Parser(argparse.ArgumentParser):
    """Raises instead of exiting so dispatch() owns the exit code."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mfmil", description="Multi-fold MIL for weakly supervised object localization")
    parser.add_argument('-c', '--config', help='Path to config.json (default: ./config.json if present)')
    parser.add_argument('-r', '--registry', help='Run registry database (overrides config registry.path)')
    parser.add_argument('--no-registry', action='store_true', help='Do not record runs in the registry')
    parser.add_argument('--threads', type=int, help='Worker threads (results do not depend on it)')
    parser.add_argument('--log-level', default='INFO', choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'])
    parser.add_argument('-v', '--version', action='version', version=f"MFMIL {__version__}")
    sub = parser.add_subparsers(dest='command', required=True)

    gen = sub.add_parser('gen', help='Synthesize a dataset')
    gen.add_argument('out_dir')
    gen.add_argument('--pos', type=int)
    gen.add_argument('--neg', type=int)
    gen.add_argument('--dim', type=int)
    gen.add_argument('--alpha', type=float, help='Class signal strength (default: snr * sigma * sqrt(dim))')
    gen.add_argument('--snr', type=float)
    gen.add_argument('--sigma', type=float)
    gen.add_argument('--candidates', type=int)
    gen.add_argument('--jitter', type=float)
    gen.add_argument('--clutter', type=int)
    gen.add_argument('--context', choices=['complement', 'full', 'none'])
    gen.add_argument('--context-signal', type=float)
    gen.add_argument('--overlap-sharing', type=float, help='Share of window noise pooled from image cells, in [0, 1)')
    gen.add_argument('--flips', action='store_true', default=None)
    gen.add_argument('--test-pos', type=int)
    gen.add_argument('--test-neg', type=int)
    gen.add_argument('--seed', type=int)

    train = sub.add_parser('train', help='Train with standard, multi-fold or mixed MIL')
    train.add_argument('dataset', help='Dataset manifest or directory holding dataset.json')
    train.add_argument('--out', required=True, help='Run directory')
    train.add_argument('--mode', choices=TRAIN_MODES, default='multifold')
    train.add_argument('--k', type=int)
    train.add_argument('--iters', type=int)
    train.add_argument('--c', type=float)
    train.add_argument('--channels', choices=['f', 'fb', 'fc'])
    train.add_argument('--sup-fraction', type=float, default=0.0)
    train.add_argument('--sup-seed', type=int, default=0)
    train.add_argument('--seed', type=int)
    train.add_argument('--margin', type=float)
    train.add_argument('--mining-rounds', type=int)
    train.add_argument('--max-new', type=int)
    train.add_argument('--flips', action='store_true', default=None, help='Add flipped positives')

    refine = sub.add_parser('refine', help='Refine the final selections and retrain')
    refine.add_argument('run_dir')
    refine.add_argument('--top-n', type=int)
    refine.add_argument('--w-cls', type=float)
    refine.add_argument('--w-obj', type=float)
    refine.add_argument('--kappa', type=float)
    refine.add_argument('--no-search', action='store_true', help='Fuse scores without local search')

    ev = sub.add_parser('eval', help='Evaluate a run directory')
    ev.add_argument('run_dir')
    ev.add_argument('--protocol', choices=['11pt', 'cont'], default='11pt')
    ev.add_argument('--nms', type=float, default=0.3, help='NMS overlap for detections')

    diag = sub.add_parser('diag', help='Diagnostics')
    diag.add_argument('diag', choices=['score-hist', 'dot-hist', 'c-sweep', 'k-sweep'])
    diag.add_argument('target', help='Run directory (score-hist) or dataset')
    diag.add_argument('--out', help='CSV output')
    diag.add_argument('--bins', type=int, default=40)
    diag.add_argument('--pairs', choices=['all', 'within'], default='all')
    diag.add_argument('--sample', type=int, default=1000)
    diag.add_argument('--radius', type=float, default=0.1)
    diag.add_argument('--seed', type=int)
    diag.add_argument('--channels', choices=['f', 'fb', 'fc'])
    diag.add_argument('--iters', type=int)
    diag.add_argument('--cs', default='0.1,1,10,100')
    diag.add_argument('--ks', default='2,10,20')

    report = sub.add_parser('report', help='Aggregate registry metrics into a CSV')
    report.add_argument('--out', required=True)
    report.add_argument('--command', dest='run_command', choices=['gen', 'train', 'refine', 'eval', 'diag'], help='Only runs of this command')
    report.add_argument('--run', type=int, help='Only this run id')
    report.add_argument('--reset', action='store_true', help='Clear the registry after writing the report')

    sub.add_parser('version', help='Show version')

    return parser


async def _respond(line: str):
    print(line)


async def _run(core: Core, args):
    await COMMANDS[args.command](core, args, _respond)


def dispatch(argv: Optional[List[str]] = None) -> int:
    """Run one subcommand and return the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:
        # --help / --version
        return int(e.code or 0)

    logging.basicConfig(level=getattr(logging, args.log_level), format='%(asctime)s %(levelname)s %(message)s')
    try:
        core = Core(args)
        asyncio.run(_run(core, args))
    except UsageError as e:
        log.error(str(e))
        return EXIT_USAGE
    except NumericalError as e:
        log.error(f"Numerical failure: {e}")
        return EXIT_NUMERICAL
    except (DataError, OSError, json.JSONDecodeError) as e:
        log.error(f"Data error: {e}")
        return EXIT_DATA
    return EXIT_OK


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
