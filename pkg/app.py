"""
Command-Line Front End for the Mean-Square Hedging Toolkit

    python app.py [--config FILE] [--seed N] [--out DIR] [--threads N] COMMAND ...

Commands: solve, tables, strategy, oracle, simulate. Each prints a JSON
report on stdout and writes its files into the output directory; logs go to
stderr and $LOG_DIR/app.log.
"""

import argparse
import logging
import os
import sys
import time
from typing import List, Optional

from dotenv import load_dotenv

from src import __version__
from src.pipeline.orchestrator import HedgingOrchestrator
from src.utils.config_loader import load_config
from src.utils.errors import HedgingError, SizeLimitError
from src.utils.json_serializer import dumps

# Load environment variables
load_dotenv()

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INTERNAL = 3


def setup_logging(level: Optional[str] = None):
    """Root logger: LOG_LEVEL, a file under LOG_DIR and stderr."""
    log_dir = os.getenv('LOG_DIR', 'logs')
    os.makedirs(log_dir, exist_ok=True)
    logging.basicConfig(
        level=(level or os.getenv('LOG_LEVEL', 'INFO')).upper(),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[
            logging.FileHandler(os.path.join(log_dir, 'app.log')),
            logging.StreamHandler()
        ]
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='app.py',
        description='Mean-square hedging under a nonnegative terminal wealth constraint.',
    )
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    parser.add_argument('--config', help='run configuration file (dotted key=value lines)')
    parser.add_argument('--seed', type=int, help='seed for simulation, strategy path and oracle sweep')
    parser.add_argument('--out', help='output directory')
    parser.add_argument('--threads', type=int, help='worker threads (default: $MVH_THREADS or 1)')
    parser.add_argument('--log-level', help='override LOG_LEVEL')
    commands = parser.add_subparsers(dest='command', required=True)

    solve = commands.add_parser('solve', help='solve v(g) and report the closed-form risks')
    solve.add_argument('--rho', type=float, help='override market.rho')
    solve.add_argument('--g', type=float, help='override solve.g')

    commands.add_parser('tables', help='reproduce the multiplier and residual-risk tables')

    strategy = commands.add_parser('strategy', help='optimal holding along one path')
    strategy.add_argument('--source', help="'simulate' or a CSV file with columns t,b_tilde")
    strategy.add_argument('--points', type=int, help='rows of a simulated path')

    oracle = commands.add_parser('oracle', help='check the closed-form payoff on random discrete markets')
    oracle.add_argument('--count', type=int, help='number of random instances')
    oracle.add_argument('--max-atoms', type=int, help='largest instance (at most 16)')
    oracle.add_argument('--replay', nargs='*', default=[], help='replay instance files')

    simulate = commands.add_parser('simulate', help='Monte Carlo back-test of the optimal strategy')
    simulate.add_argument('--zero-strategy', action='store_true', help='hold nothing (sanity run)')
    simulate.add_argument('--paths', type=int, help='override mc.paths')
    simulate.add_argument('--steps', type=int, help='override mc.steps')
    simulate.add_argument('--antithetic', action='store_true', help='antithetic path pairs')
    return parser


def _command_overrides(args: argparse.Namespace) -> dict:
    pairs = {
        'rho': getattr(args, 'rho', None),
        'g': getattr(args, 'g', None),
        'strategy_points': getattr(args, 'points', None),
        'mc_paths': getattr(args, 'paths', None),
        'mc_steps': getattr(args, 'steps', None),
        'mc_antithetic': True if getattr(args, 'antithetic', False) else None,
    }
    return {name: value for name, value in pairs.items() if value is not None}


def cmd_solve(orchestrator: HedgingOrchestrator, args: argparse.Namespace):
    return orchestrator.run_solve()


def cmd_tables(orchestrator: HedgingOrchestrator, args: argparse.Namespace):
    return orchestrator.run_tables()


def cmd_strategy(orchestrator: HedgingOrchestrator, args: argparse.Namespace):
    return orchestrator.run_strategy(source=args.source)


def cmd_oracle(orchestrator: HedgingOrchestrator, args: argparse.Namespace):
    return orchestrator.run_oracle(count=args.count, max_atoms=args.max_atoms, replay=args.replay)


def cmd_simulate(orchestrator: HedgingOrchestrator, args: argparse.Namespace):
    return orchestrator.run_simulate(zero_strategy=args.zero_strategy)


COMMANDS = {
    'solve': cmd_solve,
    'tables': cmd_tables,
    'strategy': cmd_strategy,
    'oracle': cmd_oracle,
    'simulate': cmd_simulate,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Run one command; returns the process exit code."""
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    start_time = time.time()
    logger.info(f"Starting '{args.command}'")

    try:
        config = load_config(args.config).with_overrides(seed=args.seed, out=args.out, **_command_overrides(args))
        if getattr(args, 'max_atoms', None) is not None and not 1 <= args.max_atoms <= 16:
            raise SizeLimitError(f"--max-atoms must lie in [1, 16], got {args.max_atoms}")
        orchestrator = HedgingOrchestrator(config, threads=args.threads)
        result = COMMANDS[args.command](orchestrator, args)
    except HedgingError as e:
        logger.error(f"'{args.command}' failed: {e}", exc_info=True)
        sys.stdout.write(dumps({'success': False, 'error': str(e), 'error_type': type(e).__name__}))
        return e.exit_code
    except Exception as e:
        logger.error(f"'{args.command}' crashed: {e}", exc_info=True)
        sys.stdout.write(dumps({'success': False, 'error': str(e), 'error_type': type(e).__name__}))
        return EXIT_INTERNAL

    logger.info(f"'{args.command}' finished in {time.time() - start_time:.2f}s")
    sys.stdout.write(dumps({'success': True, 'command': args.command, 'result': result}))
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
