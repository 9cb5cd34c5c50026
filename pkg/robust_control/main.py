"""Command-line entry point: predictor comparison, single episodes, batches and suboptimality curves."""

import argparse
import logging
import os
import sys
from logging.handlers import RotatingFileHandler

# Add parent directory to path for imports
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from project_config import config
Config = config[os.environ.get('RC_PROFILE', 'default')]
from robust_control.environments import ENVIRONMENTS, make_env
from robust_control.exceptions import ConfigurationError, RobustControlError
from robust_control.harness import (
    AGENTS, AgentConfig, export, predictor_comparison, run_batch, run_episode, suboptimality_curve,
    summarize
)

EXIT_CONFIG_ERROR = 2
EXIT_RUNTIME_ERROR = 3


def configure_logging():
    """Log to a rotating file under LOGS_DIR and to the console."""
    Config.LOGS_DIR.mkdir(parents=True, exist_ok=True)
    logging.basicConfig(
        level=getattr(logging, Config.LOG_LEVEL.upper(), logging.INFO),
        format='%(asctime)s - %(levelname)s - %(message)s',
        handlers=[
            RotatingFileHandler(Config.LOG_FILE, maxBytes=Config.LOG_MAX_BYTES,
                                backupCount=Config.LOG_BACKUP_COUNT),
            logging.StreamHandler()
        ]
    )


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--env', choices=sorted(ENVIRONMENTS), default='obstacle')
    common.add_argument('--agent', choices=AGENTS, default='robust')
    common.add_argument('--seed', type=int, default=Config.BASE_SEED)
    common.add_argument('--budget', type=int, default=Config.BUDGET)
    common.add_argument('--delta', type=float, default=Config.DELTA)
    common.add_argument('--gamma', type=float, default=None)
    common.add_argument('--predictor', choices=('simple', 'enhanced', 'auto'), default=Config.PREDICTOR_MODE)
    common.add_argument('--polytope', choices=('box', 'tight'), default=Config.POLYTOPE_MODE)
    common.add_argument('--multi-model', action='store_true',
                        help='Plan over every candidate structure of the environment')
    common.add_argument('--config', default=None, help='YAML scene file (obstacle environment)')
    common.add_argument('--out', default=None, help='Output path')

    parser = argparse.ArgumentParser(
        description='Robust estimation, prediction and planning experiments.',
        formatter_class=argparse.ArgumentDefaultsHelpFormatter
    )
    commands = parser.add_subparsers(dest='command', required=True)

    predict = commands.add_parser('predict', parents=[common],
                                  help='Simple vs enhanced interval predictor on the scalar system (CSV)')
    predict.add_argument('--t-final', type=float, default=2.0)
    predict.add_argument('--dt', type=float, default=0.05)

    commands.add_parser('episode', parents=[common], help='Run one episode (JSON trace)')

    for name, text in (('batch', 'Run seeded episodes (metrics CSV)'),
                       ('suboptimality', 'Suboptimality against the number of samples (CSV)')):
        sub = commands.add_parser(name, parents=[common], help=text)
        sub.add_argument('--seeds', type=int, default=100)
        sub.add_argument('--jobs', type=int, default=Config.N_JOBS)
        if name == 'suboptimality':
            sub.add_argument('--buckets', type=int, nargs='+', default=list(Config.SUBOPTIMALITY_BUCKETS))
            sub.add_argument('--eval-horizon', type=int, default=20)
    return parser


def agent_from_args(args) -> AgentConfig:
    return AgentConfig(
        kind=args.agent, delta=args.delta, gamma=args.gamma, budget=args.budget,
        predictor_mode=args.predictor, polytope_mode=args.polytope,
        multi_model=args.multi_model, seed=args.seed
    )


def run(args) -> int:
    out = args.out or str(Config.RESULTS_DIR / f"{args.command}.{'json' if args.command == 'episode' else 'csv'}")
    if args.command == 'predict':
        export(predictor_comparison(args.t_final, args.dt), out)
        return 0

    env = make_env(args.env, args.config)
    agent = agent_from_args(args)
    if args.command == 'episode':
        trace = run_episode(env, agent)
        export(trace, out)
    elif args.command == 'batch':
        metrics = run_batch(env, agent, args.seeds, base_seed=args.seed, n_jobs=args.jobs)
        export(metrics, out)
        logging.info(f"Summary:\n{summarize(metrics).to_string(index=False)}")
    else:
        curve = suboptimality_curve(env, agent, args.seeds, args.buckets, args.eval_horizon,
                                    base_seed=args.seed, n_jobs=args.jobs)
        export(curve, out)
    return 0


def main(argv=None):
    """Parse arguments, run the command and exit with 0, 2 (configuration) or 3 (runtime failure)."""
    args = build_parser().parse_args(argv)
    configure_logging()
    try:
        code = run(args)
    except ConfigurationError as e:
        logging.error(f"Configuration error: {str(e)}")
        sys.exit(EXIT_CONFIG_ERROR)
    except (RobustControlError, OSError) as e:
        logging.error(f"{args.command} failed: {str(e)}")
        sys.exit(EXIT_RUNTIME_ERROR)
    logging.info(f"{args.command} completed, output in {args.out or Config.RESULTS_DIR}")
    sys.exit(code)


if __name__ == "__main__":
    main()
