#!/usr/bin/env python3
"""
Clustered NOMA Federated Learning Simulator - Main Application

Command-line interface for the simulation pipeline and the allocation studies.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from config import Config
from experiment import (
    Simulator, run_allocation_benchmark, run_bound_harness, run_oracle_check, sweep_t_max,
)
from experiment_config import ExperimentConfig, default_config, load_config, save_config
from exporter import ResultExporter
from utils import setup_logging


MODE_CHOICES = {'proposed': 'proposed', 'random': 'random_clusters', 'none': 'no_clustering'}
ALLOC_CHOICES = {'kkt': 'matching_kkt', 'fixed': 'matching_fixed_power', 'random': 'random_fixed_power'}

STAGES = ('partition', 'estimate', 'cluster', 'allocate', 'train', 'run')


def _parse_sizes(text: str) -> List[Tuple[int, int]]:
    """Parse '4x2,10x5' into [(4, 2), (10, 5)]."""
    sizes = []
    try:
        for item in text.split(','):
            users, channels = item.lower().split('x')
            sizes.append((int(users), int(channels)))
    except ValueError:
        raise argparse.ArgumentTypeError(f"Expected sizes like 4x2,10x5, got {text!r}")
    return sizes


def _parse_floats(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(',')]
    except ValueError:
        raise argparse.ArgumentTypeError(f"Expected comma-separated numbers, got {text!r}")


def create_argument_parser() -> argparse.ArgumentParser:
    """Create and configure the command-line argument parser."""
    common = argparse.ArgumentParser(add_help=False)
    experiment_group = common.add_argument_group('Experiment Options')
    experiment_group.add_argument('--config', help='JSON experiment file (defaults apply when omitted)')
    experiment_group.add_argument('--seed', type=int, help=f'Master seed (default: {Config.DEFAULT_SEED})')
    experiment_group.add_argument('--out', help=f'Output directory (default: {Config.DEFAULT_OUTPUT_DIR})')
    experiment_group.add_argument('--mode', choices=sorted(MODE_CHOICES), help='Clustering mode')
    experiment_group.add_argument('--access', choices=['noma', 'oma'], help='Multiple access scheme')
    experiment_group.add_argument('--alloc', choices=sorted(ALLOC_CHOICES), help='Matching and power allocation')

    output_group = common.add_argument_group('Output Options')
    output_group.add_argument('-v', '--verbose', action='store_true', help='Enable verbose output')
    output_group.add_argument('-q', '--quiet', action='store_true', help='Suppress non-error output')
    output_group.add_argument('--log-file', help='Log to file')

    parser = argparse.ArgumentParser(
        description="Clustered federated learning over a NOMA uplink",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  %(prog)s run --seed 42 --out results/
  %(prog)s run --config experiment.json --mode random --access oma
  %(prog)s cluster --config experiment.json
  %(prog)s bench-matching --sizes 4x2,10x5 --seeds 50
  %(prog)s sweep-tmax --t-values 3,4.5,6,9,12
  %(prog)s oracle-check --instances 500
        """
    )
    subparsers = parser.add_subparsers(dest='command', required=True)

    subparsers.add_parser('partition', parents=[common], help='Partition data and write histograms.csv')
    subparsers.add_parser('estimate', parents=[common], help='Estimate concentration vectors (alphas.csv)')
    subparsers.add_parser('cluster', parents=[common], help='Cluster users (clusters.csv, spectrum.csv)')
    subparsers.add_parser('allocate', parents=[common], help='Allocate one round (matching.csv, channels.csv)')
    subparsers.add_parser('train', parents=[common], help='Train without the run report (metrics.csv)')
    subparsers.add_parser('run', parents=[common], help='Full pipeline with report.json')

    bench = subparsers.add_parser('bench-matching', parents=[common], help='Swap matching vs exhaustive optimum')
    bench.add_argument('--sizes', type=_parse_sizes, default=[(4, 2), (10, 5)], help='Instance sizes NxK')
    bench.add_argument('--seeds', type=int, default=10, help='Instances per size (default: 10)')

    sweep = subparsers.add_parser('sweep-tmax', parents=[common], help='Energy against the deadline')
    sweep.add_argument('--t-values', type=_parse_floats, required=True, help='Ascending deadlines in seconds')
    sweep.add_argument('--no-fixed', action='store_true', help='Skip the fixed-power contrast leg')

    oracle = subparsers.add_parser('oracle-check', parents=[common], help='KKT allocation vs numerical oracle')
    oracle.add_argument('--instances', type=int, default=100, help='Feasible instances (default: 100)')

    harness = subparsers.add_parser('bound-harness', parents=[common],
                                    help='Loss gap vs convergence bound on a quadratic problem')
    harness.add_argument('--rounds', type=int, default=20, help='Rounds per seed (default: 20)')
    harness.add_argument('--seeds', type=int, default=3, help='Number of seeds (default: 3)')

    return parser


def setup_application_logging(args) -> None:
    """Setup logging based on command-line arguments."""
    if args.quiet:
        log_level = 'ERROR'
    elif args.verbose:
        log_level = 'DEBUG'
    else:
        log_level = Config.LOG_LEVEL

    log_file = Path(args.log_file) if args.log_file else None
    setup_logging(log_level, log_file)


def config_overrides(args) -> Dict[str, Any]:
    """Top-level config keys set from the command line."""
    overrides = {}
    if args.seed is not None:
        overrides['seed'] = args.seed
    if args.mode:
        overrides['clustering_mode'] = MODE_CHOICES[args.mode]
    if args.access:
        overrides['access_mode'] = args.access
    if args.alloc:
        overrides['allocation_mode'] = ALLOC_CHOICES[args.alloc]
    return overrides


def build_config(args) -> ExperimentConfig:
    """
    Load the experiment file (or defaults) with command-line overrides applied.

    Raises:
        ConfigValidationError: If the resulting config is invalid
    """
    overrides = config_overrides(args)
    if args.config:
        return load_config(args.config, overrides)
    seed = overrides.pop('seed', Config.DEFAULT_SEED)
    return default_config(seed=seed, **overrides)


def run_stage(simulator: Simulator, stage: str) -> Dict[str, Any]:
    """Run the pipeline up to a stage; returns a printable summary."""
    if stage == 'partition':
        datasets = simulator.prepare_data()
        return {'users': len(datasets), 'samples': sum(d.num_samples for d in datasets)}
    if stage == 'estimate':
        estimates = simulator.estimate()
        return {'users': len(estimates), 'converged': sum(1 for e in estimates if e.converged)}
    if stage == 'cluster':
        simulator.prepare_data()
        assignment = simulator.cluster()
        return {'clusters': assignment.num_clusters, 'method': assignment.method}
    if stage == 'allocate':
        simulator.prepare_data()
        allocations = simulator.allocate()
        return {'participants': sum(len(a.participants) for a in allocations),
                'dropped': sum(len(a.dropped) for a in allocations),
                'energy_joules': sum(a.energy for a in allocations)}
    if stage == 'train':
        simulator.prepare_data()
        report = simulator.train()
        return {'final_accuracy': report.final_accuracy, 'energy_joules': report.total_energy}
    report = simulator.run()
    return {'final_accuracy': report.final_accuracy, 'energy_joules': report.total_energy,
            'transmit_energy_joules': report.total_transmit_energy,
            'matching_iterations': sum(report.matching_iterations), 'wall_clock_s': report.wall_clock_s}


def run_study(args, config: ExperimentConfig, exporter: ResultExporter) -> Dict[str, Any]:
    """Run one of the allocation or bound studies and write its tables."""
    if args.command == 'bench-matching':
        result = run_allocation_benchmark(config, args.sizes, args.seeds)
        exporter.export_table(result['rows'], 'bench_matching.csv')
        exporter.export_table(result['trace'], 'bench_trace.csv',
                              ['num_users', 'seed', 'iteration', 'energy_joules'])
        exporter.export_report({'benchmark': result['summary']}, 'bench_report.json')
        return result['summary']
    if args.command == 'sweep-tmax':
        result = sweep_t_max(config, args.t_values, include_fixed=not args.no_fixed)
        exporter.export_table(result['rows'], 'sweep_tmax.csv')
        return {'monotone': result['monotone'], 'points': len(result['rows'])}
    if args.command == 'oracle-check':
        result = run_oracle_check(config, args.instances)
        exporter.export_oracle_report(result['rows'])
        exporter.export_report({'oracle': result['summary']}, 'oracle_report.json')
        return result['summary']
    result = run_bound_harness(config, rounds=args.rounds, seeds=list(range(args.seeds)))
    exporter.export_table(result['rows'], 'bound_harness.csv')
    return {'factor': result['factor'], 'rows': len(result['rows'])}


def print_summary(command: str, summary: Dict[str, Any], output_dir: Path) -> None:
    print(f"\n✓ {command} completed successfully!")
    for key, value in summary.items():
        print(f"  {key}: {value}")
    print(f"✓ Outputs written to: {output_dir}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main application entry point."""
    args = None
    try:
        parser = create_argument_parser()
        args = parser.parse_args(argv)

        setup_application_logging(args)

        config = build_config(args)
        output_dir = Path(args.out) if args.out else Config.DEFAULT_OUTPUT_DIR
        exporter = ResultExporter(output_dir)

        if args.command in STAGES:
            save_config(config, output_dir / 'config.json')
            summary = run_stage(Simulator(config, exporter), args.command)
        else:
            summary = run_study(args, config, exporter)

        if not args.quiet:
            print_summary(args.command, summary, output_dir)
        return 0

    except KeyboardInterrupt:
        print("\n\nOperation cancelled by user.")
        return 1

    except Exception as e:
        logging.error(f"Application error: {str(e)}")
        if args is not None and args.verbose:
            import traceback
            traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
