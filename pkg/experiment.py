"""
Experiment orchestration for the clustered NOMA federated learning simulator

Runs the partition -> estimate -> cluster -> allocate -> train pipeline and
the allocation studies built on it: the matching benchmark against the
exhaustive optimum, the deadline sweep, the KKT-versus-oracle check and the
convergence-bound harness on a quadratic toy problem.
"""

import logging
import math
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from allocation import (
    AccessMode, AllocationContext, Matching, MatchingResult, PowerMode, PowerSolution,
    brute_force_matching, enumerate_matchings, kkt_audit, kkt_power_allocate, match_subchannels,
    matching_cost_key, pad_with_virtual_users, power_oracle, random_matching,
)
from channel import (
    ChannelPairState, DeviceProfile, computation_time, order_pair, place_devices, realize_channels,
)
from clustering import ClusterAssignment, excess_risk_bound, random_cluster_assignment, spectral_cluster
from config import Config
from datasets import load_idx, make_gaussian_clouds
from dirichlet_data import (
    EstimationResult, LabelHistogram, UserDataset, block_group_alphas, estimate_concentration,
    sample_dirichlet_partition, sample_grouped_partition, split_train_test,
)
from experiment_config import AllocationMode, ClusteringMode, ExperimentConfig
from exporter import ResultExporter
from fl_core import (
    ConvergenceParams, ModelParams, QuadraticLoss, SoftmaxRegression, TrainingConfig, convergence_bound_rhs,
    convergence_contraction, evaluate_accuracy, fedavg_aggregate, global_loss, local_sgd_update, moving_average,
    reference_optimum,
)
from utils import all_finite, child_rng, child_seed, measure_time


class WorkflowError(Exception):
    """Exception raised when a pipeline stage fails, tagged with where it failed."""

    def __init__(self, module: str, message: str, round_index: Optional[int] = None,
                 cluster_id: Optional[int] = None):
        self.module = module
        self.round_index = round_index
        self.cluster_id = cluster_id
        where = [f"module={module}"]
        if round_index is not None:
            where.append(f"round={round_index}")
        if cluster_id is not None:
            where.append(f"cluster={cluster_id}")
        super().__init__(f"[{' '.join(where)}] {message}")


@contextmanager
def _stage(module: str, round_index: Optional[int] = None, cluster_id: Optional[int] = None):
    try:
        yield
    except WorkflowError:
        raise
    except Exception as e:
        raise WorkflowError(module, f"{type(e).__name__}: {str(e)}", round_index, cluster_id) from e


_POWER_MODES = {
    AllocationMode.MATCHING_KKT: PowerMode.KKT,
    AllocationMode.MATCHING_FIXED_POWER: PowerMode.FIXED,
    AllocationMode.RANDOM_FIXED_POWER: PowerMode.FIXED,
}


@dataclass
class RoundAllocation:
    """Sub-channel assignment and powers of one cluster in one round."""

    round_index: int
    cluster_id: int
    selected: List[int]
    participants: List[int]
    dropped: Dict[int, str]
    matching: Optional[MatchingResult]
    solutions: Dict[int, PowerSolution]
    energy: float = 0.0
    transmit_energy: float = 0.0
    gains: Dict[int, np.ndarray] = field(default_factory=dict)
    virtual_ids: List[int] = field(default_factory=list)

    def matching_rows(self) -> List[Dict[str, Any]]:
        rows = []
        for k, sol in sorted(self.solutions.items()):
            rows.append({
                'round': self.round_index, 'cluster_id': self.cluster_id, 'subchannel': k,
                'first_user': -1 if sol.first_id in self.virtual_ids else sol.first_id,
                'second_user': -1 if sol.second_id in self.virtual_ids else sol.second_id,
                'p11': sol.p11, 'p12': sol.p12, 'p2': sol.p2, 'kkt_case': sol.kkt_case.value,
                'feasible': sol.feasible, 'energy_joules': sol.energy if sol.feasible else '',
                'reason': sol.reason,
            })
        return rows


@dataclass
class RunReport:
    """Everything a pipeline run produced."""

    metrics: List[Dict[str, Any]] = field(default_factory=list)
    final_accuracy: Dict[int, float] = field(default_factory=dict)
    final_accuracy_smoothed: Dict[int, float] = field(default_factory=dict)
    total_energy: float = 0.0
    total_transmit_energy: float = 0.0
    matching_iterations: List[int] = field(default_factory=list)
    wall_clock_s: float = 0.0
    matching_rows: List[Dict[str, Any]] = field(default_factory=list)
    channel_rows: List[Dict[str, Any]] = field(default_factory=list)
    infeasible: List[Dict[str, Any]] = field(default_factory=list)
    assignment: Optional[ClusterAssignment] = None
    group_ids: Optional[np.ndarray] = None
    models: Dict[int, ModelParams] = field(default_factory=dict)

    @property
    def num_clusters(self) -> int:
        return self.assignment.num_clusters if self.assignment is not None else 0

    def summary(self, config: ExperimentConfig) -> Dict[str, Any]:
        numbers = [row[key] for row in self.metrics for key in row if isinstance(row[key], float)]
        reconciled = all(row['selected'] == row['participants'] + row['infeasible'] for row in self.metrics)
        accuracies = list(self.final_accuracy.values())
        return {
            'seed': config.seed,
            'num_users': config.num_users,
            'clustering_mode': config.clustering_mode.value,
            'allocation_mode': config.allocation_mode.value,
            'access_mode': config.access_mode.value,
            'num_clusters': self.num_clusters,
            'clustering_method': self.assignment.method if self.assignment is not None else None,
            'excess_risk_bound': excess_risk_bound(max(self.num_clusters, 1), config.num_users,
                                                   config.clustering.kappa_s, config.clustering.delta),
            'final_accuracy': {str(k): v for k, v in sorted(self.final_accuracy.items())},
            'mean_final_accuracy': float(np.mean(accuracies)) if accuracies else None,
            'final_accuracy_smoothed': {str(k): v for k, v in sorted(self.final_accuracy_smoothed.items())},
            'total_energy_joules': self.total_energy,
            'total_transmit_energy_joules': self.total_transmit_energy,
            'matching_iterations': int(sum(self.matching_iterations)),
            'infeasible_users': len(self.infeasible),
            'wall_clock_s': self.wall_clock_s,
            'checks': {
                'rows_match_rounds_times_clusters': len(self.metrics) == config.training.rounds * self.num_clusters,
                'all_numbers_finite': all_finite(numbers) if numbers else True,
                'participation_reconciled': reconciled,
            },
        }


class Simulator:
    """
    Runs the clustered NOMA federated learning pipeline for one experiment config.
    """

    def __init__(self, config: ExperimentConfig, exporter: Optional[ResultExporter] = None):
        """
        Initialize the Simulator.

        Args:
            config: Resolved experiment config
            exporter: Optional exporter; when given, every stage writes its outputs
        """
        self.config = config
        self.exporter = exporter
        self.devices = {d.user_id: d for d in config.devices}

        self.train_sets: Optional[List[UserDataset]] = None
        self.test_sets: Optional[List[UserDataset]] = None
        self.group_ids: Optional[np.ndarray] = None
        self.estimates: Optional[List[EstimationResult]] = None
        self.assignment: Optional[ClusterAssignment] = None

    # Data

    def _source_pool(self) -> Tuple[np.ndarray, np.ndarray]:
        ds = self.config.dataset
        if ds.source == 'idx':
            return load_idx(ds.images_path, ds.labels_path)
        return make_gaussian_clouds(
            num_classes=self.config.partition.num_classes, feature_dim=ds.feature_dim,
            samples_per_class=ds.pool_size_per_class, separation=ds.separation, noise=ds.noise,
            rng_seed=child_seed(self.config.seed, 'partition', 2),
        )

    @measure_time
    def prepare_data(self) -> List[UserDataset]:
        """
        Partition the pool into user datasets and split each into train and test.

        Returns:
            Training datasets, indexed by user id

        Raises:
            WorkflowError: If the pool cannot be built or partitioned
        """
        cfg = self.config
        with _stage('dirichlet_data'):
            features, labels = self._source_pool()
            partition_seed = child_seed(cfg.seed, 'partition', 1)
            if cfg.groups is not None:
                alphas = block_group_alphas(cfg.partition.num_classes, cfg.groups.num_groups,
                                            cfg.groups.high, cfg.groups.low)
                datasets, self.group_ids = sample_grouped_partition(cfg.partition, alphas, labels, partition_seed,
                                                                    features)
            else:
                datasets = sample_dirichlet_partition(cfg.partition, labels, partition_seed, features)

            self.train_sets, self.test_sets = [], []
            for data in datasets:
                train, test = split_train_test(data, cfg.dataset.test_fraction,
                                               child_seed(cfg.seed, 'partition', 3, data.user_id))
                self.train_sets.append(train)
                self.test_sets.append(test)

        for train in self.train_sets:
            device = self.devices.get(train.user_id)
            if device is None or device.samples != train.num_samples:
                raise WorkflowError('channel', f"Device {train.user_id} must hold {train.num_samples} samples "
                                               f"(its training set size)")

        logging.info(f"Partitioned {len(self.train_sets)} users over {cfg.partition.num_classes} classes "
                     f"(concentration {cfg.partition.concentration})")
        if self.exporter is not None:
            self.exporter.export_histograms([d.histogram for d in self.train_sets])
        return self.train_sets

    @property
    def histograms(self) -> List[LabelHistogram]:
        if self.train_sets is None:
            self.prepare_data()
        return [d.histogram for d in self.train_sets]

    @measure_time
    def estimate(self) -> List[EstimationResult]:
        """Estimate every user's concentration vector from its training histogram."""
        histograms = self.histograms
        est = self.config.estimation
        results = []
        for hist in histograms:
            with _stage('dirichlet_data'):
                results.append(estimate_concentration(hist, tol=est.tol, max_iters=est.max_iters))
        unconverged = sum(1 for r in results if not r.converged)
        logging.info(f"Estimated concentration vectors for {len(results)} users "
                     f"({unconverged} without convergence)")
        self.estimates = results
        if self.exporter is not None:
            self.exporter.export_alphas(results)
        return results

    @measure_time
    def cluster(self) -> ClusterAssignment:
        """
        Group users by their normalized concentration vectors.

        The random-clusters baseline uses the same number of clusters the
        spectral pipeline finds; no_clustering puts everyone in cluster 1.
        """
        cfg = self.config
        n = cfg.num_users
        if cfg.clustering_mode == ClusteringMode.NO_CLUSTERING:
            assignment = ClusterAssignment(labels=np.ones(n, dtype=np.int64), num_clusters=1, method='none')
        else:
            if self.estimates is None:
                self.estimate()
            points = np.vstack([r.alpha.normalized() for r in self.estimates])
            cl = cfg.clustering
            with _stage('clustering'):
                assignment = spectral_cluster(points, bandwidth=cl.bandwidth, z_override=cl.z_override,
                                              rng_seed=child_seed(cfg.seed, 'cluster', 0), z_min=cl.z_min,
                                              z_max=cl.z_max, restarts=cl.restarts, bandwidth_rule=cl.bandwidth_rule)
                if cfg.clustering_mode == ClusteringMode.RANDOM_CLUSTERS:
                    spectrum = assignment.eigenvalues
                    assignment = random_cluster_assignment(n, assignment.num_clusters,
                                                           child_seed(cfg.seed, 'cluster', 1))
                    assignment.eigenvalues = spectrum

        self.assignment = assignment
        logging.info(f"Cluster assignment: {assignment.num_clusters} clusters ({assignment.method})")
        if self.exporter is not None:
            self.exporter.export_clusters(assignment.labels, self.group_ids)
            if assignment.eigenvalues.size:
                self.exporter.export_spectrum(assignment.eigenvalues)
        return assignment

    # Allocation

    def select_participants(self, round_index: int, cluster_id: int, members: Sequence[int]) -> List[int]:
        """
        Members that finish computing before the deadline, at most 2K of them.

        When more qualify, a seeded random subset is taken, so every access
        mode sees the same participants.
        """
        cfg = self.config
        eligible = [u for u in sorted(members)
                    if computation_time(self.devices[u], cfg.power.model_bits) < cfg.t_max_s]
        slots = 2 * cfg.num_subchannels
        if len(eligible) <= slots:
            return eligible
        rng = child_rng(cfg.seed, 'selection', round_index, cluster_id)
        return sorted(int(u) for u in rng.choice(eligible, size=slots, replace=False))

    def allocate_round(self, round_index: int, cluster_id: int, members: Sequence[int]) -> RoundAllocation:
        """
        Realize channels, match users to sub-channels and allocate powers for one cluster.

        Users of infeasible pairs are dropped with the allocator's reason.
        """
        cfg = self.config
        selected = self.select_participants(round_index, cluster_id, members)
        late = sorted(set(members) - set(selected))
        if late:
            logging.debug(f"Round {round_index} cluster {cluster_id}: {len(late)} members not selected")
        if not selected:
            return RoundAllocation(round_index, cluster_id, [], [], {}, None, {})

        with _stage('allocation', round_index, cluster_id):
            padded = pad_with_virtual_users([self.devices[u] for u in selected], cfg.num_subchannels)
            virtual_ids = [d.user_id for d in padded if d.is_virtual]
            gain_matrix = realize_channels(padded, cfg.num_subchannels, round_index, cfg.link, cfg.seed)
            gains = {d.user_id: gain_matrix[row] for row, d in enumerate(padded)}
            context = AllocationContext(padded, gains, cfg.power.model_bits, cfg.t_max_s, cfg.link,
                                        _POWER_MODES[cfg.allocation_mode], cfg.access_mode,
                                        cfg.power.fixed_fraction)
            users = [d.user_id for d in padded]
            channels = list(range(cfg.num_subchannels))
            matching_seed = child_seed(cfg.seed, 'matching', round_index, cluster_id)
            if cfg.allocation_mode == AllocationMode.RANDOM_FIXED_POWER:
                mu = random_matching(users, channels, matching_seed)
                result = MatchingResult(matching=mu, iterations=0, cycles=0, energy_trace=[], converged=True)
            else:
                result = match_subchannels(users, channels, context, matching_seed,
                                           max_cycles=cfg.power.max_cycles)
            solutions = context.solutions(result.matching)

        participants, dropped = [], {}
        energy = transmit = 0.0
        for k, sol in sorted(solutions.items()):
            real = [u for u in (sol.first_id, sol.second_id) if u not in virtual_ids]
            if sol.feasible:
                participants.extend(real)
                energy += sol.energy
                transmit += sol.transmit_energy
            else:
                for u in real:
                    dropped[u] = sol.reason
                    logging.warning(f"Round {round_index} cluster {cluster_id}: user {u} dropped on "
                                    f"sub-channel {k} ({sol.reason})")

        return RoundAllocation(
            round_index=round_index, cluster_id=cluster_id, selected=selected, participants=sorted(participants),
            dropped=dropped, matching=result, solutions=solutions, energy=energy, transmit_energy=transmit,
            gains={u: g for u, g in gains.items() if u not in virtual_ids}, virtual_ids=virtual_ids,
        )

    @measure_time
    def allocate(self, round_index: int = 1) -> List[RoundAllocation]:
        """One round of allocation for every cluster, without training."""
        assignment = self.assignment or self.cluster()
        allocations = [self.allocate_round(round_index, z, assignment.members(z))
                       for z in range(1, assignment.num_clusters + 1)]
        if self.exporter is not None:
            self.exporter.export_matching([row for a in allocations for row in a.matching_rows()])
            self.exporter.export_channels(
                [{'round': a.round_index, 'user_id': u, 'gains': g} for a in allocations for u, g in sorted(a.gains.items())],
                self.config.num_subchannels)
        return allocations

    # Training

    @measure_time
    def train(self) -> RunReport:
        """
        Federated training of one model per cluster over config.training.rounds rounds.

        Returns:
            RunReport with one metrics row per (round, cluster)
        """
        cfg = self.config
        if self.train_sets is None:
            self.prepare_data()
        assignment = self.assignment or self.cluster()
        objective = SoftmaxRegression(cfg.partition.num_classes, self.train_sets[0].features.shape[1])
        report = RunReport(assignment=assignment, group_ids=self.group_ids)
        eval_sets = self.test_sets if any(d.num_samples for d in self.test_sets) else self.train_sets

        models, optimum, previous_gap = {}, {}, {}
        for z in range(1, assignment.num_clusters + 1):
            members = assignment.members(z)
            models[z] = objective.init_params()
            with _stage('fl_core', 0, z):
                optimum[z] = reference_optimum(self.train_sets, members, objective)
                previous_gap[z] = max(global_loss(self.train_sets, models[z], members, objective) - optimum[z], 0.0)

        eta = 1.0 / cfg.convergence.lipschitz
        premise_warned = False

        for t in range(1, cfg.training.rounds + 1):
            for z in range(1, assignment.num_clusters + 1):
                members = assignment.members(z)
                allocation = self.allocate_round(t, z, members)
                report.matching_rows.extend(allocation.matching_rows())
                report.channel_rows.extend({'round': t, 'user_id': u, 'gains': g}
                                           for u, g in sorted(allocation.gains.items()))
                if allocation.matching is not None:
                    report.matching_iterations.append(allocation.matching.iterations)
                for u, reason in sorted(allocation.dropped.items()):
                    report.infeasible.append({'round': t, 'cluster_id': z, 'user_id': u, 'reason': reason})

                with _stage('fl_core', t, z):
                    betas = [self.train_sets[u].num_samples for u in allocation.participants]
                    if allocation.participants:
                        updates = [
                            (local_sgd_update(models[z], self.train_sets[u], cfg.training,
                                              child_seed(cfg.seed, 'training', t, u), objective),
                             float(self.train_sets[u].num_samples))
                            for u in allocation.participants
                        ]
                        models[z] = fedavg_aggregate(updates)
                        bound = convergence_bound_rhs(previous_gap[z], cfg.convergence, eta, betas,
                                                      variance_sign=1.0, warn=False)
                        factor, premise_ok = convergence_contraction(cfg.convergence, eta, betas)
                        if not premise_ok and not premise_warned:
                            logging.warning(f"Convergence bound premise violated (factor={factor:.4f}, "
                                            f"L={cfg.convergence.lipschitz}); bound_rhs is reported regardless")
                            premise_warned = True
                    else:
                        bound = previous_gap[z]
                    loss = global_loss(self.train_sets, models[z], members, objective)
                    gap = max(loss - optimum[z], 0.0)
                    accuracy = evaluate_accuracy(models[z], [eval_sets[u] for u in members], objective)

                report.metrics.append({
                    'round': t, 'cluster_id': z, 'global_loss': loss, 'optimality_gap': gap, 'test_accuracy': accuracy,
                    'selected': len(allocation.selected), 'participants': len(allocation.participants),
                    'infeasible': len(allocation.dropped), 'energy_joules': allocation.energy,
                    'transmit_energy_joules': allocation.transmit_energy, 'bound_rhs': bound,
                })
                report.total_energy += allocation.energy
                report.total_transmit_energy += allocation.transmit_energy
                report.final_accuracy[z] = accuracy
                previous_gap[z] = gap

            logging.info(f"Round {t}/{cfg.training.rounds}: mean accuracy "
                         f"{np.mean(list(report.final_accuracy.values())):.4f}")

        for z in range(1, assignment.num_clusters + 1):
            rows = [row for row in report.metrics if row['cluster_id'] == z]
            smoothed = moving_average([row['test_accuracy'] for row in rows], Config.MOVING_AVERAGE_WINDOW)
            for row, value in zip(rows, smoothed):
                row['test_accuracy_smoothed'] = float(value)
            report.final_accuracy_smoothed[z] = float(smoothed[-1])

        report.models = models
        if self.exporter is not None:
            self.exporter.export_metrics(report.metrics)
            self.exporter.export_matching(report.matching_rows)
            for z, params in models.items():
                self.exporter.save_checkpoint(params, cfg.training.rounds, z)
        return report

    def run(self) -> RunReport:
        """Run every stage and write the run report."""
        start = time.perf_counter()
        logging.info(f"Starting experiment (seed {self.config.seed}, {self.config.num_users} users, "
                     f"{self.config.clustering_mode.value}/{self.config.allocation_mode.value}/"
                     f"{self.config.access_mode.value})")
        self.prepare_data()
        if self.config.clustering_mode != ClusteringMode.NO_CLUSTERING:
            self.estimate()
        self.cluster()
        report = self.train()
        report.wall_clock_s = time.perf_counter() - start
        if self.exporter is not None:
            self.exporter.export_channels(report.channel_rows, self.config.num_subchannels)
            self.exporter.export_report(report.summary(self.config))
        logging.info(f"Experiment finished in {report.wall_clock_s:.2f} s: total energy "
                     f"{report.total_energy:.4e} J, final accuracy {report.final_accuracy}")
        return report


def run_experiment(config: ExperimentConfig, exporter: Optional[ResultExporter] = None) -> RunReport:
    """
    Execute the full pipeline for a config.

    Raises:
        WorkflowError: With the failing module, round and cluster
    """
    return Simulator(config, exporter).run()


# Allocation studies

def _instance_devices(config: ExperimentConfig, num_users: int, *counters: int) -> List[DeviceProfile]:
    """Fresh devices drawn like the configured population (sample counts, CPU range, radio caps)."""
    template = config.devices
    rng = child_rng(config.seed, 'benchmark', *counters)
    samples = rng.choice([d.samples for d in template], size=num_users).tolist()
    cpu_range = (min(d.cpu_hz for d in template), max(d.cpu_hz for d in template))
    return place_devices(samples, config.link, child_seed(config.seed, 'benchmark', *counters, 1),
                         cpu_hz_range=cpu_range, cycles_per_bit=template[0].cycles_per_bit,
                         energy_coeff=template[0].energy_coeff, max_power_w=template[0].max_power_w)


def _instance_context(config: ExperimentConfig, devices: Sequence[DeviceProfile], num_subchannels: int,
                      t_max: float, power_mode: PowerMode, instance_seed: int,
                      access_mode: Optional[AccessMode] = None) -> AllocationContext:
    gains = realize_channels(devices, num_subchannels, 0, config.link, instance_seed)
    return AllocationContext(devices, {d.user_id: gains[row] for row, d in enumerate(devices)},
                             config.power.model_bits, t_max, config.link, power_mode,
                             access_mode or config.access_mode, config.power.fixed_fraction)


def matching_transmit_energy(mu: Matching, context: AllocationContext) -> float:
    """Transmit-only energy of the feasible pairs of a matching."""
    return float(sum(s.transmit_energy for s in context.solutions(mu).values() if s.feasible))


def _best_of(results: Sequence[MatchingResult], context: AllocationContext) -> MatchingResult:
    best = results[0]
    for candidate in results[1:]:
        if matching_cost_key(candidate.matching, context) < matching_cost_key(best.matching, context):
            best = candidate
    return best


@measure_time
def run_allocation_benchmark(config: ExperimentConfig, instance_sizes: Sequence[Tuple[int, int]],
                             num_seeds: int = 10) -> Dict[str, Any]:
    """
    Compare swap matching against the exhaustive optimum.

    For N <= 4 the swap matching is started from every matching and the
    best stable one kept. Instances where the optimum leaves users
    infeasible are skipped.

    Returns:
        dict with 'rows' (one per instance), 'trace' (energy after every
        swap) and 'summary' (median ratios and timing per size)
    """
    rows, trace, summary = [], [], {}
    for num_users, num_subchannels in instance_sizes:
        for s in range(num_seeds):
            devices = _instance_devices(config, num_users, num_users, s)
            instance_seed = child_seed(config.seed, 'benchmark', num_users, s, 2)
            context = _instance_context(config, devices, num_subchannels, config.t_max_s, PowerMode.KKT,
                                        instance_seed)
            users = [d.user_id for d in devices]
            channels = list(range(num_subchannels))

            start = time.perf_counter()
            if num_users <= 4:
                result = _best_of([match_subchannels(users, channels, context, None, initial=m,
                                                     max_cycles=config.power.max_cycles)
                                   for m in enumerate_matchings(users, channels)], context)
            else:
                result = match_subchannels(users, channels, context, child_seed(config.seed, 'matching', num_users, s),
                                           max_cycles=config.power.max_cycles)
            matching_time = time.perf_counter() - start

            start = time.perf_counter()
            optimum = brute_force_matching(users, channels, context)
            brute_time = time.perf_counter() - start

            opt_key = matching_cost_key(optimum, context)
            found_key = matching_cost_key(result.matching, context)
            if opt_key[0] > 0 or found_key[0] > 0:
                logging.warning(f"Benchmark N={num_users} seed {s}: infeasible users, instance skipped")
                continue

            opt_transmit = matching_transmit_energy(optimum, context)
            found_transmit = matching_transmit_energy(result.matching, context)
            rows.append({
                'num_users': num_users, 'num_subchannels': num_subchannels, 'seed': s,
                'matching_energy': found_key[1], 'optimal_energy': opt_key[1],
                'energy_ratio': found_key[1] / opt_key[1],
                'transmit_ratio': found_transmit / opt_transmit if opt_transmit > 0 else 1.0,
                'iterations': result.iterations, 'cycles': result.cycles, 'converged': result.converged,
                'matching_time_s': matching_time, 'brute_force_time_s': brute_time,
            })
            trace.extend({'num_users': num_users, 'seed': s, 'iteration': i, 'energy_joules': e}
                         for i, e in enumerate(result.energy_trace))

        sized = [r for r in rows if r['num_users'] == num_users]
        if sized:
            summary[f"{num_users}x{num_subchannels}"] = {
                'instances': len(sized),
                'median_energy_ratio': float(np.median([r['energy_ratio'] for r in sized])),
                'median_transmit_ratio': float(np.median([r['transmit_ratio'] for r in sized])),
                'max_cycles': int(max(r['cycles'] for r in sized)),
                'all_converged': all(r['converged'] for r in sized),
                'matching_time_s': float(sum(r['matching_time_s'] for r in sized)),
                'brute_force_time_s': float(sum(r['brute_force_time_s'] for r in sized)),
            }
            logging.info(f"Benchmark {num_users}x{num_subchannels}: {summary[f'{num_users}x{num_subchannels}']}")
    return {'rows': rows, 'trace': trace, 'summary': summary}


@measure_time
def sweep_t_max(config: ExperimentConfig, t_values: Sequence[float], include_fixed: bool = True) -> Dict[str, Any]:
    """
    Total energy of a fixed set of participants as the deadline grows.

    Participants are the first 2K configured devices and their channels stay
    fixed. Each deadline warm-starts matching from the previous deadline's
    result; the KKT leg also starts from the fixed-power leg's matching.

    Returns:
        dict with 'rows' (t_max, mode, energies, infeasible users) and
        'monotone' (KKT energy non-increasing over deadlines where every
        pair is feasible)

    Raises:
        WorkflowError: If t_values is not ascending
    """
    t_values = [float(t) for t in t_values]
    if not t_values or any(b <= a for a, b in zip(t_values, t_values[1:])):
        raise WorkflowError('allocation', "t_values must be non-empty and strictly ascending")

    K = config.num_subchannels
    devices = pad_with_virtual_users(list(config.devices[:2 * K]), K)
    users = [d.user_id for d in devices]
    real = [d.user_id for d in devices if not d.is_virtual]
    channels = list(range(K))
    seed = child_seed(config.seed, 'matching', 0, 0)

    rows = []
    prev = {PowerMode.KKT: None, PowerMode.FIXED: None}
    for t in t_values:
        results = {}
        modes = [PowerMode.FIXED, PowerMode.KKT] if include_fixed else [PowerMode.KKT]
        for mode in modes:
            with _stage('allocation'):
                context = _instance_context(config, devices, K, t, mode, config.seed)
                starts = [match_subchannels(users, channels, context, seed, initial=prev[mode],
                                            max_cycles=config.power.max_cycles)]
                if mode == PowerMode.KKT and PowerMode.FIXED in results:
                    starts.append(match_subchannels(users, channels, context, seed,
                                                    initial=results[PowerMode.FIXED][0].matching,
                                                    max_cycles=config.power.max_cycles))
                best = _best_of(starts, context)
            results[mode] = (best, context)
            prev[mode] = best.matching

            energies = context.user_energies(best.matching)
            infeasible_users = sum(1 for u in real if not np.isfinite(energies[u]))
            rows.append({
                't_max': t, 'mode': mode.value,
                'energy_joules': float(sum(e for e in energies.values() if np.isfinite(e))),
                'transmit_energy_joules': matching_transmit_energy(best.matching, context),
                'infeasible_users': infeasible_users, 'iterations': best.iterations,
            })
            if infeasible_users:
                logging.warning(f"t_max={t}: {infeasible_users} users infeasible under {mode.value} power")

    kkt = [r for r in rows if r['mode'] == PowerMode.KKT.value and r['infeasible_users'] == 0]
    monotone = all(b['energy_joules'] <= a['energy_joules'] * (1 + 1e-9) for a, b in zip(kkt, kkt[1:]))
    return {'rows': rows, 'monotone': monotone}


@measure_time
def run_oracle_check(config: ExperimentConfig, num_instances: int = 100) -> Dict[str, Any]:
    """
    Compare the closed-form KKT allocation with the numerical oracle on random pairs.

    Returns:
        dict with 'rows' (instance, both transmit energies, relative gap,
        case, audit verdict) and 'summary'
    """
    rows = []
    attempts = 0
    while len(rows) < num_instances and attempts < 20 * num_instances:
        attempts += 1
        a, b = _instance_devices(config, 2, attempts)
        gains = realize_channels([a, b], 1, 0, config.link, child_seed(config.seed, 'oracle', attempts))
        first, second = order_pair(a, b)
        g_first, g_second = (gains[0, 0], gains[1, 0]) if first is a else (gains[1, 0], gains[0, 0])
        pair = ChannelPairState.from_user_gains(float(g_first), float(g_second), 0)
        with _stage('allocation'):
            kkt = kkt_power_allocate(pair, (first, second), config.power.model_bits, config.t_max_s, config.link)
            oracle = power_oracle(pair, (first, second), config.power.model_bits, config.t_max_s, config.link)
        if not (kkt.feasible and oracle.feasible):
            if kkt.feasible != oracle.feasible:
                logging.warning(f"Oracle instance {attempts}: feasibility disagrees "
                                f"(kkt={kkt.feasible}, oracle={oracle.feasible})")
            continue
        audit = kkt_audit(kkt, pair, (first, second), config.power.model_bits, config.link)
        gap = (kkt.transmit_energy - oracle.transmit_energy) / max(oracle.transmit_energy, 1e-300)
        rows.append({'instance': len(rows), 'kkt_energy': kkt.transmit_energy,
                     'oracle_energy': oracle.transmit_energy, 'relative_gap': gap,
                     'kkt_case': kkt.kkt_case.value, 'audit_ok': audit.satisfied()})

    gaps = [r['relative_gap'] for r in rows]
    summary = {
        'instances': len(rows),
        'attempts': attempts,
        'max_relative_gap': float(max(gaps)) if gaps else None,
        'audits_passed': sum(1 for r in rows if r['audit_ok']),
        'cases': {case: sum(1 for r in rows if r['kkt_case'] == case) for case in sorted({r['kkt_case'] for r in rows})},
    }
    logging.info(f"Oracle check: {summary}")
    return {'rows': rows, 'summary': summary}


@measure_time
def run_bound_harness(config: ExperimentConfig, rounds: int = 20, seeds: Sequence[int] = (0,),
                      num_users: int = 10, feature_dim: int = 5) -> Dict[str, Any]:
    """
    Track the empirical loss gap of FedAvg on a quadratic toy problem next to the per-round bound.

    Every user holds Gaussian points around its own center; the loss is
    0.5 * ||w - x||^2 (L = mu = 1) with step size 1/L. The gap is measured
    against the exact global minimizer (the sample-weighted mean).

    Returns:
        dict with 'rows' (seed, round, gap, both bound signs, factor) and
        the analytic contraction factor 1 - 2 eta mu sum(beta^2)/(sum beta)^2
    """
    objective = QuadraticLoss(feature_dim)
    training = TrainingConfig(learning_rate=1.0, local_epochs=1, batch_size=config.training.batch_size, rounds=rounds)
    rows = []
    factor = None
    for s in seeds:
        rng = child_rng(s, 'harness', 0)
        sizes = [config.partition.samples_per_user[i % config.num_users] for i in range(num_users)]
        datasets = []
        for u, size in enumerate(sizes):
            center = rng.normal(0.0, 1.0, size=feature_dim)
            points = center + rng.normal(0.0, 0.5, size=(size, feature_dim))
            labels = np.zeros(size, dtype=np.int64)
            datasets.append(UserDataset(u, points, labels, LabelHistogram.from_labels(labels, 2)))
        betas = np.array(sizes, dtype=float)
        pooled = np.vstack([d.features for d in datasets])
        minimum = float(objective.loss(pooled.mean(axis=0), pooled, np.zeros(len(pooled), dtype=np.int64)))
        spread = float(np.mean([np.trace(np.atleast_2d(np.cov(d.features.T))) for d in datasets]))
        params = ConvergenceParams(lipschitz=1.0, pl_constant=1.0, grad_variance_bound=math.sqrt(max(spread, 1e-12)),
                                   confidence=config.convergence.confidence)
        factor, _ = convergence_contraction(params, training.learning_rate, betas)

        users = list(range(num_users))
        model = objective.init_params()
        gap = global_loss(datasets, model, users, objective) - minimum
        rows.append({'seed': s, 'round': 0, 'empirical_gap': gap, 'bound_printed': '', 'bound_descent': '',
                     'factor': factor})
        for t in range(1, rounds + 1):
            updates = [(local_sgd_update(model, datasets[u], training, child_seed(s, 'harness', t, u), objective),
                        float(betas[u])) for u in users]
            model = fedavg_aggregate(updates)
            printed = convergence_bound_rhs(max(gap, 0.0), params, training.learning_rate, betas, variance_sign=-1.0)
            descent = convergence_bound_rhs(max(gap, 0.0), params, training.learning_rate, betas, variance_sign=1.0)
            gap = global_loss(datasets, model, users, objective) - minimum
            rows.append({'seed': s, 'round': t, 'empirical_gap': gap, 'bound_printed': printed,
                         'bound_descent': descent, 'factor': factor})
    return {'rows': rows, 'factor': factor}
