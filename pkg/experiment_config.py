"""
Experiment configuration for the clustered NOMA federated learning simulator

Parses the JSON experiment file into nested dataclasses, fills absent
fields from the Config defaults, rejects unknown keys and collects every
validation problem into one itemized error.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from allocation import AccessMode
from channel import ChannelError, DeviceProfile, LinkBudget, place_devices
from config import Config
from dirichlet_data import DirichletDataError, PartitionSpec
from fl_core import ConvergenceParams, FLError, TrainingConfig
from utils import child_rng, child_seed, write_json_file


class ConfigValidationError(Exception):
    """Exception raised when an experiment file fails validation."""

    def __init__(self, errors: List[str]):
        self.errors = list(errors)
        super().__init__("Invalid experiment configuration:\n  " + "\n  ".join(self.errors))


class ClusteringMode(Enum):
    PROPOSED = 'proposed'
    RANDOM_CLUSTERS = 'random_clusters'
    NO_CLUSTERING = 'no_clustering'


class AllocationMode(Enum):
    MATCHING_KKT = 'matching_kkt'
    MATCHING_FIXED_POWER = 'matching_fixed_power'
    RANDOM_FIXED_POWER = 'random_fixed_power'


@dataclass(frozen=True)
class GroupSpec:
    """Optional grouped prior: users i mod G share a block-structured concentration vector."""

    num_groups: int = 3
    high: float = 5.0
    low: float = 0.1


@dataclass(frozen=True)
class DatasetConfig:
    source: str = 'gaussian'
    feature_dim: int = Config.DEFAULT_FEATURE_DIM
    pool_size_per_class: int = Config.DEFAULT_POOL_SIZE_PER_CLASS
    separation: float = Config.DEFAULT_CLASS_SEPARATION
    noise: float = Config.DEFAULT_FEATURE_NOISE
    images_path: Optional[str] = None
    labels_path: Optional[str] = None
    test_fraction: float = Config.DEFAULT_TEST_FRACTION


@dataclass(frozen=True)
class EstimationConfig:
    tol: float = Config.DEFAULT_ESTIMATION_TOL
    max_iters: int = Config.DEFAULT_ESTIMATION_MAX_ITERS


@dataclass(frozen=True)
class ClusteringConfig:
    z_min: int = Config.DEFAULT_Z_MIN
    z_max: int = Config.DEFAULT_Z_MAX
    z_override: Optional[int] = None
    bandwidth: Optional[float] = None
    bandwidth_rule: str = 'knn'
    restarts: int = Config.DEFAULT_KMEANS_RESTARTS
    kappa_s: float = Config.DEFAULT_KAPPA_S
    delta: float = Config.DEFAULT_DELTA


@dataclass(frozen=True)
class PowerConfig:
    model_bits: float = Config.DEFAULT_MODEL_BITS
    fixed_fraction: float = Config.DEFAULT_FIXED_POWER_FRACTION
    max_cycles: int = Config.MATCHING_MAX_CYCLES


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully resolved experiment description."""

    partition: PartitionSpec
    link: LinkBudget
    devices: Tuple[DeviceProfile, ...]
    training: TrainingConfig
    t_max_s: float = Config.DEFAULT_T_MAX_S
    num_subchannels: int = Config.DEFAULT_NUM_SUBCHANNELS
    clustering_mode: ClusteringMode = ClusteringMode.PROPOSED
    allocation_mode: AllocationMode = AllocationMode.MATCHING_KKT
    access_mode: AccessMode = AccessMode.NOMA
    seed: int = Config.DEFAULT_SEED
    groups: Optional[GroupSpec] = None
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    estimation: EstimationConfig = field(default_factory=EstimationConfig)
    clustering: ClusteringConfig = field(default_factory=ClusteringConfig)
    power: PowerConfig = field(default_factory=PowerConfig)
    convergence: ConvergenceParams = field(default_factory=ConvergenceParams)
    learning_rate_grid: Tuple[float, ...] = Config.DEFAULT_LEARNING_RATE_GRID

    @property
    def num_users(self) -> int:
        return self.partition.num_users


_TOP_KEYS = {
    'seed', 'num_users', 'partition', 'dataset', 'link', 'devices', 'device_defaults', 'training',
    'estimation', 'clustering', 'power', 'convergence', 't_max_s', 'num_subchannels',
    'clustering_mode', 'allocation_mode', 'access_mode',
}


class _Reader:
    """Collects validation errors while reading nested JSON objects."""

    def __init__(self):
        self.errors: List[str] = []

    def section(self, data: Any, path: str, allowed: set) -> Dict[str, Any]:
        if data is None:
            return {}
        if not isinstance(data, dict):
            self.errors.append(f"{path}: expected an object")
            return {}
        for key in data:
            if key not in allowed:
                self.errors.append(f"{path}.{key}: unknown key" if path else f"{key}: unknown key")
        return data

    def number(self, data: Dict[str, Any], key: str, path: str, default, *, integer: bool = False,
               minimum: Optional[float] = None, exclusive_min: bool = False,
               maximum: Optional[float] = None, exclusive_max: bool = False):
        where = f"{path}.{key}" if path else key
        if key not in data or data[key] is None:
            return default
        value = data[key]
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not np.isfinite(value):
            self.errors.append(f"{where}: expected a finite number, got {value!r}")
            return default
        if integer and int(value) != value:
            self.errors.append(f"{where}: expected an integer, got {value!r}")
            return default
        if minimum is not None and (value < minimum or (exclusive_min and value == minimum)):
            bound = '>' if exclusive_min else '>='
            self.errors.append(f"{where}: must be {bound} {minimum}, got {value}")
            return default
        if maximum is not None and (value > maximum or (exclusive_max and value == maximum)):
            bound = '<' if exclusive_max else '<='
            self.errors.append(f"{where}: must be {bound} {maximum}, got {value}")
            return default
        return int(value) if integer else float(value)

    def choice(self, data: Dict[str, Any], key: str, path: str, enum_type, default):
        where = f"{path}.{key}" if path else key
        if key not in data:
            return default
        try:
            return enum_type(data[key])
        except ValueError:
            options = ', '.join(member.value for member in enum_type)
            self.errors.append(f"{where}: must be one of {options}, got {data[key]!r}")
            return default

    def text(self, data: Dict[str, Any], key: str, path: str, default, options=None):
        where = f"{path}.{key}" if path else key
        if key not in data or data[key] is None:
            return default
        value = data[key]
        if not isinstance(value, str):
            self.errors.append(f"{where}: expected a string")
            return default
        if options and value not in options:
            self.errors.append(f"{where}: must be one of {', '.join(options)}, got {value!r}")
            return default
        return value


def _resolve_samples(raw: Any, num_users: int, seed: int, reader: _Reader) -> Tuple[int, ...]:
    """Explicit list, a single count, or an inclusive [min, max] range drawn per user."""
    where = 'partition.samples_per_user'
    if raw is None:
        raw = list(Config.DEFAULT_SAMPLES_PER_USER)
    if isinstance(raw, (int, float)) and not isinstance(raw, bool):
        if int(raw) != raw or raw < 2:
            reader.errors.append(f"{where}: must be an integer >= 2")
            return tuple([2] * num_users)
        return tuple([int(raw)] * num_users)
    if isinstance(raw, dict):
        raw = [raw.get('min'), raw.get('max')]
    if isinstance(raw, list) and all(isinstance(v, int) and not isinstance(v, bool) for v in raw):
        if len(raw) == num_users and num_users != 2:
            values = raw
        elif len(raw) == 2:
            low, high = raw
            if not 2 <= low <= high:
                reader.errors.append(f"{where}: range must satisfy 2 <= min <= max")
                return tuple([2] * num_users)
            rng = child_rng(seed, 'partition', 0)
            values = rng.integers(low, high + 1, size=num_users).tolist()
        else:
            reader.errors.append(f"{where}: expected {num_users} counts or a [min, max] range")
            return tuple([2] * num_users)
        if any(v < 2 for v in values):
            reader.errors.append(f"{where}: every user needs at least 2 samples")
        return tuple(int(v) for v in values)
    reader.errors.append(f"{where}: expected an integer, a list or a {{min, max}} object")
    return tuple([2] * num_users)


def train_sample_count(total: int, test_fraction: float) -> int:
    """Training samples left after the per-user test split (at least one)."""
    return total - min(int(round(test_fraction * total)), total - 1)


def config_from_dict(data: Dict[str, Any]) -> ExperimentConfig:
    """
    Build a validated ExperimentConfig from parsed JSON.

    Raises:
        ConfigValidationError: With one entry per problem found
    """
    reader = _Reader()
    top = reader.section(data, '', _TOP_KEYS)

    seed = reader.number(top, 'seed', '', None, integer=True, minimum=0)
    if 'seed' not in top:
        reader.errors.append("seed: required (no implicit entropy)")
    seed = seed if seed is not None else 0

    # Partition
    part = reader.section(top.get('partition'), 'partition',
                          {'num_users', 'num_classes', 'concentration', 'samples_per_user', 'groups'})
    num_users = reader.number(part, 'num_users', 'partition', None, integer=True, minimum=2)
    if num_users is None:
        num_users = reader.number(top, 'num_users', '', Config.DEFAULT_NUM_USERS, integer=True, minimum=2)
    num_classes = reader.number(part, 'num_classes', 'partition', Config.DEFAULT_NUM_CLASSES, integer=True, minimum=2)
    concentration = reader.number(part, 'concentration', 'partition', Config.DEFAULT_CONCENTRATION,
                                  minimum=0.0, exclusive_min=True)
    samples = _resolve_samples(part.get('samples_per_user'), num_users, seed, reader)

    groups = None
    if part.get('groups') is not None:
        g = reader.section(part.get('groups'), 'partition.groups', {'num_groups', 'high', 'low'})
        groups = GroupSpec(
            num_groups=reader.number(g, 'num_groups', 'partition.groups', 3, integer=True, minimum=1,
                                     maximum=num_classes),
            high=reader.number(g, 'high', 'partition.groups', 5.0, minimum=0.0, exclusive_min=True),
            low=reader.number(g, 'low', 'partition.groups', 0.1, minimum=0.0, exclusive_min=True),
        )

    # Dataset
    ds = reader.section(top.get('dataset'), 'dataset',
                        {'source', 'feature_dim', 'pool_size_per_class', 'separation', 'noise',
                         'images_path', 'labels_path', 'test_fraction'})
    dataset = DatasetConfig(
        source=reader.text(ds, 'source', 'dataset', 'gaussian', options=('gaussian', 'idx')),
        feature_dim=reader.number(ds, 'feature_dim', 'dataset', Config.DEFAULT_FEATURE_DIM, integer=True, minimum=1),
        pool_size_per_class=reader.number(ds, 'pool_size_per_class', 'dataset', Config.DEFAULT_POOL_SIZE_PER_CLASS,
                                          integer=True, minimum=1),
        separation=reader.number(ds, 'separation', 'dataset', Config.DEFAULT_CLASS_SEPARATION, minimum=0.0),
        noise=reader.number(ds, 'noise', 'dataset', Config.DEFAULT_FEATURE_NOISE, minimum=0.0),
        images_path=reader.text(ds, 'images_path', 'dataset', None),
        labels_path=reader.text(ds, 'labels_path', 'dataset', None),
        test_fraction=reader.number(ds, 'test_fraction', 'dataset', Config.DEFAULT_TEST_FRACTION,
                                    minimum=0.0, maximum=1.0, exclusive_max=True),
    )
    if dataset.source == 'idx' and not (dataset.images_path and dataset.labels_path):
        reader.errors.append("dataset: idx source needs images_path and labels_path")

    # Link budget
    lk = reader.section(top.get('link'), 'link',
                        {'bandwidth_hz', 'noise_psd_dbm_hz', 'noise_variance', 'wavelength_m', 'antenna_gain',
                         'pathloss_exp', 'cell_radius_m', 'min_distance_m'})
    bandwidth = reader.number(lk, 'bandwidth_hz', 'link', Config.DEFAULT_BANDWIDTH_HZ, minimum=0.0, exclusive_min=True)
    psd = reader.number(lk, 'noise_psd_dbm_hz', 'link', Config.DEFAULT_NOISE_PSD_DBM_HZ)
    noise_variance = reader.number(lk, 'noise_variance', 'link', Config.noise_variance(bandwidth, psd),
                                   minimum=0.0, exclusive_min=True)
    link_values = dict(
        bandwidth_hz=bandwidth,
        noise_variance=noise_variance,
        wavelength_m=reader.number(lk, 'wavelength_m', 'link', Config.DEFAULT_WAVELENGTH_M, minimum=0.0, exclusive_min=True),
        antenna_gain=reader.number(lk, 'antenna_gain', 'link', Config.DEFAULT_ANTENNA_GAIN, minimum=0.0, exclusive_min=True),
        pathloss_exp=reader.number(lk, 'pathloss_exp', 'link', Config.DEFAULT_PATHLOSS_EXP, minimum=0.0, exclusive_min=True),
        cell_radius_m=reader.number(lk, 'cell_radius_m', 'link', Config.DEFAULT_CELL_RADIUS_M, minimum=0.0, exclusive_min=True),
        min_distance_m=reader.number(lk, 'min_distance_m', 'link', Config.DEFAULT_MIN_DISTANCE_M, minimum=0.0, exclusive_min=True),
    )
    try:
        link = LinkBudget(**link_values)
    except ChannelError as e:
        reader.errors.append(f"link: {str(e)}")
        link = LinkBudget()

    # Training
    tr = reader.section(top.get('training'), 'training',
                        {'learning_rate', 'local_epochs', 'batch_size', 'rounds', 'learning_rate_grid'})
    try:
        training = TrainingConfig(
            learning_rate=reader.number(tr, 'learning_rate', 'training', Config.DEFAULT_LEARNING_RATE, minimum=0.0),
            local_epochs=reader.number(tr, 'local_epochs', 'training', Config.DEFAULT_LOCAL_EPOCHS, integer=True, minimum=1),
            batch_size=reader.number(tr, 'batch_size', 'training', Config.DEFAULT_BATCH_SIZE, integer=True, minimum=1),
            rounds=reader.number(tr, 'rounds', 'training', Config.DEFAULT_ROUNDS, integer=True, minimum=1),
        )
    except FLError as e:
        reader.errors.append(f"training: {str(e)}")
        training = TrainingConfig()
    grid = tr.get('learning_rate_grid', list(Config.DEFAULT_LEARNING_RATE_GRID))
    if not isinstance(grid, list) or not grid or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) and v > 0 for v in grid):
        reader.errors.append("training.learning_rate_grid: expected a non-empty list of positive numbers")
        grid = list(Config.DEFAULT_LEARNING_RATE_GRID)

    # Estimation, clustering, power, convergence
    es = reader.section(top.get('estimation'), 'estimation', {'tol', 'max_iters'})
    estimation = EstimationConfig(
        tol=reader.number(es, 'tol', 'estimation', Config.DEFAULT_ESTIMATION_TOL, minimum=0.0, exclusive_min=True),
        max_iters=reader.number(es, 'max_iters', 'estimation', Config.DEFAULT_ESTIMATION_MAX_ITERS, integer=True, minimum=1),
    )

    cl = reader.section(top.get('clustering'), 'clustering',
                        {'z_min', 'z_max', 'z_override', 'bandwidth', 'bandwidth_rule', 'restarts', 'kappa_s', 'delta'})
    clustering = ClusteringConfig(
        z_min=reader.number(cl, 'z_min', 'clustering', Config.DEFAULT_Z_MIN, integer=True, minimum=1),
        z_max=reader.number(cl, 'z_max', 'clustering', Config.DEFAULT_Z_MAX, integer=True, minimum=1),
        z_override=reader.number(cl, 'z_override', 'clustering', None, integer=True, minimum=1, maximum=num_users),
        bandwidth=reader.number(cl, 'bandwidth', 'clustering', None, minimum=0.0, exclusive_min=True),
        bandwidth_rule=reader.text(cl, 'bandwidth_rule', 'clustering', 'knn', options=('knn', 'median')),
        restarts=reader.number(cl, 'restarts', 'clustering', Config.DEFAULT_KMEANS_RESTARTS, integer=True, minimum=1),
        kappa_s=reader.number(cl, 'kappa_s', 'clustering', Config.DEFAULT_KAPPA_S, minimum=0.0, exclusive_min=True),
        delta=reader.number(cl, 'delta', 'clustering', Config.DEFAULT_DELTA, minimum=0.0, exclusive_min=True,
                            maximum=1.0, exclusive_max=True),
    )
    if clustering.z_min > clustering.z_max:
        reader.errors.append("clustering: z_min must not exceed z_max")

    pw = reader.section(top.get('power'), 'power', {'model_bits', 'fixed_fraction', 'max_cycles'})
    power = PowerConfig(
        model_bits=reader.number(pw, 'model_bits', 'power', Config.DEFAULT_MODEL_BITS, minimum=0.0, exclusive_min=True),
        fixed_fraction=reader.number(pw, 'fixed_fraction', 'power', Config.DEFAULT_FIXED_POWER_FRACTION,
                                     minimum=0.0, exclusive_min=True, maximum=1.0),
        max_cycles=reader.number(pw, 'max_cycles', 'power', Config.MATCHING_MAX_CYCLES, integer=True, minimum=1),
    )

    cv = reader.section(top.get('convergence'), 'convergence',
                        {'lipschitz', 'pl_constant', 'grad_variance_bound', 'confidence', 'concentration_sum'})
    default_lipschitz = 1.0 / training.learning_rate if training.learning_rate > 0 else 1.0
    try:
        convergence = ConvergenceParams(
            lipschitz=reader.number(cv, 'lipschitz', 'convergence', default_lipschitz, minimum=0.0, exclusive_min=True),
            pl_constant=reader.number(cv, 'pl_constant', 'convergence', 0.01, minimum=0.0, exclusive_min=True),
            grad_variance_bound=reader.number(cv, 'grad_variance_bound', 'convergence', 1.0,
                                              minimum=0.0, exclusive_min=True),
            confidence=reader.number(cv, 'confidence', 'convergence', Config.DEFAULT_DELTA, minimum=0.0,
                                     exclusive_min=True, maximum=1.0, exclusive_max=True),
            concentration_sum=reader.number(cv, 'concentration_sum', 'convergence', 1.0,
                                            minimum=0.0, exclusive_min=True),
        )
    except FLError as e:
        reader.errors.append(f"convergence: {str(e)}")
        convergence = ConvergenceParams()

    t_max = reader.number(top, 't_max_s', '', Config.DEFAULT_T_MAX_S, minimum=0.0, exclusive_min=True)
    num_subchannels = reader.number(top, 'num_subchannels', '', Config.DEFAULT_NUM_SUBCHANNELS, integer=True, minimum=1)
    clustering_mode = reader.choice(top, 'clustering_mode', '', ClusteringMode, ClusteringMode.PROPOSED)
    allocation_mode = reader.choice(top, 'allocation_mode', '', AllocationMode, AllocationMode.MATCHING_KKT)
    access_mode = reader.choice(top, 'access_mode', '', AccessMode, AccessMode.NOMA)

    try:
        partition = PartitionSpec(num_users=num_users, num_classes=num_classes,
                                  concentration=concentration, samples_per_user=samples)
    except DirichletDataError as e:
        reader.errors.append(f"partition: {str(e)}")
        partition = None

    devices = _resolve_devices(top, partition, dataset, link, seed, reader)

    if reader.errors:
        raise ConfigValidationError(reader.errors)

    return ExperimentConfig(
        partition=partition, link=link, devices=devices, training=training, t_max_s=t_max,
        num_subchannels=num_subchannels, clustering_mode=clustering_mode, allocation_mode=allocation_mode,
        access_mode=access_mode, seed=seed, groups=groups, dataset=dataset, estimation=estimation,
        clustering=clustering, power=power, convergence=convergence, learning_rate_grid=tuple(float(v) for v in grid),
    )


_DEVICE_KEYS = {'user_id', 'cpu_hz', 'samples', 'cycles_per_bit', 'energy_coeff', 'distance_m', 'max_power_w'}


def _resolve_devices(top: Dict[str, Any], partition: Optional[PartitionSpec], dataset: DatasetConfig,
                     link: LinkBudget, seed: int, reader: _Reader) -> Tuple[DeviceProfile, ...]:
    """Explicit device list, or devices dropped in the cell from the seed."""
    if partition is None:
        return ()
    explicit = top.get('devices')
    if explicit is not None:
        if not isinstance(explicit, list) or len(explicit) != partition.num_users:
            reader.errors.append(f"devices: expected a list of {partition.num_users} device objects")
            return ()
        devices = []
        for idx, raw in enumerate(explicit):
            entry = reader.section(raw, f"devices[{idx}]", _DEVICE_KEYS)
            try:
                devices.append(DeviceProfile(**entry))
            except (TypeError, ChannelError) as e:
                reader.errors.append(f"devices[{idx}]: {str(e)}")
        if [d.user_id for d in devices] != list(range(len(devices))):
            reader.errors.append("devices: user ids must be 0..N-1 in order")
        return tuple(devices)

    dd = reader.section(top.get('device_defaults'), 'device_defaults',
                        {'cpu_hz_min', 'cpu_hz_max', 'cycles_per_bit', 'energy_coeff', 'max_power_w'})
    cpu_low = reader.number(dd, 'cpu_hz_min', 'device_defaults', Config.DEFAULT_CPU_HZ_RANGE[0],
                            minimum=0.0, exclusive_min=True)
    cpu_high = reader.number(dd, 'cpu_hz_max', 'device_defaults', Config.DEFAULT_CPU_HZ_RANGE[1],
                             minimum=0.0, exclusive_min=True)
    if cpu_low > cpu_high:
        reader.errors.append("device_defaults: cpu_hz_min exceeds cpu_hz_max")
        return ()
    train_counts = [train_sample_count(s, dataset.test_fraction) for s in partition.samples_per_user]
    return tuple(place_devices(
        train_counts, link, child_seed(seed, 'devices'),
        cpu_hz_range=(cpu_low, cpu_high),
        cycles_per_bit=reader.number(dd, 'cycles_per_bit', 'device_defaults', Config.DEFAULT_CYCLES_PER_BIT,
                                     minimum=0.0, exclusive_min=True),
        energy_coeff=reader.number(dd, 'energy_coeff', 'device_defaults', Config.DEFAULT_ENERGY_COEFF,
                                   minimum=0.0, exclusive_min=True),
        max_power_w=reader.number(dd, 'max_power_w', 'device_defaults', Config.DEFAULT_P_MAX_W, minimum=0.0),
    ))


def load_config(path: Union[str, Path], overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    """
    Load and validate an experiment file.

    Args:
        path: JSON experiment file
        overrides: Top-level keys replacing the file's values before validation

    Raises:
        ConfigValidationError: If the file is missing, is not JSON or fails validation
    """
    path = Path(path)
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except FileNotFoundError:
        raise ConfigValidationError([f"{path}: file not found"])
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigValidationError([f"{path}: {str(e)}"])
    if not isinstance(data, dict):
        raise ConfigValidationError([f"{path}: top level must be an object"])
    data.update(overrides or {})
    config = config_from_dict(data)
    logging.info(f"Loaded experiment config {path} (seed {config.seed}, {config.num_users} users)")
    return config


def config_to_dict(config: ExperimentConfig) -> Dict[str, Any]:
    """Resolved config as JSON-ready data; config_from_dict inverts it."""
    data = {
        'seed': config.seed,
        'partition': {
            'num_users': config.partition.num_users,
            'num_classes': config.partition.num_classes,
            'concentration': config.partition.concentration,
            'samples_per_user': list(config.partition.samples_per_user),
        },
        'dataset': asdict(config.dataset),
        'link': asdict(config.link),
        'devices': [asdict(d) for d in config.devices],
        'training': dict(asdict(config.training), learning_rate_grid=list(config.learning_rate_grid)),
        'estimation': asdict(config.estimation),
        'clustering': asdict(config.clustering),
        'power': asdict(config.power),
        'convergence': asdict(config.convergence),
        't_max_s': config.t_max_s,
        'num_subchannels': config.num_subchannels,
        'clustering_mode': config.clustering_mode.value,
        'allocation_mode': config.allocation_mode.value,
        'access_mode': config.access_mode.value,
    }
    if config.groups is not None:
        data['partition']['groups'] = asdict(config.groups)
    # Two explicit counts would read back as a [min, max] range.
    if config.partition.num_users == 2:
        counts = data['partition']['samples_per_user']
        if counts[0] != counts[1]:
            raise ConfigValidationError(["partition.samples_per_user: two distinct counts cannot be serialized"])
        data['partition']['samples_per_user'] = counts[0]
    return data


def save_config(config: ExperimentConfig, path: Union[str, Path]) -> Path:
    """Write the resolved config as JSON."""
    path = Path(path)
    if not write_json_file(path, config_to_dict(config)):
        raise ConfigValidationError([f"{path}: could not write config"])
    return path


def default_config(seed: int = Config.DEFAULT_SEED, num_users: int = Config.DEFAULT_NUM_USERS,
                   **overrides: Any) -> ExperimentConfig:
    """Config built from defaults, with top-level JSON keys as overrides."""
    data: Dict[str, Any] = {'seed': seed, 'num_users': num_users}
    data.update(overrides)
    return config_from_dict(data)
