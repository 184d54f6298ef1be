"""
Channel Module for the clustered NOMA federated learning simulator

Models the hybrid OMA/NOMA uplink: large- and small-scale fading, achievable
rates, local computation time and the per-device energy bookkeeping.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from config import Config
from utils import child_rng, is_positive_number


class ChannelError(ValueError):
    """Exception raised for invalid channel or device arguments."""
    pass


class ChannelInvariantError(ChannelError):
    """Exception raised when the SIC gain ordering is violated."""
    pass


@dataclass(frozen=True)
class LinkBudget:
    """Radio parameters shared by every sub-channel."""

    bandwidth_hz: float = Config.DEFAULT_BANDWIDTH_HZ
    noise_variance: float = Config.noise_variance()
    wavelength_m: float = Config.DEFAULT_WAVELENGTH_M
    antenna_gain: float = Config.DEFAULT_ANTENNA_GAIN
    pathloss_exp: float = Config.DEFAULT_PATHLOSS_EXP
    cell_radius_m: float = Config.DEFAULT_CELL_RADIUS_M
    min_distance_m: float = Config.DEFAULT_MIN_DISTANCE_M

    def __post_init__(self):
        for name in ('bandwidth_hz', 'noise_variance', 'wavelength_m', 'antenna_gain',
                     'pathloss_exp', 'cell_radius_m', 'min_distance_m'):
            if not is_positive_number(getattr(self, name)):
                raise ChannelError(f"LinkBudget.{name} must be positive, got {getattr(self, name)}")
        if self.min_distance_m >= self.cell_radius_m:
            raise ChannelError("min_distance_m must be smaller than cell_radius_m")


@dataclass(frozen=True)
class DeviceProfile:
    """
    Computation and radio profile of one user.

    A device with zero samples is a virtual user: it never computes,
    never transmits and only pads a sub-channel to two occupants.
    """

    user_id: int
    cpu_hz: float
    samples: int
    cycles_per_bit: float = Config.DEFAULT_CYCLES_PER_BIT
    energy_coeff: float = Config.DEFAULT_ENERGY_COEFF
    distance_m: float = Config.DEFAULT_CELL_RADIUS_M / 2
    max_power_w: float = Config.DEFAULT_P_MAX_W

    def __post_init__(self):
        if int(self.samples) < 0:
            raise ChannelError(f"Device {self.user_id}: sample count must be non-negative")
        for name in ('cpu_hz', 'cycles_per_bit', 'energy_coeff'):
            if not is_positive_number(getattr(self, name)):
                raise ChannelError(f"Device {self.user_id}: {name} must be positive")
        if not is_positive_number(self.distance_m):
            raise ChannelError(f"Device {self.user_id}: distance must be positive")
        if self.max_power_w < 0 or not np.isfinite(self.max_power_w):
            raise ChannelError(f"Device {self.user_id}: max power must be non-negative and finite")

    @property
    def is_virtual(self) -> bool:
        return int(self.samples) == 0

    @classmethod
    def virtual(cls, user_id: int) -> 'DeviceProfile':
        """Zero-data placeholder used to pad sub-channels."""
        return cls(user_id=user_id, cpu_hz=1.0, samples=0, max_power_w=0.0)


@dataclass(frozen=True)
class ChannelPairState:
    """
    Normalized gains of the two users sharing sub-channel k.

    gain1 belongs to the stronger user, gain2 to the weaker one.
    first_is_strong tells whether the user that finishes computing first
    (and transmits alone in the solo phase) is the stronger one.
    """

    gain1: float
    gain2: float
    subchannel_id: int
    first_is_strong: bool = True

    def __post_init__(self):
        if not (np.isfinite(self.gain1) and np.isfinite(self.gain2)):
            raise ChannelError("Channel gains must be finite")
        if self.gain2 < 0 or self.gain1 < self.gain2:
            raise ChannelInvariantError(f"Gain ordering violated: gain1={self.gain1}, gain2={self.gain2}")

    @classmethod
    def from_user_gains(cls, gain_first: float, gain_second: float, subchannel_id: int) -> 'ChannelPairState':
        """Build the state from the gains of the time-first and time-second users."""
        if gain_first >= gain_second:
            return cls(gain_first, gain_second, subchannel_id, first_is_strong=True)
        return cls(gain_second, gain_first, subchannel_id, first_is_strong=False)

    @property
    def gain_first(self) -> float:
        return self.gain1 if self.first_is_strong else self.gain2

    @property
    def gain_second(self) -> float:
        return self.gain2 if self.first_is_strong else self.gain1


def large_scale_fading(distance_m: float, budget: LinkBudget) -> float:
    """|L_1|^2 = delta_1 * lambda^2 / (16 * pi^2 * d^alpha_PL)."""
    if not is_positive_number(distance_m):
        raise ChannelError(f"Distance must be positive, got {distance_m}")
    amplitude = np.sqrt(budget.antenna_gain) * budget.wavelength_m / np.pi / (4.0 * distance_m ** (budget.pathloss_exp / 2.0))
    return float(amplitude ** 2)


def small_scale_power(rng_seed, size=None):
    """|h_0|^2 for h_0 ~ CN(0, 1), i.e. an Exp(1) draw."""
    rng = np.random.default_rng(rng_seed)
    real = rng.standard_normal(size)
    imag = rng.standard_normal(size)
    power = (real ** 2 + imag ** 2) / 2.0
    return float(power) if size is None else power


def sample_channel_gain(device: DeviceProfile, budget: LinkBudget, rng_seed, size=None):
    """
    Draw the normalized Rayleigh-faded gain |L_1 h_0|^2 / sigma^2.

    Args:
        device: Transmitting device
        budget: Link budget (supplies the noise variance)
        rng_seed: Seed; the same seed gives the same gain
        size: Optional number of i.i.d. draws

    Returns:
        float, or an array when size is given

    Raises:
        ChannelError: If the device distance is not positive
    """
    return large_scale_fading(device.distance_m, budget) * small_scale_power(rng_seed, size) / budget.noise_variance


def _check_non_negative(**values: float) -> None:
    for name, value in values.items():
        if value < 0 or np.isnan(value):
            raise ChannelError(f"{name} must be non-negative, got {value}")


def rate_oma(power_w: float, gain: float, budget: LinkBudget) -> float:
    """Interference-free rate B * log2(1 + P * |h|^2) in bits/s."""
    _check_non_negative(power_w=power_w, gain=gain)
    return float(budget.bandwidth_hz * np.log2(1.0 + power_w * gain))


def rate_noma_interfered(p1: float, p2: float, gain1: float, gain2: float, budget: LinkBudget) -> float:
    """
    Rate of the stronger user decoded first, treating the weaker user as noise.

    Raises:
        ChannelInvariantError: If gain1 < gain2
    """
    _check_non_negative(p1=p1, p2=p2, gain1=gain1, gain2=gain2)
    if gain1 < gain2:
        raise ChannelInvariantError(f"Stronger user gain {gain1} below weaker user gain {gain2}")
    return float(budget.bandwidth_hz * np.log2(1.0 + p1 * gain1 / (p2 * gain2 + 1.0)))


def computation_time(device: DeviceProfile, model_bits: Optional[float] = None) -> float:
    """
    T_COM = cycles_per_bit * samples / cpu_hz.

    model_bits is the size of the model the device trains. Local computation
    time scales with the data, not the model, so it is only validated.

    Raises:
        ChannelError: If model_bits is given and not positive
    """
    if model_bits is not None and not is_positive_number(model_bits):
        raise ChannelError(f"model_bits must be positive, got {model_bits}")
    return float(device.cycles_per_bit * device.samples / device.cpu_hz)


def computation_energy(device: DeviceProfile) -> float:
    """kappa * varsigma * vartheta^2 * beta, equal to kappa * T_COM * vartheta^3."""
    return float(device.energy_coeff * device.cycles_per_bit * device.cpu_hz ** 2 * device.samples)


def pair_user_energies(first: DeviceProfile, second: DeviceProfile, powers, times) -> Tuple[float, float]:
    """
    Per-user energies of a sub-channel pair.

    E_1 = E_COM,1 + p11 * T_OFF,1 + p12 * T_OFF,2
    E_2 = E_COM,2 + p2 * T_OFF,2

    Args:
        first: User that finishes computing first
        second: The other user
        powers: Object with p11, p12 and p2 attributes (W)
        times: Object with t_off_solo and t_off_noma attributes (s)

    Returns:
        (E_1, E_2) in joules
    """
    _check_non_negative(t_off_solo=times.t_off_solo, t_off_noma=times.t_off_noma)
    e_first = computation_energy(first) + powers.p11 * times.t_off_solo + powers.p12 * times.t_off_noma
    e_second = computation_energy(second) + powers.p2 * times.t_off_noma
    return float(e_first), float(e_second)


def pair_energy(first: DeviceProfile, second: DeviceProfile, powers, times) -> float:
    """Total energy E_1 + E_2 of a sub-channel pair."""
    return sum(pair_user_energies(first, second, powers, times))


def order_pair(device_a: DeviceProfile, device_b: DeviceProfile) -> Tuple[DeviceProfile, DeviceProfile]:
    """Return (first, second): smaller computation time first, ties by user id."""
    key_a = (computation_time(device_a), device_a.user_id)
    key_b = (computation_time(device_b), device_b.user_id)
    return (device_a, device_b) if key_a <= key_b else (device_b, device_a)


def realize_channels(devices: Sequence[DeviceProfile], num_subchannels: int, round_index: int,
                     budget: LinkBudget, master_seed: int) -> np.ndarray:
    """
    Block-fading gains of every device on every sub-channel for one round.

    Each (round, user) pair draws from its own seed stream, so a device's
    gains do not depend on which other devices are present.

    Returns:
        (len(devices) x num_subchannels) matrix of normalized gains;
        virtual devices get zero gain
    """
    if num_subchannels < 1:
        raise ChannelError("At least one sub-channel is required")
    gains = np.zeros((len(devices), num_subchannels))
    for row, device in enumerate(devices):
        if device.is_virtual:
            continue
        rng = child_rng(master_seed, 'channel', round_index, device.user_id)
        gains[row] = sample_channel_gain(device, budget, rng, size=num_subchannels)
    return gains


def place_devices(samples: Sequence[int], budget: LinkBudget, rng_seed: int,
                  cpu_hz_range: Tuple[float, float] = Config.DEFAULT_CPU_HZ_RANGE,
                  cycles_per_bit: float = Config.DEFAULT_CYCLES_PER_BIT,
                  energy_coeff: float = Config.DEFAULT_ENERGY_COEFF,
                  max_power_w: float = Config.DEFAULT_P_MAX_W) -> List[DeviceProfile]:
    """
    Drop devices uniformly in the annulus [min_distance, radius] around the base station.

    Args:
        samples: Local dataset size of every device (defines the user count)
        budget: Link budget holding the cell geometry
        rng_seed: Seed of the placement
        cpu_hz_range: Inclusive range for the uniform CPU frequency draw

    Returns:
        List of DeviceProfile with user ids 0..N-1
    """
    low, high = cpu_hz_range
    if not (0 < low <= high):
        raise ChannelError(f"Invalid CPU frequency range {cpu_hz_range}")
    rng = np.random.default_rng(rng_seed)
    n = len(samples)
    radii = np.sqrt(rng.uniform(budget.min_distance_m ** 2, budget.cell_radius_m ** 2, size=n))
    cpus = rng.uniform(low, high, size=n)

    devices = [
        DeviceProfile(user_id=i, cpu_hz=float(cpus[i]), samples=int(samples[i]),
                      cycles_per_bit=cycles_per_bit, energy_coeff=energy_coeff,
                      distance_m=float(radii[i]), max_power_w=max_power_w)
        for i in range(n)
    ]
    logging.debug(f"Placed {n} devices, distances {radii.min() if n else 0:.1f}-{radii.max() if n else 0:.1f} m")
    return devices
