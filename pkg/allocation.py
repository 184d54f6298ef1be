"""
Allocation Module for the clustered NOMA federated learning simulator

Sub-channel assignment by two-sided-exchange swap matching and per-pair power
allocation from the closed-form KKT cases, together with the brute-force
matching search and the numerical power oracle used to verify both.
"""

import itertools
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import brentq, linear_sum_assignment, minimize_scalar, nnls

from channel import (
    ChannelPairState, DeviceProfile, LinkBudget, computation_time, order_pair,
    pair_user_energies, rate_noma_interfered, rate_oma,
)
from config import Config


class AllocationError(Exception):
    """Exception raised when sub-channel or power allocation fails."""
    pass


class AllocationDomainError(AllocationError, ValueError):
    """Exception raised for arguments outside an operation's domain."""
    pass


class OracleSizeError(AllocationError):
    """Exception raised when an exhaustive search is asked for too many users."""
    pass


class _Infeasible(Exception):
    """Internal signal: the pair cannot meet its constraints."""
    pass


class KKTCase(Enum):
    """Active-constraint pattern of a pair's power solution."""
    INTERIOR = 'interior'
    P11_ZERO = 'p11_zero'
    P11_MAX = 'p11_max'
    P12_ZERO = 'p12_zero'
    P12_MAX = 'p12_max'
    NOT_APPLICABLE = 'not_applicable'


class PowerMode(Enum):
    KKT = 'kkt'
    FIXED = 'fixed'


class AccessMode(Enum):
    NOMA = 'noma'
    OMA = 'oma'


# Bits-per-Hz exponents above this make 2^x overflow a double
_MAX_LOG_POWER = 700.0
_POWER_RTOL = Config.FEASIBILITY_RTOL


@dataclass(frozen=True)
class TimeBudget:
    """Offloading windows of a pair under the round deadline."""

    t_off_solo: float
    t_off_noma: float
    t_com_first: float
    t_com_second: float
    t_max: float

    def __post_init__(self):
        for name in ('t_off_solo', 't_off_noma', 't_com_first', 't_com_second'):
            if getattr(self, name) < 0:
                raise AllocationDomainError(f"TimeBudget.{name} must be non-negative")
        slack = 1e-9 * max(1.0, self.t_max)
        if self.t_com_first + self.t_off_solo + self.t_off_noma > self.t_max + slack:
            raise AllocationDomainError("First user exceeds the deadline")
        if self.t_com_second + self.t_off_noma > self.t_max + slack:
            raise AllocationDomainError("Second user exceeds the deadline")


def deadline_tight_times(first: DeviceProfile, second: DeviceProfile, t_max: float) -> Optional[TimeBudget]:
    """
    Stretch both offloading windows to the deadline.

    The NOMA window is T_max - T_COM,2 and the first user's solo window is
    the gap T_COM,2 - T_COM,1. Returns None when the second user cannot
    finish computing before the deadline.
    """
    t_com_first = computation_time(first)
    t_com_second = computation_time(second)
    if t_com_first > t_com_second:
        raise AllocationDomainError(f"User {first.user_id} is not the first to finish computing")
    if t_max <= t_com_second:
        return None
    return TimeBudget(
        t_off_solo=t_com_second - t_com_first,
        t_off_noma=t_max - t_com_second,
        t_com_first=t_com_first,
        t_com_second=t_com_second,
        t_max=t_max,
    )


@dataclass(frozen=True)
class PowerSolution:
    """Transmit powers of a sub-channel pair and the resulting energies."""

    p11: float
    p12: float
    p2: float
    kkt_case: KKTCase
    feasible: bool
    first_id: int = -1
    second_id: int = -1
    times: Optional[TimeBudget] = None
    energy_first: float = math.inf
    energy_second: float = math.inf
    transmit_energy: float = math.inf
    reason: str = ''

    @property
    def energy(self) -> float:
        return self.energy_first + self.energy_second


def _infeasible(first: DeviceProfile, second: DeviceProfile, reason: str,
                times: Optional[TimeBudget] = None) -> PowerSolution:
    return PowerSolution(p11=0.0, p12=0.0, p2=0.0, kkt_case=KKTCase.NOT_APPLICABLE, feasible=False,
                         first_id=first.user_id, second_id=second.user_id, times=times, reason=reason)


def _finalize(first: DeviceProfile, second: DeviceProfile, p11: float, p12: float, p2: float,
              kkt_case: KKTCase, times: TimeBudget) -> PowerSolution:
    powers = PowerSolution(p11=p11, p12=p12, p2=p2, kkt_case=kkt_case, feasible=True)
    e_first, e_second = pair_user_energies(first, second, powers, times)
    transmit = p11 * times.t_off_solo + (p12 + p2) * times.t_off_noma
    return PowerSolution(p11=p11, p12=p12, p2=p2, kkt_case=kkt_case, feasible=True,
                         first_id=first.user_id, second_id=second.user_id, times=times,
                         energy_first=e_first, energy_second=e_second, transmit_energy=transmit)


def min_power_second_user(model_bits: float, t_off: float, gain2: float, budget: LinkBudget) -> float:
    """
    Power that delivers model_bits over t_off on an interference-free link.

    P = (2^{D / (B * t_off)} - 1) / gain2. Returns inf when t_off or gain2 is
    not positive, or when the required power overflows.
    """
    if model_bits < 0:
        raise AllocationDomainError("model_bits must be non-negative")
    if model_bits == 0:
        return 0.0
    if t_off <= 0 or gain2 <= 0:
        return math.inf
    exponent = model_bits / (budget.bandwidth_hz * t_off) * math.log(2.0)
    if exponent > _MAX_LOG_POWER:
        return math.inf
    return math.expm1(exponent) / gain2


class _PairModel:
    """
    Reduced description of one NOMA pair under deadline-tight times.

    With x = 1 + p11 * g_s (g_s the solo user's gain) the data constraint of
    the first user fixes its NOMA-phase power as

        p12(x) = (b / g_s) * (c' * x^{-r} - 1),   c' = 2^{D / (B T2)},  r = T1 / T2

    and the second user's power is affine in p12: p2 = p2_const + (k - 1) p12.
    When the solo user is also the stronger one it is decoded first under
    interference from the second user (b = c', k = 1). Otherwise the stronger
    second user is decoded first under interference from the solo user's
    NOMA-phase signal (b = 1, k = 1 + (c' - 1) g_s / g_strong).
    """

    def __init__(self, pair: ChannelPairState, first: DeviceProfile, second: DeviceProfile,
                 times: TimeBudget, model_bits: float, budget: LinkBudget):
        self.pair = pair
        self.first = first
        self.second = second
        self.times = times
        self.model_bits = model_bits
        self.budget = budget
        self.t1 = times.t_off_solo
        self.t2 = times.t_off_noma
        self.g_s = pair.gain_first
        self.g_o = pair.gain_second
        self.strong = pair.first_is_strong
        self.p_max1 = first.max_power_w
        self.p_max2 = second.max_power_w

        if self.t2 <= 0:
            raise _Infeasible("empty NOMA window")
        if self.g_s <= 0 or self.g_o <= 0:
            raise _Infeasible("zero channel gain")

        self.log_c = model_bits / (budget.bandwidth_hz * self.t2) * math.log(2.0)
        if self.log_c > _MAX_LOG_POWER:
            raise _Infeasible("required rate exceeds numeric range")
        c_prime = math.exp(self.log_c)
        c = math.expm1(self.log_c)

        if self.strong:
            self.log_b = self.log_c
            self.k = 1.0
            self.p2_const = c / self.g_o
            if self.p2_const > self.p_max2 * (1 + _POWER_RTOL):
                raise _Infeasible("second user power cap")
            self.cap12 = self.p_max1
        else:
            self.log_b = 0.0
            self.k = 1.0 + c * self.g_s / self.g_o
            self.p2_const = c / self.g_o
            cap_from_second = (self.p_max2 * self.g_o / c - 1.0) / self.g_s if c > 0 else math.inf
            self.cap12 = min(self.p_max1, cap_from_second)
            if self.cap12 < -_POWER_RTOL * max(self.p_max1, 1.0 / self.g_s):
                raise _Infeasible("second user power cap")
            self.cap12 = max(self.cap12, 0.0)
        self.c_prime = c_prime

    @property
    def r(self) -> float:
        return self.t1 / self.t2

    def p2_for(self, p12: float) -> float:
        return self.p2_const + (self.k - 1.0) * p12

    def p12_for_log_x(self, log_x: float) -> float:
        return math.exp(self.log_b) / self.g_s * math.expm1(self.log_c - self.r * log_x)

    def first_bits(self, p11: float, p12: float) -> float:
        """Bits the first user delivers over both phases."""
        solo = self.t1 * rate_oma(p11, self.g_s, self.budget)
        if self.strong:
            noma = self.t2 * rate_noma_interfered(p12, self.p2_for(p12), self.g_s, self.g_o, self.budget)
        else:
            noma = self.t2 * rate_oma(p12, self.g_s, self.budget)
        return solo + noma

    def second_bits(self, p12: float, p2: float) -> float:
        if self.strong:
            return self.t2 * rate_oma(p2, self.g_o, self.budget)
        return self.t2 * rate_noma_interfered(p2, p12, self.g_o, self.g_s, self.budget)

    def transmit_energy(self, p11: float, p12: float, p2: float) -> float:
        return self.t1 * p11 + self.t2 * (p12 + p2)

    def within_caps(self, p11: float, p12: float, p2: float) -> bool:
        tol = 1.0 + _POWER_RTOL
        return (0.0 <= p11 <= self.p_max1 * tol and 0.0 <= p12 <= self.p_max1 * tol
                and 0.0 <= p2 <= self.p_max2 * tol)


def _clip_small_negative(value: float, scale: float) -> float:
    if -1e-9 * scale <= value < 0.0:
        return 0.0
    return value


def _kkt_candidates(model: _PairModel) -> List[Tuple[KKTCase, float]]:
    """Candidate log(x) values for every closed-form case."""
    if model.t1 <= 0:
        return [(KKTCase.P11_ZERO, 0.0)]

    r = model.r
    log_x_max = math.log1p(model.p_max1 * model.g_s)
    log_x_p12_zero = model.log_c / r
    log_x_p12_max = (model.log_c - math.log1p(model.cap12 * model.g_s / math.exp(model.log_b))) / r
    log_x_interior = (math.log(model.k) + model.log_b + model.log_c) / (1.0 + r)

    return [
        (KKTCase.INTERIOR, log_x_interior),
        (KKTCase.P11_ZERO, 0.0),
        (KKTCase.P11_MAX, log_x_max),
        (KKTCase.P12_ZERO, log_x_p12_zero),
        (KKTCase.P12_MAX, log_x_p12_max),
    ]


def kkt_power_allocate(pair: ChannelPairState, devices: Tuple[DeviceProfile, DeviceProfile],
                       model_bits: float, t_max: float, budget: LinkBudget) -> PowerSolution:
    """
    Minimum-energy powers of a NOMA pair from the closed-form KKT cases.

    Both users' offloading windows are stretched to the deadline, the second
    user's power is fixed by its data constraint, and every closed-form
    case (interior stationary point, p11 at 0 or P_max, p12 at 0 or its
    cap) is evaluated. The feasible case of minimum energy is returned.

    Args:
        pair: Channel state; gain_first must belong to devices[0]
        devices: (first, second) ordered by computation time
        model_bits: Upload size D in bits
        t_max: Round deadline in seconds
        budget: Link budget

    Returns:
        PowerSolution; feasible=False (with a reason) when no case satisfies
        the power caps and the deadline
    """
    first, second = devices
    times = deadline_tight_times(first, second, t_max)
    if times is None:
        return _infeasible(first, second, 'deadline before computation ends')

    try:
        model = _PairModel(pair, first, second, times, model_bits, budget)
    except _Infeasible as e:
        return _infeasible(first, second, str(e), times)

    scale = 1.0 / model.g_s
    best = None
    for kkt_case, log_x in _kkt_candidates(model):
        if not np.isfinite(log_x) or log_x < 0.0:
            continue
        p11 = _clip_small_negative(math.expm1(log_x) / model.g_s, scale)
        p12 = _clip_small_negative(model.p12_for_log_x(log_x), scale)
        if model.t1 <= 0:
            p11 = 0.0
        p2 = model.p2_for(p12)
        if not all(np.isfinite(v) for v in (p11, p12, p2)) or not model.within_caps(p11, p12, p2):
            continue
        p11, p12, p2 = min(p11, model.p_max1), min(p12, model.p_max1), min(p2, model.p_max2)
        energy = model.transmit_energy(p11, p12, p2)
        if best is None or energy < best[0] * (1 - 1e-12):
            best = (energy, kkt_case, p11, p12, p2)

    if best is None:
        return _infeasible(first, second, 'no closed-form case within power caps', times)

    _, kkt_case, p11, p12, p2 = best
    return _finalize(first, second, p11, p12, p2, kkt_case, times)


def power_oracle(pair: ChannelPairState, devices: Tuple[DeviceProfile, DeviceProfile],
                 model_bits: float, t_max: float, budget: LinkBudget) -> PowerSolution:
    """
    Numerical verifier for kkt_power_allocate.

    Minimizes the pair's transmit energy by a bounded 1-D search over p11;
    for every trial p11 the NOMA-phase power p12 is found by root-finding on
    the first user's data constraint written with the channel rate functions.
    """
    first, second = devices
    times = deadline_tight_times(first, second, t_max)
    if times is None:
        return _infeasible(first, second, 'deadline before computation ends')
    try:
        model = _PairModel(pair, first, second, times, model_bits, budget)
    except _Infeasible as e:
        return _infeasible(first, second, str(e), times)

    def p12_given(p11: float) -> float:
        """Smallest p12 meeting the first user's data constraint (inf if above the cap)."""
        missing = lambda p12: model.first_bits(p11, p12) - model_bits
        if missing(0.0) >= 0.0:
            return 0.0
        if missing(model.cap12) < 0.0:
            return math.inf
        return brentq(missing, 0.0, model.cap12, xtol=1e-14 * model.cap12, rtol=1e-14, maxiter=500)

    if model.t1 <= 0:
        candidates = [0.0]
    else:
        p11_full = min(model.p_max1, min_power_second_user(model_bits, model.t1, model.g_s, budget))
        if not np.isfinite(p12_given(p11_full)):
            return _infeasible(first, second, 'no power split within caps', times)
        if np.isfinite(p12_given(0.0)):
            p11_low = 0.0
        else:
            gap = lambda p11: model.cap12 - p12_given(p11) if np.isfinite(p12_given(p11)) else -model.cap12 - 1.0
            p11_low = brentq(gap, 0.0, p11_full, xtol=1e-14 * max(p11_full, 1e-300), rtol=1e-14, maxiter=500)
            while not np.isfinite(p12_given(p11_low)):
                p11_low = math.nextafter(p11_low, p11_full)

        span = p11_full - p11_low

        def energy_at(u: float) -> float:
            p11 = p11_low + u * span
            p12 = p12_given(p11)
            return model.transmit_energy(p11, p12, model.p2_for(p12))

        result = minimize_scalar(energy_at, bounds=(0.0, 1.0), method='bounded', options={'xatol': 1e-10})
        candidates = [p11_low, p11_full, p11_low + float(result.x) * span]

    best = None
    for p11 in candidates:
        p12 = p12_given(p11)
        if not np.isfinite(p12):
            continue
        p2 = model.p2_for(p12)
        if not model.within_caps(p11, p12, p2):
            continue
        energy = model.transmit_energy(p11, p12, p2)
        if best is None or energy < best[0]:
            best = (energy, p11, p12, p2)

    if best is None:
        return _infeasible(first, second, 'no power split within caps', times)
    _, p11, p12, p2 = best
    return _finalize(first, second, p11, p12, min(p2, model.p_max2), KKTCase.NOT_APPLICABLE, times)


def oma_power_allocate(pair: ChannelPairState, devices: Tuple[DeviceProfile, DeviceProfile],
                       model_bits: float, t_max: float, budget: LinkBudget) -> PowerSolution:
    """
    Time-division baseline on a shared sub-channel.

    The first user transmits alone through its solo window and the first half
    of the common window; the second user transmits alone in the second half.
    """
    first, second = devices
    times = deadline_tight_times(first, second, t_max)
    if times is None:
        return _infeasible(first, second, 'deadline before computation ends')

    half = times.t_off_noma / 2.0
    oma_times = TimeBudget(t_off_solo=times.t_off_solo + half, t_off_noma=half,
                           t_com_first=times.t_com_first, t_com_second=times.t_com_second, t_max=t_max)
    p11 = min_power_second_user(model_bits, oma_times.t_off_solo, pair.gain_first, budget)
    p2 = min_power_second_user(model_bits, half, pair.gain_second, budget)
    if p11 > first.max_power_w * (1 + _POWER_RTOL) or p2 > second.max_power_w * (1 + _POWER_RTOL):
        return _infeasible(first, second, 'power cap exceeded in time division', oma_times)
    return _finalize(first, second, min(p11, first.max_power_w), 0.0, min(p2, second.max_power_w),
                     KKTCase.NOT_APPLICABLE, oma_times)


def fixed_power_allocate(pair: ChannelPairState, devices: Tuple[DeviceProfile, DeviceProfile],
                         model_bits: float, t_max: float, budget: LinkBudget,
                         fraction: float = Config.DEFAULT_FIXED_POWER_FRACTION,
                         access_mode: AccessMode = AccessMode.NOMA) -> PowerSolution:
    """
    Fixed-power baseline: every user transmits at fraction * P_max over its whole window.

    Feasible only when the delivered bits reach model_bits for both users.
    """
    if not 0.0 < fraction <= 1.0:
        raise AllocationDomainError("Fixed power fraction must lie in (0, 1]")
    first, second = devices
    times = deadline_tight_times(first, second, t_max)
    if times is None:
        return _infeasible(first, second, 'deadline before computation ends')

    p_first = fraction * first.max_power_w
    p_second = fraction * second.max_power_w
    needed = model_bits * (1 - _POWER_RTOL)

    if access_mode == AccessMode.OMA:
        half = times.t_off_noma / 2.0
        times = TimeBudget(t_off_solo=times.t_off_solo + half, t_off_noma=half,
                           t_com_first=times.t_com_first, t_com_second=times.t_com_second, t_max=t_max)
        bits_first = times.t_off_solo * rate_oma(p_first, pair.gain_first, budget)
        bits_second = half * rate_oma(p_second, pair.gain_second, budget)
        if bits_first < needed or bits_second < needed:
            return _infeasible(first, second, 'fixed power below data requirement', times)
        return _finalize(first, second, p_first, 0.0, p_second, KKTCase.NOT_APPLICABLE, times)

    try:
        model = _PairModel(pair, first, second, times, model_bits, budget)
    except _Infeasible as e:
        return _infeasible(first, second, str(e), times)
    # Both users transmit at their fixed level; SIC order follows the gains.
    if model.strong:
        bits_first = times.t_off_solo * rate_oma(p_first, model.g_s, budget) + \
            times.t_off_noma * rate_noma_interfered(p_first, p_second, model.g_s, model.g_o, budget)
        bits_second = times.t_off_noma * rate_oma(p_second, model.g_o, budget)
    else:
        bits_first = (times.t_off_solo + times.t_off_noma) * rate_oma(p_first, model.g_s, budget)
        bits_second = times.t_off_noma * rate_noma_interfered(p_second, p_first, model.g_o, model.g_s, budget)
    if bits_first < needed or bits_second < needed:
        return _infeasible(first, second, 'fixed power below data requirement', times)
    return _finalize(first, second, p_first, p_first, p_second, KKTCase.NOT_APPLICABLE, times)


def allocate_pair(device_a: DeviceProfile, device_b: DeviceProfile, gain_a: float, gain_b: float,
                  subchannel_id: int, model_bits: float, t_max: float, budget: LinkBudget,
                  power_mode: PowerMode = PowerMode.KKT, access_mode: AccessMode = AccessMode.NOMA,
                  fixed_fraction: float = Config.DEFAULT_FIXED_POWER_FRACTION) -> PowerSolution:
    """
    Order two users, build their channel state and dispatch to the configured allocator.

    A pair containing a virtual user degenerates to one real user sending
    alone over its deadline-tight window.
    """
    first, second = order_pair(device_a, device_b)
    gain_first, gain_second = (gain_a, gain_b) if first is device_a else (gain_b, gain_a)

    if first.is_virtual or second.is_virtual:
        return _allocate_alone(first, second, gain_first, gain_second, model_bits, t_max, budget,
                               power_mode, fixed_fraction)

    pair = ChannelPairState.from_user_gains(gain_first, gain_second, subchannel_id)
    devices = (first, second)
    if power_mode == PowerMode.FIXED:
        return fixed_power_allocate(pair, devices, model_bits, t_max, budget, fixed_fraction, access_mode)
    if access_mode == AccessMode.OMA:
        return oma_power_allocate(pair, devices, model_bits, t_max, budget)
    return kkt_power_allocate(pair, devices, model_bits, t_max, budget)


def _allocate_alone(first: DeviceProfile, second: DeviceProfile, gain_first: float, gain_second: float,
                    model_bits: float, t_max: float, budget: LinkBudget, power_mode: PowerMode,
                    fixed_fraction: float) -> PowerSolution:
    times = deadline_tight_times(first, second, t_max)
    if times is None:
        return _infeasible(first, second, 'deadline before computation ends')
    if second.is_virtual:
        # Both virtual: the first slot is virtual too since it computes no longer.
        return _finalize(first, second, 0.0, 0.0, 0.0, KKTCase.NOT_APPLICABLE, times)

    # Virtual users finish computing instantly, so the real user is the second one.
    if power_mode == PowerMode.FIXED:
        p2 = fixed_fraction * second.max_power_w
        if times.t_off_noma * rate_oma(p2, gain_second, budget) < model_bits * (1 - _POWER_RTOL):
            return _infeasible(first, second, 'fixed power below data requirement', times)
    else:
        p2 = min_power_second_user(model_bits, times.t_off_noma, gain_second, budget)
        if p2 > second.max_power_w * (1 + _POWER_RTOL):
            return _infeasible(first, second, 'power cap exceeded', times)
        p2 = min(p2, second.max_power_w)
    return _finalize(first, second, 0.0, 0.0, p2, KKTCase.NOT_APPLICABLE, times)


@dataclass
class KKTAudit:
    """Optimality certificate of a pair's power solution."""

    primal_residual: float
    stationarity_residual: float
    complementary_slackness: float
    multipliers: Dict[str, float]
    active: List[str]

    def satisfied(self, tol: float = 1e-6, slackness_tol: float = 1e-8) -> bool:
        return (self.primal_residual <= tol and self.stationarity_residual <= tol
                and self.complementary_slackness <= slackness_tol)


def kkt_audit(solution: PowerSolution, pair: ChannelPairState,
              devices: Tuple[DeviceProfile, DeviceProfile], model_bits: float,
              budget: LinkBudget, active_tol: float = 1e-9) -> KKTAudit:
    """
    Check a solution against the KKT conditions of the reduced pair problem.

    Variables are (p11, p12) with p2 eliminated through the second user's
    data constraint. Constraints are scaled (data by D, powers by their
    caps); multipliers of the active set are recovered by non-negative
    least squares on the stationarity equation.

    Raises:
        AllocationDomainError: If the solution is infeasible
    """
    if not solution.feasible or solution.times is None:
        raise AllocationDomainError("Only feasible solutions can be audited")
    first, second = devices
    model = _PairModel(pair, first, second, solution.times, model_bits, budget)
    p11, p12 = solution.p11, solution.p12
    ln2 = math.log(2.0)
    bandwidth = budget.bandwidth_hz
    cap1 = model.p_max1 if model.p_max1 > 0 else 1.0
    cap12 = model.cap12 if model.cap12 > 0 else 1.0

    if model.strong:
        d_noma = model.t2 * bandwidth * (model.g_s / math.exp(model.log_b)) / \
            ((1.0 + p12 * model.g_s / math.exp(model.log_b)) * ln2)
    else:
        d_noma = model.t2 * bandwidth * model.g_s / ((1.0 + p12 * model.g_s) * ln2)
    d_solo = model.t1 * bandwidth * model.g_s / ((1.0 + p11 * model.g_s) * ln2)

    constraints = {
        'data': ((model_bits - model.first_bits(p11, p12)) / max(model_bits, 1.0),
                 np.array([-d_solo, -d_noma]) / max(model_bits, 1.0)),
        'p11_min': (-p11 / cap1, np.array([-1.0 / cap1, 0.0])),
        'p11_max': ((p11 - model.p_max1) / cap1, np.array([1.0 / cap1, 0.0])),
        'p12_min': (-p12 / cap12, np.array([0.0, -1.0 / cap12])),
        'p12_max': ((p12 - model.cap12) / cap12, np.array([0.0, 1.0 / cap12])),
    }
    if model.t1 <= 0:
        # Without a solo window p11 is pinned at zero.
        constraints.pop('p11_max')

    objective_grad = np.array([model.t1, model.t2 * model.k])
    primal = max(max(value, 0.0) for value, _ in constraints.values())
    second_residual = abs(model.second_bits(p12, solution.p2) - model_bits) / max(model_bits, 1.0)
    primal = max(primal, 0.0 if solution.p2 <= model.p_max2 * (1 + _POWER_RTOL) else 1.0)
    primal = max(primal, second_residual)

    active = [name for name, (value, _) in constraints.items() if abs(value) <= active_tol]
    multipliers = {name: 0.0 for name in constraints}
    if active:
        jacobian = np.column_stack([constraints[name][1] for name in active])
        lambdas, _ = nnls(jacobian, -objective_grad)
        for name, lam in zip(active, lambdas):
            multipliers[name] = float(lam)
        residual_vec = objective_grad + jacobian @ lambdas
    else:
        residual_vec = objective_grad

    stationarity = float(np.linalg.norm(residual_vec) / max(np.linalg.norm(objective_grad), 1e-300))
    slackness = max(abs(multipliers[name] * value) for name, (value, _) in constraints.items())
    return KKTAudit(primal_residual=float(primal), stationarity_residual=stationarity,
                    complementary_slackness=float(slackness), multipliers=multipliers, active=active)


def rate_constraint_hessian(p11: float, p12: float, pair: ChannelPairState,
                            devices: Tuple[DeviceProfile, DeviceProfile], model_bits: float,
                            t_max: float, budget: LinkBudget) -> np.ndarray:
    """
    Finite-difference Hessian of the first user's data constraint D - bits(p11, p12).

    The constraint is convex in the powers, so the Hessian is positive
    definite wherever both phases have non-zero duration.
    """
    first, second = devices
    times = deadline_tight_times(first, second, t_max)
    if times is None:
        raise AllocationDomainError("Deadline precedes computation")
    model = _PairModel(pair, first, second, times, model_bits, budget)

    def constraint(point: np.ndarray) -> float:
        return model_bits - model.first_bits(max(point[0], 0.0), max(point[1], 0.0))

    x0 = np.array([p11, p12], dtype=float)
    steps = 1e-3 * (x0 + 1.0 / model.g_s)
    hessian = np.zeros((2, 2))
    for i in range(2):
        for j in range(2):
            e_i = np.eye(2)[i] * steps[i]
            e_j = np.eye(2)[j] * steps[j]
            hessian[i, j] = (constraint(x0 + e_i + e_j) - constraint(x0 + e_i - e_j)
                             - constraint(x0 - e_i + e_j) + constraint(x0 - e_i - e_j)) / (4.0 * steps[i] * steps[j])
    return 0.5 * (hessian + hessian.T)


def energy_curvature(p11: float, pair: ChannelPairState, devices: Tuple[DeviceProfile, DeviceProfile],
                     model_bits: float, t_max: float, budget: LinkBudget) -> float:
    """Second derivative of the transmit energy along the data-constraint surface, in p11."""
    first, second = devices
    times = deadline_tight_times(first, second, t_max)
    if times is None:
        raise AllocationDomainError("Deadline precedes computation")
    model = _PairModel(pair, first, second, times, model_bits, budget)

    def reduced(p: float) -> float:
        log_x = math.log1p(p * model.g_s)
        p12 = model.p12_for_log_x(log_x)
        return model.transmit_energy(p, p12, model.p2_for(p12))

    h = 1e-3 * (p11 + 1.0 / model.g_s)
    center = max(p11, h)
    return (reduced(center + h) - 2.0 * reduced(center) + reduced(center - h)) / h ** 2


@dataclass(frozen=True)
class Matching:
    """One-to-two assignment of users to sub-channels."""

    pairs: Mapping[int, Tuple[int, int]]
    inverse: Mapping[int, int] = field(init=False, compare=False, repr=False)

    def __post_init__(self):
        normalized = {}
        inverse = {}
        for k, members in self.pairs.items():
            if len(members) != 2 or members[0] == members[1]:
                raise AllocationDomainError(f"Sub-channel {k} must hold exactly two distinct users")
            normalized[int(k)] = tuple(sorted(int(u) for u in members))
            for user in members:
                if user in inverse:
                    raise AllocationDomainError(f"User {user} assigned to more than one sub-channel")
                inverse[int(user)] = int(k)
        object.__setattr__(self, 'pairs', dict(sorted(normalized.items())))
        object.__setattr__(self, 'inverse', inverse)

    @property
    def users(self) -> List[int]:
        return sorted(self.inverse)

    @property
    def channels(self) -> List[int]:
        return list(self.pairs)

    def channel_of(self, user: int) -> int:
        return self.inverse[user]

    def partner(self, user: int) -> int:
        a, b = self.pairs[self.inverse[user]]
        return b if a == user else a

    def swapped(self, m: int, j: int) -> 'Matching':
        """Matching in which m and j exchange sub-channels."""
        k_m, k_j = self.inverse[m], self.inverse[j]
        if k_m == k_j:
            raise AllocationDomainError(f"Users {m} and {j} already share sub-channel {k_m}")
        pairs = dict(self.pairs)
        pairs[k_m] = (j, self.partner(m))
        pairs[k_j] = (m, self.partner(j))
        return Matching(pairs)


@dataclass
class MatchingResult:
    """Outcome of the swap-matching algorithm."""

    matching: Matching
    iterations: int
    cycles: int
    energy_trace: List[float]
    converged: bool


class AllocationContext:
    """
    Devices, channel gains and allocator settings shared by the matching routines.

    Pair solutions are cached per (sub-channel, user pair); the cache only
    grows, so concurrent readers of a fixed matching see immutable results.
    """

    def __init__(self, devices: Sequence[DeviceProfile], gains: Mapping[int, Sequence[float]],
                 model_bits: float, t_max: float, budget: LinkBudget,
                 power_mode: PowerMode = PowerMode.KKT, access_mode: AccessMode = AccessMode.NOMA,
                 fixed_fraction: float = Config.DEFAULT_FIXED_POWER_FRACTION):
        self.devices = {device.user_id: device for device in devices}
        self.gains = {int(user): np.asarray(row, dtype=float) for user, row in gains.items()}
        missing = set(self.devices) - set(self.gains)
        if missing:
            raise AllocationDomainError(f"No channel gains for users {sorted(missing)}")
        self.model_bits = model_bits
        self.t_max = t_max
        self.budget = budget
        self.power_mode = PowerMode(power_mode)
        self.access_mode = AccessMode(access_mode)
        self.fixed_fraction = fixed_fraction
        self._cache: Dict[Tuple[int, int, int], PowerSolution] = {}

    def pair_solution(self, subchannel: int, user_a: int, user_b: int) -> PowerSolution:
        key = (subchannel, min(user_a, user_b), max(user_a, user_b))
        if key not in self._cache:
            a, b = self.devices[key[1]], self.devices[key[2]]
            self._cache[key] = allocate_pair(
                a, b, float(self.gains[a.user_id][subchannel]), float(self.gains[b.user_id][subchannel]),
                subchannel, self.model_bits, self.t_max, self.budget,
                self.power_mode, self.access_mode, self.fixed_fraction,
            )
        return self._cache[key]

    def channel_energies(self, subchannel: int, user_a: int, user_b: int) -> Dict[int, float]:
        """Per-user energy on one sub-channel; both users get inf when the pair is infeasible."""
        solution = self.pair_solution(subchannel, user_a, user_b)
        if not solution.feasible:
            return {user_a: math.inf, user_b: math.inf}
        return {solution.first_id: solution.energy_first, solution.second_id: solution.energy_second}

    def user_energies(self, mu: Matching) -> Dict[int, float]:
        energies = {}
        for k, (a, b) in mu.pairs.items():
            energies.update(self.channel_energies(k, a, b))
        return energies

    def solutions(self, mu: Matching) -> Dict[int, PowerSolution]:
        return {k: self.pair_solution(k, a, b) for k, (a, b) in mu.pairs.items()}


def matching_energy(mu: Matching, context: AllocationContext) -> float:
    """Total energy of a matching (inf when any pair is infeasible)."""
    return float(sum(context.user_energies(mu).values()))


def matching_cost_key(mu: Matching, context: AllocationContext) -> Tuple[int, float]:
    """(number of users in infeasible pairs, total energy of the feasible ones)."""
    energies = list(context.user_energies(mu).values())
    return sum(1 for e in energies if not np.isfinite(e)), float(sum(e for e in energies if np.isfinite(e)))


def _check_cardinality(users: Sequence[int], channels: Sequence[int]) -> None:
    if len(users) != 2 * len(channels) or not channels:
        raise AllocationDomainError(f"{len(users)} users cannot fill {len(channels)} sub-channels two by two")
    if len(set(users)) != len(users):
        raise AllocationDomainError("Duplicate user ids")


def pad_with_virtual_users(devices: Sequence[DeviceProfile], num_subchannels: int) -> List[DeviceProfile]:
    """Append zero-data users until every sub-channel has two occupants."""
    if len(devices) > 2 * num_subchannels:
        raise AllocationDomainError(f"{len(devices)} users exceed {2 * num_subchannels} sub-channel slots")
    padded = list(devices)
    next_id = max((d.user_id for d in devices), default=-1) + 1
    while len(padded) < 2 * num_subchannels:
        padded.append(DeviceProfile.virtual(next_id))
        next_id += 1
    return padded


def random_matching(users: Sequence[int], channels: Sequence[int], rng_seed) -> Matching:
    """Uniformly random matching: shuffled users paired consecutively onto channels."""
    _check_cardinality(users, channels)
    rng = np.random.default_rng(rng_seed)
    order = rng.permutation(np.asarray(users))
    return Matching({k: (int(order[2 * i]), int(order[2 * i + 1])) for i, k in enumerate(channels)})


def swap_blocking_pair(mu: Matching, m: int, j: int, context: AllocationContext,
                       rtol: float = 1e-12) -> bool:
    """
    Whether exchanging the sub-channels of m and j is an approved swap.

    The players are m, j and their current partners. The swap is approved
    when no player's energy increases and at least one decreases strictly.

    Raises:
        AllocationDomainError: If m and j share a sub-channel
    """
    k_m, k_j = mu.channel_of(m), mu.channel_of(j)
    if k_m == k_j:
        raise AllocationDomainError(f"Users {m} and {j} share sub-channel {k_m}")
    pm, pj = mu.partner(m), mu.partner(j)

    before = context.channel_energies(k_m, m, pm)
    before.update(context.channel_energies(k_j, j, pj))
    after = context.channel_energies(k_m, j, pm)
    after.update(context.channel_energies(k_j, m, pj))

    strictly_better = False
    for player in (m, pm, j, pj):
        old, new = before[player], after[player]
        if new > old:
            return False
        if np.isfinite(new) and (not np.isfinite(old) or new < old - rtol * abs(old)):
            strictly_better = True
    return strictly_better


def match_subchannels(users: Sequence[int], channels: Sequence[int], context: AllocationContext,
                      rng_seed, initial: Optional[Matching] = None,
                      max_cycles: int = Config.MATCHING_MAX_CYCLES) -> MatchingResult:
    """
    Swap-matching sub-channel assignment.

    Starts from a random matching (or ``initial``) and scans users in id
    order against partners in id order, applying every approved swap,
    until a full scan finds no swap-blocking pair (two-sided exchange
    stability) or max_cycles scans have run.

    Returns:
        MatchingResult with the stable matching, the number of approved
        swaps, the number of scans and the total energy after every swap
    """
    _check_cardinality(users, channels)
    if initial is None:
        mu = random_matching(users, channels, rng_seed)
    else:
        if sorted(initial.users) != sorted(users) or sorted(initial.channels) != sorted(channels):
            raise AllocationDomainError("Initial matching does not cover the given users and channels")
        mu = initial

    ordered = sorted(users)
    trace = [matching_energy(mu, context)]
    iterations = 0
    cycles = 0
    converged = False
    while cycles < max_cycles:
        cycles += 1
        swapped = False
        for m in ordered:
            for j in ordered:
                if j == m or mu.channel_of(j) == mu.channel_of(m):
                    continue
                if swap_blocking_pair(mu, m, j, context):
                    mu = mu.swapped(m, j)
                    iterations += 1
                    trace.append(matching_energy(mu, context))
                    swapped = True
        if not swapped:
            converged = True
            break

    if not converged:
        logging.warning(f"Swap matching stopped after {max_cycles} cycles without reaching stability")
    logging.debug(f"Swap matching: {iterations} swaps in {cycles} cycles, energy {trace[-1]:.6e} J")
    return MatchingResult(matching=mu, iterations=iterations, cycles=cycles, energy_trace=trace, converged=converged)


def _pairings(users: Sequence[int]) -> Iterator[List[Tuple[int, int]]]:
    """All perfect pairings of the users, in lexicographic order."""
    if not users:
        yield []
        return
    head, rest = users[0], users[1:]
    for idx, partner in enumerate(rest):
        remaining = rest[:idx] + rest[idx + 1:]
        for tail in _pairings(remaining):
            yield [(head, partner)] + tail


def enumerate_matchings(users: Sequence[int], channels: Sequence[int]) -> Iterator[Matching]:
    """Every matching of users onto channels (pairings times channel orders)."""
    _check_cardinality(users, channels)
    for pairing in _pairings(sorted(users)):
        for order in itertools.permutations(channels):
            yield Matching(dict(zip(order, pairing)))


def brute_force_matching(users: Sequence[int], channels: Sequence[int], context: AllocationContext) -> Matching:
    """
    Exact minimum-energy matching.

    Enumerates every pairing of the users and assigns pairs to sub-channels
    optimally by solving the linear assignment problem. Ties keep the
    lexicographically first pairing.

    Raises:
        OracleSizeError: If more than BRUTE_FORCE_MAX_USERS users are given
    """
    _check_cardinality(users, channels)
    if len(users) > Config.BRUTE_FORCE_MAX_USERS:
        raise OracleSizeError(f"Brute-force matching refuses {len(users)} users "
                              f"(limit {Config.BRUTE_FORCE_MAX_USERS})")

    penalty = 1e9
    channels = list(channels)
    best_key, best = None, None
    for pairing in _pairings(sorted(users)):
        cost = np.empty((len(pairing), len(channels)))
        for row, (a, b) in enumerate(pairing):
            for col, k in enumerate(channels):
                energy = sum(context.channel_energies(k, a, b).values())
                cost[row, col] = energy if np.isfinite(energy) else penalty
        rows, cols = linear_sum_assignment(cost)
        candidate = Matching({channels[c]: pairing[r] for r, c in zip(rows, cols)})
        key = matching_cost_key(candidate, context)
        if best_key is None or key[0] < best_key[0] or \
                (key[0] == best_key[0] and key[1] < best_key[1] - 1e-12 * abs(best_key[1])):
            best_key, best = key, candidate
    return best
