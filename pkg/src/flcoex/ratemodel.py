"""Closed-form link rates, compute times, and energies.

Every optimizer and simulator in this package evaluates the same physical
model through these functions:

* downlink rate: ``rb_count * B * log2(1 + Pd*h2/(B*N0))`` -- linear in the
  RB count because the base station spends the same power on each RB;
* uplink rate: ``K * B * log2(1 + p*h2/(K*B*N0))`` -- the perspective of
  ``log2(1+x)``, jointly concave in (RB count, power), with the removable
  singularity at K = 0 closed by continuity (zero RBs carry zero bits);
* local training: ``tau = I*C*Theta/f`` seconds and ``E = kappa*I*C*Theta*f^2``
  joules, so eliminating f gives ``E = kappa*(I*C)^3*Theta^3 / tau^2``.

All quantities are SI: Hz, W, W/Hz, bit, bit/s, s, J.
"""

from __future__ import annotations

import math
from typing import Sequence

from .scenario import FlWorkload, RadioConstants

__all__ = [
    "dl_snr",
    "dl_rate_per_rb",
    "dl_rate",
    "ul_rate",
    "ul_snr_coeff",
    "compute_time",
    "compute_energy",
    "min_compute_time",
    "compute_energy_from_time",
    "round_latency",
]


def dl_snr(h2: float, radio: RadioConstants) -> float:
    """Downlink SNR on one RB for squared channel gain ``h2``."""
    return radio.bs_power_per_rb * h2 / (radio.subcarrier_bw * radio.noise_psd)


def dl_rate_per_rb(h2: float, radio: RadioConstants) -> float:
    """Downlink rate of a single RB, bit/s. The per-RB coefficient reused everywhere."""
    return radio.subcarrier_bw * math.log2(1.0 + dl_snr(h2, radio))


def dl_rate(rb_count: float, h2: float, radio: RadioConstants) -> float:
    """Downlink rate on ``rb_count`` RBs (continuous relaxation), bit/s.

    Linear in ``rb_count``; 0 RBs carry 0 bit/s.
    """
    if rb_count < 0:
        raise ValueError(f"rb_count must be >= 0, got {rb_count}")
    return rb_count * dl_rate_per_rb(h2, radio)


def ul_snr_coeff(h2: float, radio: RadioConstants) -> float:
    """Uplink SNR per watt per RB: ``h2 / (B*N0)``.

    With ``a`` this coefficient, the uplink rate is ``K*B*log2(1 + a*p/K)``.
    """
    return h2 / (radio.subcarrier_bw * radio.noise_psd)


def ul_rate(rb_count: float, power: float, h2: float, radio: RadioConstants) -> float:
    """Uplink rate for a power-limited UE spreading ``power`` W over ``rb_count`` RBs.

    Perspective form, jointly concave in (rb_count, power); the K -> 0 limit
    is 0 and is returned exactly at rb_count == 0.
    """
    if rb_count < 0:
        raise ValueError(f"rb_count must be >= 0, got {rb_count}")
    if power < 0:
        raise ValueError(f"power must be >= 0, got {power}")
    if power > radio.ue_max_power * (1.0 + 1e-12):
        raise ValueError(
            f"power {power} exceeds the UE maximum {radio.ue_max_power}"
        )
    if rb_count == 0.0 or power == 0.0:
        return 0.0
    snr = ul_snr_coeff(h2, radio) * power / rb_count
    return rb_count * radio.subcarrier_bw * math.log2(1.0 + snr)


def compute_time(workload: FlWorkload, f: float) -> float:
    """Local-training duration at CPU speed ``f`` cycles/s: ``I*C*Theta/f``."""
    if f <= 0:
        raise ValueError(f"compute speed must be > 0, got {f}")
    return workload.epochs * workload.cycles_per_sample * workload.local_samples / f


def compute_energy(workload: FlWorkload, f: float) -> float:
    """Local-training energy at CPU speed ``f``: ``kappa*I*C*Theta*f^2``."""
    if f <= 0:
        raise ValueError(f"compute speed must be > 0, got {f}")
    return (
        workload.kappa
        * workload.epochs
        * workload.cycles_per_sample
        * workload.local_samples
        * f
        * f
    )


def min_compute_time(workload: FlWorkload) -> float:
    """Fastest possible local-training duration (runs at f_max)."""
    return compute_time(workload, workload.f_max)


def compute_energy_from_time(workload: FlWorkload, tau: float) -> float:
    """Training energy as a function of its duration: ``kappa*(I*C)^3*Theta^3/tau^2``.

    Algebraically identical to ``compute_energy`` at ``f = I*C*Theta/tau``;
    this is the form the optimizers minimize (convex in ``tau`` > 0).
    """
    if tau <= 0:
        return math.inf
    alpha = workload.epochs * workload.cycles_per_sample
    return workload.kappa * alpha**3 * workload.local_samples**3 / (tau * tau)


def round_latency(
    dl_times: Sequence[float], cp_times: Sequence[float], ul_times: Sequence[float]
) -> float:
    """Round completion time: the slowest UE's download + training + upload."""
    if not (len(dl_times) == len(cp_times) == len(ul_times)):
        raise ValueError("per-UE time vectors must have equal length")
    if any(t < 0 for v in (dl_times, cp_times, ul_times) for t in v):
        raise ValueError("per-UE times must be nonnegative")
    return max(d + c + u for d, c, u in zip(dl_times, cp_times, ul_times))
