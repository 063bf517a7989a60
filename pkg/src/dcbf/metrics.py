"""Power/SNR/INR/SINR estimators and the phase-error performance bounds."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ComplexSignal, Segment

__all__ = [
    "DB_FLOOR",
    "LinkMetrics",
    "to_db",
    "segment_power",
    "link_metrics",
    "snr_gain",
    "power_gain_bound",
    "rx_snr_gain_bound",
    "inr_reduction_bound",
]

# Non-positive linear ratios clamp here so emitted dB columns stay finite.
DB_FLOOR = -60.0


def to_db(linear: float, floor_db: float = DB_FLOOR) -> float:
    if linear <= 10 ** (floor_db / 10):
        return floor_db
    return 10.0 * np.log10(linear)


@dataclass(frozen=True)
class LinkMetrics:
    snr_db: float
    inr_db: float
    sinr_db: float
    p_sin: float  # signal + interference + noise power
    p_in: float  # interference + noise power
    p_n: float  # noise power


def segment_power(x: ComplexSignal | np.ndarray, seg: Segment, shift: int = 0) -> float:
    """Mean per-sample power over one layout segment (optionally shifted)."""
    arr = x.samples if isinstance(x, ComplexSignal) else np.asarray(x)
    start = seg.offset + shift
    stop = start + seg.length
    if start < 0 or stop > len(arr):
        raise ValueError(f"segment {seg.name!r} [{start}, {stop}) outside signal of len {len(arr)}")
    if seg.length == 0:
        return 0.0
    return float(np.mean(np.abs(arr[start:stop]) ** 2))


def link_metrics(p_sin: float, p_in: float, p_n: float) -> LinkMetrics:
    """SNR = (P_sin - P_in)/P_n, INR = (P_in - P_n)/P_n, SINR = (P_sin - P_in)/P_in,
    each clamped at the dB floor when the subtraction goes non-positive."""
    if p_n <= 0:
        raise ValueError("p_n must be > 0")
    snr = (p_sin - p_in) / p_n
    inr = (p_in - p_n) / p_n
    sinr = (p_sin - p_in) / p_in if p_in > 0 else 0.0
    return LinkMetrics(
        snr_db=to_db(snr),
        inr_db=to_db(inr),
        sinr_db=to_db(sinr),
        p_sin=p_sin,
        p_in=p_in,
        p_n=p_n,
    )


def snr_gain(bf_snr: float, siso_snrs: list[float]) -> float:
    """Beamformed SNR over the arithmetic mean of the SISO SNRs, in dB."""
    if not siso_snrs:
        raise ValueError("need at least one SISO SNR")
    if any(s <= 0 for s in siso_snrs):
        raise ValueError("SISO SNRs must be > 0 (linear)")
    return to_db(bf_snr / float(np.mean(siso_snrs)))


def power_gain_bound(n: int, phi_var: float) -> float:
    """Coherent power-gain ceiling (N^2 - N) e^{-phi^2} + N, linear.

    phi_var is the accumulated phase-error variance across nodes; at 0 the
    bound is N^2, and it decays to N as coherence is lost. For transmit
    beamforming this is also the SNR-gain ceiling.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if phi_var < 0:
        raise ValueError("phi_var must be >= 0")
    return (n * n - n) * float(np.exp(-phi_var)) + n


def rx_snr_gain_bound(n: int, phi_var: float) -> float:
    """Receive-side SNR-gain ceiling: power_gain_bound / N, since combining
    N receptions also sums N independent noise processes."""
    return power_gain_bound(n, phi_var) / n


def inr_reduction_bound(n: int, phi_var: float) -> float:
    """((N-1)/N) * (1 - e^{-phi^2}), linear, implemented verbatim.

    Evaluates to 0 at zero phase error and saturates at (N-1)/N; reported
    alongside measured null depth rather than replacing it.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if phi_var < 0:
        raise ValueError("phi_var must be >= 0")
    return (n - 1) / n * float(1.0 - np.exp(-phi_var))
