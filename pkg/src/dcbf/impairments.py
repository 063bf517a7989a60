"""Per-node clock models and per-link channel/noise models.

The receive chain applies the channel first, then the receiving node's LO
effects (CFO rotation, phase random walk), then additive noise. Transmit-side
LO effects are applied to the waveform before it enters the channel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ComplexSignal, NodeState

__all__ = [
    "ChannelModel",
    "NoiseSpec",
    "apply_channel",
    "advance_clock",
    "apply_node_imperfections",
    "add_noise",
]


@dataclass(frozen=True)
class ChannelModel:
    """Tapped delay line plus an integer-sample time-of-flight delay."""

    taps: np.ndarray
    tof_delay: int = 0
    label: str = ""

    def __post_init__(self):
        taps = np.atleast_1d(np.asarray(self.taps, dtype=np.complex128))
        object.__setattr__(self, "taps", taps)
        if taps.ndim != 1 or len(taps) < 1:
            raise ValueError("taps must be a nonempty 1-D sequence")
        if not np.any(taps != 0):
            raise ValueError("channel needs at least one nonzero tap")
        if self.tof_delay < 0:
            raise ValueError("tof_delay must be >= 0")

    @property
    def n_taps(self) -> int:
        return len(self.taps)


@dataclass(frozen=True)
class NoiseSpec:
    """Circularly-symmetric complex Gaussian noise power per sample."""

    noise_power_per_sample: float

    def __post_init__(self):
        if self.noise_power_per_sample < 0:
            raise ValueError("noise power must be >= 0")


def apply_channel(x: ComplexSignal, ch: ChannelModel) -> ComplexSignal:
    """Convolve with the tapped delay line and delay by tof_delay samples.

    Output length is len(x) + n_taps - 1 + tof_delay.
    """
    conv = np.convolve(x.samples, ch.taps, mode="full")
    out = np.concatenate([np.zeros(ch.tof_delay, dtype=np.complex128), conv])
    return ComplexSignal(out, x.sample_rate_hz)


def advance_clock(node: NodeState, dt_s: float) -> NodeState:
    """Advance a node's LO phase by dt_s seconds of CFO rotation plus
    a Wiener-process increment Normal(0, phase_walk_var_per_s * dt_s)."""
    if dt_s < 0:
        raise ValueError("dt_s must be >= 0")
    node.phase_rad += 2 * np.pi * node.cfo_hz * dt_s
    if node.phase_walk_var_per_s > 0 and dt_s > 0:
        node.phase_rad += node.rng.normal(0.0, np.sqrt(node.phase_walk_var_per_s * dt_s))
    return node


def apply_node_imperfections(x: ComplexSignal, node: NodeState, sign: int = 1) -> ComplexSignal:
    """Impress the node's LO on a signal: CFO ramp plus phase random walk.

    Sample t is rotated by sign * (2*pi*cfo_hz*t/fs + phase(t)), where
    phase(t) starts at node.phase_rad and performs a per-sample Wiener walk
    at phase_walk_var_per_s. The node's clock state is advanced across the
    signal duration, exactly as len(x) steps of advance_clock would.

    sign=+1 models upconversion at a transmitter, sign=-1 downconversion
    at a receiver.
    """
    n = len(x.samples)
    if n == 0:
        return x
    fs = x.sample_rate_hz
    if node.cfo_hz == 0 and node.phase_walk_var_per_s == 0:
        # ideal-frequency clock: one constant rotation
        return ComplexSignal(x.samples * np.exp(1j * sign * node.phase_rad), fs)
    t = np.arange(n) / fs
    phase = node.phase_rad + 2 * np.pi * node.cfo_hz * t
    if node.phase_walk_var_per_s > 0:
        steps = node.rng.normal(0.0, np.sqrt(node.phase_walk_var_per_s / fs), n - 1)
        walk = np.concatenate([[0.0], np.cumsum(steps)])
        phase = phase + walk
    out = x.samples * np.exp(1j * sign * phase)
    # final state: one more sample step past the last emitted sample
    node.phase_rad = float(phase[-1]) + 2 * np.pi * node.cfo_hz / fs
    if node.phase_walk_var_per_s > 0:
        node.phase_rad += node.rng.normal(0.0, np.sqrt(node.phase_walk_var_per_s / fs))
    return ComplexSignal(out, fs)


def add_noise(x: ComplexSignal, spec: NoiseSpec, rng: np.random.Generator) -> ComplexSignal:
    """Add i.i.d. circularly-symmetric complex Gaussian noise of the given power."""
    p = spec.noise_power_per_sample
    if p == 0:
        return x
    n = len(x.samples)
    sigma = np.sqrt(p / 2.0)
    noise = rng.normal(0.0, sigma, n) + 1j * rng.normal(0.0, sigma, n)
    return ComplexSignal(x.samples + noise, x.sample_rate_hz)
