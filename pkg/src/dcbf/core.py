"""Shared domain types, deterministic RNG streams, and configuration validation."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

__all__ = [
    "ConfigError",
    "ComplexSignal",
    "Segment",
    "FrameLayout",
    "MeshConfig",
    "NodeState",
    "validate_config",
    "substream",
]


class ConfigError(ValueError):
    """Raised when a configuration violates an invariant. Carries the field name."""

    def __init__(self, field_name: str, message: str):
        self.field_name = field_name
        super().__init__(f"{field_name}: {message}")


@dataclass(frozen=True)
class ComplexSignal:
    """A finite sequence of complex baseband samples at a stated sample rate.

    The universal signal carrier: every synthesized, propagated, or beamformed
    waveform in the library is one of these.
    """

    samples: np.ndarray
    sample_rate_hz: float

    def __post_init__(self):
        arr = np.asarray(self.samples, dtype=np.complex128)
        object.__setattr__(self, "samples", arr)
        if arr.ndim != 1:
            raise ValueError(f"samples must be 1-D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("samples contain NaN or Inf")
        if self.sample_rate_hz <= 0:
            raise ValueError(f"sample_rate_hz must be > 0, got {self.sample_rate_hz}")

    def __len__(self) -> int:
        return len(self.samples)

    def power(self) -> float:
        """Mean per-sample power (1/len)*sum(|s[t]|^2); 0.0 for the empty signal."""
        if len(self.samples) == 0:
            return 0.0
        return float(np.mean(np.abs(self.samples) ** 2))

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz


@dataclass(frozen=True)
class Segment:
    name: str
    offset: int
    length: int


@dataclass(frozen=True)
class FrameLayout:
    """Named, ordered, non-overlapping sample segments of a frame."""

    segments: tuple[Segment, ...]
    total_length: int

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        prev_end = 0
        for seg in self.segments:
            if seg.length < 0 or seg.offset < 0:
                raise ValueError(f"segment {seg.name!r} has negative offset/length")
            if seg.offset < prev_end:
                raise ValueError(f"segment {seg.name!r} overlaps or is out of order")
            if seg.offset + seg.length > self.total_length:
                raise ValueError(
                    f"segment {seg.name!r} exceeds total_length {self.total_length}"
                )
            prev_end = seg.offset + seg.length
        names = [s.name for s in self.segments]
        if len(set(names)) != len(names):
            raise ValueError("segment names must be unique")

    def segment(self, name: str) -> Segment:
        for seg in self.segments:
            if seg.name == name:
                return seg
        raise KeyError(name)

    def names(self) -> list[str]:
        return [s.name for s in self.segments]

    def extract(self, samples: np.ndarray, name: str, shift: int = 0) -> np.ndarray:
        """Slice out one segment's samples; `shift` moves the window (e.g. filter delay)."""
        seg = self.segment(name)
        start = seg.offset + shift
        return np.asarray(samples)[start : start + seg.length]


@dataclass(frozen=True)
class MeshConfig:
    """System-level mesh parameters. Defaults follow the experimental values
    (2 MHz sampling, 1 MHz bandwidth, 8192-sample ambles, 256-sample guards,
    three nodes)."""

    n_nodes: int = 3
    sample_rate_hz: float = 2e6
    bandwidth_hz: float = 1e6
    carrier_hz: float = 60.484e9
    cycle_period_s: float = 0.2
    amble_len: int = 8192
    payload_len: int = 8192
    est_integration_len: int = 2048
    guard_len: int = 256
    diag_loading_eps: float = 1e-3
    seed: int = 0


def validate_config(cfg: MeshConfig) -> MeshConfig:
    """Return cfg unchanged if all invariants hold, else raise ConfigError.

    Checks: n_nodes >= 1, all lengths > 0, bandwidth <= sample rate,
    non-negative diagonal loading, 64-bit seed.
    """
    if cfg.n_nodes < 1:
        raise ConfigError("n_nodes", "must be ≥ 1")
    for name in ("sample_rate_hz", "bandwidth_hz", "carrier_hz", "cycle_period_s"):
        if getattr(cfg, name) <= 0:
            raise ConfigError(name, "must be > 0")
    if cfg.bandwidth_hz > cfg.sample_rate_hz:
        raise ConfigError(
            "bandwidth_hz",
            f"must be ≤ sample_rate_hz ({cfg.bandwidth_hz} > {cfg.sample_rate_hz})",
        )
    for name in ("amble_len", "payload_len", "est_integration_len", "guard_len"):
        if getattr(cfg, name) <= 0:
            raise ConfigError(name, "must be > 0")
    if cfg.diag_loading_eps < 0:
        raise ConfigError("diag_loading_eps", "must be ≥ 0")
    if not (0 <= cfg.seed < 2**64):
        raise ConfigError("seed", "must fit in 64 bits")
    return cfg


def _tag64(text: str) -> int:
    """Stable 64-bit tag of a string (first 8 bytes of its SHA-256)."""
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "big")


def substream(seed: int, entity: str | int, purpose: str) -> np.random.Generator:
    """Derive an independent RNG substream from the master seed.

    The child stream is seeded by the triple (seed, sha256(entity)[:8],
    sha256(purpose)[:8]) fed to numpy's SeedSequence, so any (entity, purpose)
    pair maps to the same stream regardless of construction order, and
    distinct pairs get statistically independent streams.
    """
    entropy = (int(seed) & (2**64 - 1), _tag64(str(entity)), _tag64(purpose))
    return np.random.default_rng(np.random.SeedSequence(entropy))


@dataclass
class NodeState:
    """One node's clock model and RNG stream.

    phase_rad accumulates unwrapped; use wrapped_phase() for reporting.
    With phase_walk_var_per_s = 0 and cfo_hz = 0 the phase stays constant.
    Owned by exactly one scenario runner; everything else here is immutable.
    """

    node_id: str
    cfo_hz: float = 0.0
    phase_rad: float = 0.0
    phase_walk_var_per_s: float = 0.0
    timestamp_offset_s: float = 0.0
    rng: np.random.Generator = field(default_factory=lambda: substream(0, "node", "default"))

    def wrapped_phase(self) -> float:
        return float(np.mod(self.phase_rad, 2 * np.pi))


def with_seed(cfg: MeshConfig, seed: int) -> MeshConfig:
    return replace(cfg, seed=seed)
