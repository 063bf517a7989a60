"""Discrete-time baseband simulator for distributed coherent beamforming meshes."""

from .core import ComplexSignal, ConfigError, FrameLayout, MeshConfig, NodeState, Segment, substream, validate_config
from .impairments import ChannelModel, NoiseSpec, add_noise, advance_clock, apply_channel, apply_node_imperfections
from .scenario import CycleRecord, ScenarioConfig, run_coherence, run_rx_bf, run_scenario, run_tx_bf, run_tx_null

__version__ = "0.1.0"

__all__ = [
    "ComplexSignal",
    "ConfigError",
    "FrameLayout",
    "MeshConfig",
    "NodeState",
    "Segment",
    "substream",
    "validate_config",
    "ChannelModel",
    "NoiseSpec",
    "add_noise",
    "advance_clock",
    "apply_channel",
    "apply_node_imperfections",
    "CycleRecord",
    "ScenarioConfig",
    "run_scenario",
    "run_rx_bf",
    "run_tx_bf",
    "run_tx_null",
    "run_coherence",
    "__version__",
]
