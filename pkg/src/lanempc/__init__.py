"""Lane-level distributed MPC for urban traffic signal control."""
from .plant import Plant, SignalParams
from .scenarios import load_scenario, grid_scenario
from .topology import NetworkTopology, build_network, downstream_lanes

__version__ = "0.1.0"

__all__ = ["Plant", "SignalParams", "NetworkTopology", "build_network", "downstream_lanes",
           "load_scenario", "grid_scenario", "__version__"]
