"""Signal controllers behind one interface: ``reset`` then ``control(measurement)``."""
from ..errors import MalformedConfig
from .base import Controller, ControllerOutput, NeighborMessage
from .centralized import CentralizedReference, build_network_qp
from .fixed_time import FixedTime, fixed_time
from .max_pressure import MaxPressure, max_pressure
from .mpc import DistributedMpc, MpcAgent, MpcParams

CONTROLLER_TYPES = ("fixed_time", "max_pressure", "mpc_road", "dmpc_admm", "centralized_ref")


def make_controller(kind, params=None):
    params = dict(params or {})
    if kind == "fixed_time":
        return FixedTime()
    if kind == "max_pressure":
        return MaxPressure()
    if kind == "dmpc_admm":
        return DistributedMpc("dmpc_admm", "lane", "admm", params)
    if kind == "mpc_road":
        return DistributedMpc("mpc_road", "road", "dense", params)
    if kind == "centralized_ref":
        return CentralizedReference(params)
    raise MalformedConfig(f"unknown controller type {kind!r}; expected one of {', '.join(CONTROLLER_TYPES)}")


__all__ = [
    "CONTROLLER_TYPES", "CentralizedReference", "Controller", "ControllerOutput", "DistributedMpc",
    "FixedTime", "MaxPressure", "MpcAgent", "MpcParams", "NeighborMessage", "build_network_qp",
    "fixed_time", "make_controller", "max_pressure",
]
