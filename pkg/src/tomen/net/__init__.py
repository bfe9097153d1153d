from tomen.net.base import LogicalClock, NetworkError, Owner, WallClock, host_of, split_addr
from tomen.net.live import LiveNetwork
from tomen.net.sim import Simulator, VantageRecord

__all__ = [
    "LiveNetwork",
    "LogicalClock",
    "NetworkError",
    "Owner",
    "Simulator",
    "VantageRecord",
    "WallClock",
    "host_of",
    "split_addr",
]
