"""Point-to-point transports: a deterministic simulator and TCP sockets."""
from .base import DEFAULT_QUEUE_LIMIT, Endpoint, Envelope, Request, Tag
from .sim import DelayModel, SimEndpoint, SimNetwork
from .socket import SocketEndpoint, SocketNetwork, run_processes, run_threads


def open_channels(network, rank):
    """Open the endpoint of ``rank`` on ``network`` (either backend)."""
    return network.open_channels(rank)


__all__ = [
    "DEFAULT_QUEUE_LIMIT", "DelayModel", "Endpoint", "Envelope", "Request",
    "SimEndpoint", "SimNetwork", "SocketEndpoint", "SocketNetwork", "Tag",
    "open_channels", "run_processes", "run_threads",
]
