from collections.abc import Sequence

from app.models import ProtocolId, SimConfig
from app.services.protocols.base import Protocol
from app.services.protocols.fresh import FreshProtocol
from app.services.protocols.mcd import McdProtocol
from app.services.protocols.nxn import NxnProtocol
from app.services.protocols.perfect import PerfectProtocol

PROTOCOLS: dict[ProtocolId, type[Protocol]] = {
    ProtocolId.MCD: McdProtocol,
    ProtocolId.FRESH: FreshProtocol,
    ProtocolId.NXN: NxnProtocol,
    ProtocolId.PERFECT: PerfectProtocol,
}


def get_protocol(config: SimConfig, assignment: Sequence[int] | None = None) -> Protocol:
    return PROTOCOLS[config.protocol](config, assignment)


def control_overhead(
    protocol: ProtocolId, n_items_in_cycle: int, n_database: int, config: SimConfig
) -> int:
    """Control units one channel spends per cycle under ``protocol``."""
    return PROTOCOLS[protocol](config).control_overhead(n_items_in_cycle, n_database)


__all__ = [
    "PROTOCOLS",
    "FreshProtocol",
    "McdProtocol",
    "NxnProtocol",
    "PerfectProtocol",
    "Protocol",
    "control_overhead",
    "get_protocol",
]
