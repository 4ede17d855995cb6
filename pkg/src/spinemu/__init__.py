"""Software emulator of a sPIN-style smart NIC.

Packets arriving on a port are classified by a small rule matcher, copied
into NIC packet memory and handed to user handler functions running on a
pool of emulated handler processing units (HPUs). Handlers can reply on the
wire and DMA into host memory. Demonstration applications: ping-pong, a
reliable UDP file transfer (SLMP) and MPI derived-datatype unpacking.
"""
from .engine import Engine, EngineConfig, HandlerSet
from .hostif import ContextDescriptor, ContextHandle, SmartNic
from .match import MatchRule, Mode, Ruleset
from .pktbuf import AllocatorConfig, PacketAllocator
from .runtime import CommandStatus, Direction, HandlerArgs

__all__ = [
    "AllocatorConfig", "CommandStatus", "ContextDescriptor", "ContextHandle", "Direction",
    "Engine", "EngineConfig", "HandlerArgs", "HandlerSet", "MatchRule", "Mode",
    "PacketAllocator", "Ruleset", "SmartNic",
]
