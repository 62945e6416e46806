"""
State definitions for the protocol graph.
"""

from operator import add
from typing import Annotated

from typing_extensions import TypedDict


class ProtocolState(TypedDict):
    """
    The shared state of one (method, target) benchmark cell.

    Attributes:
        config: Resolved RunConfig as a JSON-compatible dict
        method: One of agra, dt, plft, adversarial_holistic
        target: Target dataset name
        messages: Short progress notes appended by every node
        work: Checkpoint paths, results and the queued `next_*` step
        steps: Number of orchestrator decisions taken so far
    """
    config: dict
    method: str
    target: str
    messages: Annotated[list, add]
    work: dict
    steps: int
