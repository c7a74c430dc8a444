"""CAN error detection rules and the TEC/REC fault-confinement state machine.

All transitions are pure functions over immutable state values, so they are
safe to call from anywhere and trivially replayable.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum

from .codec import DOMINANT, RECESSIVE

ERROR_PASSIVE_THRESHOLD = 127
BUS_OFF_THRESHOLD = 255
TEC_ERROR_INCREMENT = 8
REC_ERROR_INCREMENT = 1
SUCCESS_DECREMENT = 1


class ErrorKind(Enum):
    BIT = "bit"
    STUFF = "stuff"
    FORM = "form"
    ACK = "ack"
    CRC = "crc"


class NodeMode(Enum):
    ERROR_ACTIVE = "error-active"
    ERROR_PASSIVE = "error-passive"
    BUS_OFF = "bus-off"


class FlagStyle(Enum):
    ACTIVE = "active"
    PASSIVE = "passive"


class Role(Enum):
    TRANSMITTER = "transmitter"
    RECEIVER = "receiver"


class Phase(Enum):
    """Bus phase relevant to bit-monitoring exemptions."""

    ARBITRATION = "arbitration"
    ACK_SLOT = "ack-slot"
    OTHER = "other"


@dataclass(frozen=True)
class NodeErrorState:
    """Per-node transmit/receive error counters and fault-confinement mode.

    Bus-off latches when either counter is incremented past 255 and is
    absorbing for the run; there is no automatic recovery sequence.
    """

    tec: int = 0
    rec: int = 0
    busoff_latched: bool = False

    @property
    def mode(self) -> NodeMode:
        if self.busoff_latched:
            return NodeMode.BUS_OFF
        if max(self.tec, self.rec) > ERROR_PASSIVE_THRESHOLD:
            return NodeMode.ERROR_PASSIVE
        return NodeMode.ERROR_ACTIVE


def _require_live(state: NodeErrorState) -> None:
    if state.busoff_latched:
        raise RuntimeError("bus-off node takes no part in the protocol")


def on_transmit_error(state: NodeErrorState) -> NodeErrorState:
    """Transmitter detected a fault in its own message: TEC += 8."""
    _require_live(state)
    tec = state.tec + TEC_ERROR_INCREMENT
    return replace(state, tec=tec,
                   busoff_latched=state.busoff_latched or tec > BUS_OFF_THRESHOLD)


def on_receive_error(state: NodeErrorState) -> NodeErrorState:
    """Listener detected a fault in an observed message: REC += 1."""
    _require_live(state)
    rec = state.rec + REC_ERROR_INCREMENT
    return replace(state, rec=rec,
                   busoff_latched=state.busoff_latched or rec > BUS_OFF_THRESHOLD)


def on_success(state: NodeErrorState, role: Role) -> NodeErrorState:
    """Successful transfer decrements the counter for the given role, floored at 0."""
    _require_live(state)
    if role is Role.TRANSMITTER:
        return replace(state, tec=max(0, state.tec - SUCCESS_DECREMENT))
    return replace(state, rec=max(0, state.rec - SUCCESS_DECREMENT))


def detect_transmit_error(sent: int, observed: int, phase: Phase) -> ErrorKind | None:
    """Bit-monitoring rule for a transmitter comparing sent vs observed bits.

    A mismatch is a bit error except while arbitrating (losing arbitration is
    not a fault) and except a dominant bit observed in the ACK slot, which is
    the acknowledgement itself.
    """
    if observed == sent:
        return None
    if phase is Phase.ARBITRATION:
        return None
    if phase is Phase.ACK_SLOT and sent == RECESSIVE and observed == DOMINANT:
        return None
    return ErrorKind.BIT


def detect_ack_error(ack_slot_observed: int) -> ErrorKind | None:
    """Transmitter-side acknowledgement check at the end of the ACK slot."""
    if ack_slot_observed == DOMINANT:
        return None
    return ErrorKind.ACK


@dataclass(frozen=True)
class ErrorFlag:
    """An error flag as driven onto the bus: 6 dominant or 6 recessive bits."""

    style: FlagStyle
    delay_to_ack_delimiter: bool = False

    def bits(self) -> list[int]:
        value = DOMINANT if self.style is FlagStyle.ACTIVE else RECESSIVE
        return [value] * 6


def emit_error_flag(state: NodeErrorState, trigger: ErrorKind) -> ErrorFlag:
    """Flag a detected error: active flag when error-active, passive otherwise.

    CRC errors delay the flag until the ACK delimiter has completed.
    """
    if state.mode is NodeMode.BUS_OFF:
        raise RuntimeError("bus-off node transmits nothing, including error flags")
    style = FlagStyle.ACTIVE if state.mode is NodeMode.ERROR_ACTIVE else FlagStyle.PASSIVE
    return ErrorFlag(style=style, delay_to_ack_delimiter=trigger is ErrorKind.CRC)
