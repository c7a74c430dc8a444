"""Attack library driven through a compromised-ECU abstraction.

Four attack kinds: mimicry injection of foreign identifiers, a
highest-priority flood that starves arbitration, the error-handling bus-off
attack that shuts down a healthy transmitter with single-bit collisions, and
the dashboard spoof that misleads the human driver instead of the machines.
Entry points (how the node got compromised) are out of scope: a node is
simply flagged compromised.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .codec import DOMINANT, RECESSIVE, BitStream, DataFrame, FrameId
from .ecus import SignalDef, ms_to_ticks_local

ATTACK_KINDS = ("spoof", "dos_flood", "busoff", "display_spoof")


@dataclass
class AttackSpec:
    kind: str
    node: str
    start_ms: float = 0.0
    stop_ms: float | None = None
    # spoof / dos_flood
    target_id: FrameId | None = None
    period_ms: float = 10.0
    payload: bytes = b""
    # busoff
    victim: str | None = None
    victim_id: FrameId | None = None
    max_errors: int | None = None
    # display_spoof
    target_signal: str | None = None
    false_offset: float | None = None
    false_value: float | None = None

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")


class _WindowedAttack:
    def __init__(self, spec: AttackSpec, bitrate: int, horizon: int):
        self.spec = spec
        self.bitrate = bitrate
        self.start_tick = ms_to_ticks_local(spec.start_ms, bitrate) if spec.start_ms else 0
        self.stop_tick = (ms_to_ticks_local(spec.stop_ms, bitrate)
                          if spec.stop_ms is not None else horizon)

    def active(self, tick: int) -> bool:
        return self.start_tick <= tick < self.stop_tick


class SpoofAttack(_WindowedAttack):
    """Emit frames bearing a foreign identifier at a fixed rate."""

    def __init__(self, spec: AttackSpec, bitrate: int, horizon: int):
        super().__init__(spec, bitrate, horizon)
        self.period_ticks = (ms_to_ticks_local(spec.period_ms, bitrate)
                             if spec.period_ms > 0 else 0)
        self.next_due = self.start_tick if self.period_ticks else None

    def next_tick(self) -> int | None:
        if self.next_due is None or self.next_due >= self.stop_tick:
            return None
        return self.next_due

    def emit_due(self, tick: int) -> list[DataFrame]:
        if self.next_due != tick or not self.active(tick):
            return []
        self.next_due = tick + self.period_ticks
        return [DataFrame(can_id=self.spec.target_id, dlc=len(self.spec.payload),
                          payload=self.spec.payload)]


class DosFloodAttack(SpoofAttack):
    """Continuously offer highest-priority frames so arbitration starves others."""

    def __init__(self, spec: AttackSpec, bitrate: int, horizon: int):
        if spec.target_id is None:
            spec.target_id = FrameId(0x000)
        super().__init__(spec, bitrate, horizon)


class BusOffAttack(_WindowedAttack):
    """Force a healthy transmitter off the bus via induced bit errors.

    Synchronizes with the victim's periodic frame (the simulator grants
    schedule knowledge) and drives one dominant bit over the first recessive
    bit of the victim's data field, so the victim sees a bit error and its
    transmit error counter climbs by 8 per attempt.
    """

    def __init__(self, spec: AttackSpec, bitrate: int, horizon: int):
        super().__init__(spec, bitrate, horizon)
        self.errors_induced = 0

    def next_tick(self) -> int | None:
        return None  # drives raw bits via the frame-start hook only

    def emit_due(self, tick: int) -> list[DataFrame]:
        return []

    def on_frame_start(self, bus, transmitter: str, frame: DataFrame,
                       stream: BitStream, sof_tick: int) -> None:
        if not self.active(sof_tick):
            return
        if transmitter != self.spec.victim or frame.can_id != self.spec.victim_id:
            return
        if self.spec.max_errors is not None and self.errors_induced >= self.spec.max_errors:
            return
        if bus.attachments[self.spec.node].busoff:
            return
        lo, hi = stream.data_region
        target = next((i for i in range(lo, hi) if stream.bits[i] == RECESSIVE), None)
        if target is None:
            return  # no recessive data bit to overwrite this period
        bus.inject_raw(sof_tick + target, [DOMINANT], self.spec.node)
        self.errors_induced += 1


class DisplaySpoofAttack(_WindowedAttack):
    """Replace the dashboard's displayed speed with a false reading.

    Substitutes the payload of the display node's own scheduled frames (same
    identifier, same cadence), leaving all genuine speed telemetry untouched;
    only the human-facing number lies.
    """

    def __init__(self, spec: AttackSpec, bitrate: int, horizon: int,
                 display_signal: SignalDef):
        super().__init__(spec, bitrate, horizon)
        self.display_signal = display_signal
        self._field = display_signal.fields[0]

    def payload_override(self, signal: SignalDef, now_us: int,
                         honest_value: float) -> bytes | None:
        tick = now_us * self.bitrate // 1_000_000
        if signal.name != self.display_signal.name or not self.active(tick):
            return None
        if self.spec.false_value is not None:
            shown = self.spec.false_value
        else:
            shown = honest_value + (self.spec.false_offset or 0.0)
        frame = signal.build_frame({self._field.name: max(0.0, shown)})
        return frame.payload
