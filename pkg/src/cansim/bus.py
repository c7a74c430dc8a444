"""Discrete-event, bit-time simulation of a single broadcast CAN bus.

The medium is a wired AND: at every tick the observed bus bit is the AND of
all driven bits (dominant 0 wins).  Arbitration, bit monitoring, stuff/form
checking, acknowledgement and error-frame bookkeeping all run at bit
granularity.  Once a frame has a single surviving transmitter and no raw bit
injections can touch it, the remainder is resolved in one step since the
observed stream then equals the transmitter's encoded stream exactly.

Error epochs follow a single-reporter model: the first detected fault in a
frame discards it bus-wide, the transmitter re-queues the frame, and the bus
recovers after a fixed flag + delimiter + intermission gap.  A receiver-side
fault whose reporters can only raise passive (or suppressed) flags does not
disturb the frame; those receivers simply drop it and withhold the ACK.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

from .codec import (DOMINANT, RECESSIVE, BitStream, DataFrame, DecodeError,
                    FrameParser, encode_frame)
from .errors import (ErrorKind, FlagStyle, NodeErrorState, NodeMode, Phase,
                     Role, detect_ack_error, detect_transmit_error,
                     emit_error_flag, on_receive_error, on_success,
                     on_transmit_error)
from .icewall import BlockReason, Icewall

DEFAULT_BITRATE = 500_000
MAX_BITRATE = 1_000_000

INTERMISSION_BITS = 3
ERROR_FLAG_BITS = 6
ERROR_DELIMITER_BITS = 8
SUSPEND_BITS = 8

KIND_DELIVERED = "delivered"
KIND_ARB_LOST = "arbitration-lost"
KIND_ERROR_FRAME = "error-frame"
KIND_ICEWALL_BLOCKED = "icewall-blocked"
KIND_DETECTOR_ALERT = "detector-alert"


@dataclass(frozen=True)
class BusTime:
    """A point in simulated time, measured in nominal bit times."""

    ticks: int
    bitrate: int = DEFAULT_BITRATE

    @property
    def microseconds(self) -> int:
        return self.ticks * 1_000_000 // self.bitrate

    @classmethod
    def from_ms(cls, ms: float, bitrate: int = DEFAULT_BITRATE) -> "BusTime":
        return cls(ticks=ms_to_ticks(ms, bitrate), bitrate=bitrate)


def ms_to_ticks(ms: float, bitrate: int) -> int:
    return round(ms * bitrate / 1000)


@dataclass
class TraceRecord:
    """One timestamped bus event."""

    timestamp_us: int
    kind: str
    seq: int
    node: str | None = None
    frame: DataFrame | None = None
    error_kind: str | None = None
    flag: str | None = None
    reason: str | None = None
    detector: str | None = None
    info: str | None = None


def _wire_id(frame: DataFrame) -> str:
    return str(frame.can_id)


def format_trace_line(rec: TraceRecord, channel: str = "vcan0") -> str:
    """Render one trace record in the frozen log format.

    Deliveries use the candump text form ``(<sec>.<usec>) <chan> <id>#<data>``;
    every other event uses a ``!EVENT key=value`` suffix form.
    """
    sec, usec = divmod(rec.timestamp_us, 1_000_000)
    stamp = f"({sec}.{usec:06d}) {channel}"
    if rec.kind == KIND_DELIVERED:
        assert rec.frame is not None
        data = "R" if rec.frame.rtr else rec.frame.payload.hex().upper()
        return f"{stamp} {_wire_id(rec.frame)}#{data}"
    if rec.kind == KIND_ARB_LOST:
        return f"{stamp} !ARBLOST node={rec.node} id={_wire_id(rec.frame)}"
    if rec.kind == KIND_ERROR_FRAME:
        line = f"{stamp} !ERROR kind={rec.error_kind} reporter={rec.node} flag={rec.flag}"
        if rec.frame is not None:
            line += f" id={_wire_id(rec.frame)}"
        return line
    if rec.kind == KIND_ICEWALL_BLOCKED:
        return (f"{stamp} !BLOCKED node={rec.node} id={_wire_id(rec.frame)} "
                f"reason={rec.reason}")
    if rec.kind == KIND_DETECTOR_ALERT:
        return f'{stamp} !ALERT detector={rec.detector} detail="{rec.info}"'
    raise ValueError(f"unknown record kind {rec.kind!r}")


@dataclass
class _QueuedFrame:
    frame: DataFrame
    stream: BitStream
    seq: int
    offered_tick: int
    origin: str


def _queue_key(frame: DataFrame) -> tuple:
    cid = frame.can_id
    prefix = cid.value >> 18 if cid.extended else cid.value
    return (prefix, cid.extended, frame.rtr, cid.value)


class Attachment:
    """One node's connection to the bus: transmit queue, error state, filter.

    Offered frames stage in arrival order and enter the priority queue only
    once simulated time reaches their offer tick, so a frame never contends
    for the bus before it exists.
    """

    def __init__(self, name: str, index: int, icewall: Icewall | None = None):
        self.name = name
        self.index = index
        self.icewall = icewall
        self.error_state = NodeErrorState()
        self.suspend_until = 0
        self._pending: list[_QueuedFrame] = []
        self._heap: list[tuple[tuple, int, _QueuedFrame]] = []
        self.offered = 0
        self.delivered = 0
        self.blocked = 0
        self.blocked_legit = 0
        self.abandoned = 0
        self.errors_reported = 0

    @property
    def busoff(self) -> bool:
        return self.error_state.mode is NodeMode.BUS_OFF

    @property
    def queue_len(self) -> int:
        return len(self._heap) + len(self._pending)

    def push(self, qf: _QueuedFrame) -> None:
        if self._pending and qf.offered_tick < self._pending[-1].offered_tick:
            raise ValueError("frames must be offered in nondecreasing tick order")
        self._pending.append(qf)

    def admit(self, tick: int) -> None:
        while self._pending and self._pending[0].offered_tick <= tick:
            qf = self._pending.pop(0)
            heapq.heappush(self._heap, (_queue_key(qf.frame), qf.seq, qf))

    def ready_tick(self, free_tick: int) -> int | None:
        base = max(free_tick, self.suspend_until)
        if self._heap:
            return base
        if self._pending:
            return max(base, self._pending[0].offered_tick)
        return None

    def peek(self) -> _QueuedFrame:
        return self._heap[0][2]

    def pop(self) -> _QueuedFrame:
        return heapq.heappop(self._heap)[2]

    def purge(self) -> int:
        n = self.queue_len
        self._pending.clear()
        self._heap.clear()
        return n


class _ActiveTx:
    __slots__ = ("att", "qf", "stream")

    def __init__(self, att: Attachment, qf: _QueuedFrame):
        self.att = att
        self.qf = qf
        self.stream = qf.stream


class Bus:
    """A single CAN bus segment with attached nodes.

    Single-threaded and fully deterministic: identical attachment order,
    offers and injections produce a byte-identical trace.
    """

    def __init__(self, bitrate: int = DEFAULT_BITRATE):
        if not 0 < bitrate <= MAX_BITRATE:
            raise ValueError(f"bitrate must be in (0, {MAX_BITRATE}] bit/s")
        self.bitrate = bitrate
        self.attachments: dict[str, Attachment] = {}
        self.records: list[TraceRecord] = []
        self.free_tick = 0
        self.counter_log: list[tuple[int, str, int, int, str]] = []
        self.latencies: list[tuple[str, DataFrame, int, int]] = []
        self.frame_start_listeners: list = []
        self._seq = 0
        self._frame_seq = 0
        self._inj: dict[int, tuple[int, str]] = {}

    def us(self, tick: int) -> int:
        return tick * 1_000_000 // self.bitrate

    def attach(self, name: str, icewall: Icewall | None = None) -> Attachment:
        if name in self.attachments:
            raise ValueError(f"node {name!r} already attached")
        att = Attachment(name, len(self.attachments), icewall)
        self.attachments[name] = att
        return att

    def _record(self, tick: int, kind: str, **kw) -> TraceRecord:
        rec = TraceRecord(timestamp_us=self.us(tick), kind=kind, seq=self._seq, **kw)
        self._seq += 1
        self.records.append(rec)
        return rec

    def _log_state(self, tick: int, att: Attachment, new_state: NodeErrorState) -> None:
        att.error_state = new_state
        self.counter_log.append((self.us(tick), att.name, new_state.tec,
                                 new_state.rec, new_state.mode.value))

    def offer(self, name: str, frame: DataFrame, tick: int,
              origin: str = "schedule") -> bool:
        """Pass one frame from a node toward its transmit queue.

        Runs the node's egress filter; blocked frames are recorded and never
        reach the bus.  Returns True when the frame was queued.
        """
        att = self.attachments[name]
        att.offered += 1
        if att.busoff:
            att.abandoned += 1
            return False
        if att.icewall is not None:
            verdict = att.icewall.filter_egress(frame, self.us(tick))
            if not verdict.allowed:
                att.blocked += 1
                if origin == "schedule":
                    att.blocked_legit += 1
                self._record(tick, KIND_ICEWALL_BLOCKED, node=name, frame=frame,
                             reason=verdict.reason.value)
                return False
        qf = _QueuedFrame(frame=frame, stream=encode_frame(frame),
                          seq=self._frame_seq, offered_tick=tick, origin=origin)
        self._frame_seq += 1
        att.push(qf)
        return True

    def inject_raw(self, tick: int, bits, name: str) -> None:
        """Drive raw bits onto the medium starting at the given tick.

        The bits are ANDed with whatever else drives the bus.  Rejected for
        bus-off nodes.
        """
        att = self.attachments[name]
        if att.busoff:
            raise RuntimeError("bus-off node cannot drive the bus")
        for i, b in enumerate(bits):
            t = tick + i
            cur = self._inj.get(t)
            if cur is None:
                self._inj[t] = (b, name)
            else:
                self._inj[t] = (cur[0] & b, cur[1])

    def next_activity_tick(self) -> int | None:
        """Earliest tick at which the bus has something to do, if any."""
        cands = []
        for att in self.attachments.values():
            if att.busoff:
                continue
            t = att.ready_tick(self.free_tick)
            if t is not None:
                cands.append(t)
        if self._inj:
            cands.append(max(self.free_tick, min(self._inj)))
        return min(cands) if cands else None

    def step(self, until_tick: int) -> list[TraceRecord]:
        """Run frame cycles whose start falls before ``until_tick``."""
        start = len(self.records)
        while True:
            t = self.next_activity_tick()
            if t is None or t >= until_tick:
                break
            self.run_cycle(t)
        return self.records[start:]

    def _ack_capable(self, engaged: set[str]) -> bool:
        return any(not att.busoff and att.name not in engaged
                   for att in self.attachments.values())

    def _injections_between(self, a: int, b: int) -> bool:
        return any(a <= t < b for t in self._inj)

    def run_cycle(self, t0: int) -> int:
        """Simulate one bus occupancy starting at ``t0``; returns the end tick."""
        active: list[_ActiveTx] = []
        for att in self.attachments.values():
            if att.busoff:
                continue
            att.admit(t0)
            if att._heap and max(self.free_tick, att.suspend_until) <= t0:
                active.append(_ActiveTx(att, att.peek()))

        parser = FrameParser()
        pos = 0
        notified = len(active) != 1  # listeners fire once a single winner is certain
        sof_injector: str | None = None

        while True:
            tick = t0 + pos

            if not active and not parser.busy and not any(t >= tick for t in self._inj):
                # Injected noise exhausted without (or after) a frame.
                if parser.position and not parser.done and not parser.failed and parser.started:
                    pass  # unreachable: busy covers it
                if pos:
                    self.free_tick = max(self.free_tick, tick)
                return tick

            bit = RECESSIVE
            for tx in active:
                bit &= tx.stream.bits[pos]
            inj = self._inj.pop(tick, None)
            if inj is not None:
                bit &= inj[0]
                if not active and not parser.started and bit == DOMINANT and sof_injector is None:
                    sof_injector = inj[1]
            if parser.will_ack and self._ack_capable({tx.att.name for tx in active}):
                bit = DOMINANT

            tx_detection: tuple[_ActiveTx, ErrorKind] | None = None
            for tx in list(active):
                sent = tx.stream.bits[pos]
                if pos == tx.stream.ack_slot_index:
                    kind = detect_ack_error(bit)
                else:
                    phase = (Phase.ARBITRATION if pos < tx.stream.arbitration_end
                             else Phase.OTHER)
                    kind = detect_transmit_error(sent, bit, phase)
                    if kind is None and bit != sent:
                        # Lost arbitration: revert to receiving, retry at next idle.
                        self._record(tick, KIND_ARB_LOST, node=tx.att.name,
                                     frame=tx.qf.frame)
                        active.remove(tx)
                        continue
                if kind is not None and tx_detection is None:
                    tx_detection = (tx, kind)

            rx_error: DecodeError | None = None
            if not parser.failed and not parser.done:
                try:
                    parser.push(bit)
                except DecodeError as exc:
                    rx_error = exc

            if tx_detection is not None or rx_error is not None:
                epoch_end = self._resolve_detections(tick, active, tx_detection,
                                                     rx_error)
                if epoch_end is not None:
                    return epoch_end

            if parser.done:
                return self._finish_delivery(tick, active, parser.frame, sof_injector)

            pos += 1

            if len(active) == 1 and not notified and pos >= active[0].stream.arbitration_end:
                tx = active[0]
                for listener in self.frame_start_listeners:
                    listener(tx.att.name, tx.qf.frame, tx.stream, t0)
                notified = True

            if (len(active) == 1 and notified and parser.busy and not parser.failed
                    and not self._injections_between(tick + 1, t0 + len(active[0].stream.bits))):
                # No contention and nothing can corrupt the rest of the frame:
                # the observed stream equals the encoded stream bit for bit.
                tx = active[0]
                if self._ack_capable({tx.att.name}):
                    return self._finish_delivery(t0 + len(tx.stream.bits) - 1,
                                                 active, tx.qf.frame, None)
                ack_tick = t0 + tx.stream.ack_slot_index
                return self._resolve_detections(ack_tick, active,
                                                (tx, ErrorKind.ACK), None)

    def _resolve_detections(self, tick: int, active: list[_ActiveTx],
                            tx_detection: tuple[_ActiveTx, ErrorKind] | None,
                            rx_error: DecodeError | None) -> int | None:
        """Apply one tick's detections; returns the cycle end tick on an epoch."""
        engaged = {tx.att.name for tx in active}
        receivers = [att for att in self.attachments.values()
                     if not att.busoff and att.name not in engaged]

        epoch_kind: ErrorKind | None = None
        reporter: Attachment | None = None
        flag_style: FlagStyle | None = None

        if tx_detection is not None:
            tx, kind = tx_detection
            epoch_kind = kind
            reporter = tx.att
            flag_style = emit_error_flag(tx.att.error_state, kind).style
        if rx_error is not None:
            kind = ErrorKind(rx_error.kind)
            suppressed_all = True
            rx_reporter: Attachment | None = None
            rx_flag: FlagStyle | None = None
            for att in receivers:
                if att.error_state.mode is NodeMode.ERROR_ACTIVE:
                    if att.icewall is not None:
                        verdict = att.icewall.filter_error_flag(self.us(tick))
                        if not verdict.allowed:
                            self._record(tick, KIND_ICEWALL_BLOCKED, node=att.name,
                                         frame=active[0].qf.frame if active else None,
                                         reason=BlockReason.ERROR_FLOOD.value)
                            continue
                    rx_reporter = att
                    rx_flag = FlagStyle.ACTIVE
                    suppressed_all = False
                    break
                if rx_reporter is None:
                    rx_reporter = att
                    rx_flag = FlagStyle.PASSIVE
            for att in receivers:
                self._log_state(tick, att, on_receive_error(att.error_state))
            if epoch_kind is None:
                if suppressed_all:
                    # Passive or suppressed flags leave the bus untouched; the
                    # detecting receivers drop the frame locally.
                    if rx_reporter is not None:
                        rx_reporter.errors_reported += 1
                        self._record(tick, KIND_ERROR_FRAME, node=rx_reporter.name,
                                     error_kind=kind.value,
                                     flag=FlagStyle.PASSIVE.value,
                                     frame=active[0].qf.frame if active else None)
                    return None
                epoch_kind = kind
                reporter = rx_reporter
                flag_style = rx_flag

        if epoch_kind is None:
            return None

        assert reporter is not None and flag_style is not None
        reporter.errors_reported += 1
        self._record(tick, KIND_ERROR_FRAME, node=reporter.name,
                     error_kind=epoch_kind.value, flag=flag_style.value,
                     frame=active[0].qf.frame if active else None)

        end = tick + 1 + ERROR_FLAG_BITS + ERROR_DELIMITER_BITS + INTERMISSION_BITS
        for tx in active:
            state = on_transmit_error(tx.att.error_state)
            self._log_state(tick, tx.att, state)
            if tx.att.busoff:
                tx.att.abandoned += tx.att.purge()
            elif state.mode is NodeMode.ERROR_PASSIVE:
                tx.att.suspend_until = end + SUSPEND_BITS
        self.free_tick = end
        return end

    def _finish_delivery(self, t_end: int, active: list[_ActiveTx],
                         frame: DataFrame, sof_injector: str | None) -> int:
        transmitter = active[0].att.name if active else (sof_injector or "?")
        self._record(t_end, KIND_DELIVERED, node=transmitter, frame=frame)
        engaged = {tx.att.name for tx in active}
        for tx in active:
            tx.att.pop()
            tx.att.delivered += 1
            self.latencies.append((tx.att.name, tx.qf.frame, tx.qf.offered_tick, t_end))
            state = on_success(tx.att.error_state, Role.TRANSMITTER)
            if state != tx.att.error_state:
                self._log_state(t_end, tx.att, state)
            if state.mode is NodeMode.ERROR_PASSIVE:
                tx.att.suspend_until = t_end + 1 + INTERMISSION_BITS + SUSPEND_BITS
        for att in self.attachments.values():
            if att.busoff or att.name in engaged:
                continue
            state = on_success(att.error_state, Role.RECEIVER)
            if state != att.error_state:
                self._log_state(t_end, att, state)
        self.free_tick = t_end + 1 + INTERMISSION_BITS
        return t_end
