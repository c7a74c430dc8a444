"""Bit-exact encoding and decoding of CAN 2.0 data frames.

Logical zero is the dominant bus state and logical one is recessive, so the
wired-AND medium reduces to a plain bitwise AND over these values.  Bit
stuffing covers the region from the start-of-frame bit through the end of the
CRC sequence; the CRC delimiter, acknowledgement field and end-of-frame are
transmitted unstuffed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

DOMINANT = 0
RECESSIVE = 1

# Generator x^15 + x^14 + x^10 + x^8 + x^7 + x^4 + x^3 + 1, init 0.
CRC15_POLY = 0x4599

STD_ID_MAX = 0x7FF
EXT_ID_MAX = 0x1FFFFFFF
MAX_DLC = 8
STUFF_RUN = 5

# Recessive tail after the stuffed region: CRC delimiter, ACK slot
# (recessive as transmitted), ACK delimiter, 7 EOF bits.
FRAME_TAIL_BITS = 10


class DecodeError(Exception):
    """A received bit stream could not be decoded into a frame."""

    kind = "decode"

    def __init__(self, message: str, position: int | None = None):
        super().__init__(message)
        self.position = position


class StuffError(DecodeError):
    kind = "stuff"


class FormError(DecodeError):
    kind = "form"


class CrcError(DecodeError):
    kind = "crc"


@dataclass(frozen=True)
class FrameId:
    """CAN identifier; 11 bits standard, 29 bits extended."""

    value: int
    extended: bool = False

    def __post_init__(self):
        limit = EXT_ID_MAX if self.extended else STD_ID_MAX
        if not 0 <= self.value <= limit:
            raise ValueError(
                f"identifier 0x{self.value:X} out of range for "
                f"{'extended' if self.extended else 'standard'} frame"
            )

    def __str__(self):
        return f"{self.value:08X}" if self.extended else f"{self.value:03X}"


def app_checksum(data: bytes) -> int:
    """Conventional one-byte application checksum: sum of the bytes mod 256.

    Not part of the CAN protocol itself; carried in the last payload byte of
    frames that opt in via ``DataFrame.has_app_checksum``.
    """
    if len(data) > MAX_DLC - 1:
        raise ValueError("checksum covers at most 7 payload bytes")
    return sum(data) & 0xFF


@dataclass(frozen=True)
class DataFrame:
    """A logical CAN data (or remote) frame before bit-level encoding."""

    can_id: FrameId
    dlc: int = 0
    payload: bytes = b""
    rtr: bool = False
    has_app_checksum: bool = field(default=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "payload", bytes(self.payload))
        if not 0 <= self.dlc <= MAX_DLC:
            raise ValueError(f"dlc {self.dlc} out of range 0..{MAX_DLC}")
        if self.rtr:
            if self.payload:
                raise ValueError("remote frames carry no data")
        elif len(self.payload) != self.dlc:
            raise ValueError(
                f"payload length {len(self.payload)} does not match dlc {self.dlc}"
            )
        if self.has_app_checksum and not self.rtr and self.dlc >= 1:
            expect = app_checksum(self.payload[:-1])
            if self.payload[-1] != expect:
                raise ValueError(
                    f"application checksum mismatch: last byte "
                    f"0x{self.payload[-1]:02X}, expected 0x{expect:02X}"
                )

    @classmethod
    def checksummed(cls, can_id: FrameId, body: bytes) -> "DataFrame":
        """Build a frame whose last payload byte is the checksum of ``body``."""
        payload = bytes(body) + bytes([app_checksum(bytes(body))])
        return cls(can_id=can_id, dlc=len(payload), payload=payload,
                   has_app_checksum=True)


@dataclass
class BitStream:
    """Wire bits of one encoded frame plus field layout bookkeeping.

    ``bits`` is the stuffed on-the-wire sequence.  ``field_offsets`` indexes
    into the *unstuffed* stream; ``wire_of_source`` maps each unstuffed index
    to its wire position so engine code can reason in either coordinate system.
    """

    bits: list[int]
    field_offsets: dict[str, tuple[int, int]]
    stuff_positions: frozenset[int] = frozenset()
    wire_of_source: tuple[int, ...] = ()

    def __len__(self):
        return len(self.bits)

    def wire_range(self, name: str) -> tuple[int, int]:
        start, stop = self.field_offsets[name]
        if stop == start:
            w = self.wire_of_source[start] if start < len(self.wire_of_source) else len(self.bits)
            return (w, w)
        return (self.wire_of_source[start], self.wire_of_source[stop - 1] + 1)

    @property
    def arbitration_end(self) -> int:
        """First wire index past the arbitration field (identifier + RTR)."""
        return self.wire_range("rtr")[1]

    @property
    def ack_slot_index(self) -> int:
        return self.wire_range("ack_slot")[0]

    @property
    def data_region(self) -> tuple[int, int]:
        """Wire index range of the data field (empty range when dlc is 0)."""
        return self.wire_range("data")


def _int_bits(value: int, width: int) -> list[int]:
    return [(value >> (width - 1 - i)) & 1 for i in range(width)]


def compute_crc15(bits) -> int:
    """CRC-15 over a bit sequence via the standard shift register."""
    reg = 0
    for b in bits:
        top = (reg >> 14) & 1
        reg = (reg << 1) & 0x7FFF
        if top ^ b:
            reg ^= CRC15_POLY
    return reg


def _stuff_with_map(bits: list[int]) -> tuple[list[int], list[int], list[int]]:
    out: list[int] = []
    wire_of: list[int] = []
    stuff_pos: list[int] = []
    run_bit = None
    run = 0
    for b in bits:
        wire_of.append(len(out))
        out.append(b)
        if b == run_bit:
            run += 1
        else:
            run_bit = b
            run = 1
        if run == STUFF_RUN:
            s = 1 - b
            stuff_pos.append(len(out))
            out.append(s)
            run_bit = s
            run = 1
    return out, wire_of, stuff_pos


def stuff_bits(bits) -> list[int]:
    """Insert an opposite bit after every run of five equal bits."""
    return _stuff_with_map(list(bits))[0]


def unstuff_bits(bits) -> list[int]:
    """Remove stuff bits; raise :class:`StuffError` on a six-bit run."""
    out: list[int] = []
    run_bit = None
    run = 0
    expect_stuff = False
    for i, b in enumerate(bits):
        if expect_stuff:
            if b == run_bit:
                raise StuffError(f"six consecutive {'recessive' if b else 'dominant'} bits",
                                 position=i)
            run_bit = b
            run = 1
            expect_stuff = False
            continue
        out.append(b)
        if b == run_bit:
            run += 1
        else:
            run_bit = b
            run = 1
        if run == STUFF_RUN:
            expect_stuff = True
    return out


def encode_frame(frame: DataFrame) -> BitStream:
    """Encode a frame into its stuffed wire bits with field offsets."""
    body: list[int] = []
    offsets: dict[str, tuple[int, int]] = {}

    def put(name: str, bits_: list[int]):
        offsets[name] = (len(body), len(body) + len(bits_))
        body.extend(bits_)

    put("sof", [DOMINANT])
    rtr_bit = RECESSIVE if frame.rtr else DOMINANT
    if frame.can_id.extended:
        put("id", _int_bits(frame.can_id.value >> 18, 11))
        put("srr", [RECESSIVE])
        put("ide", [RECESSIVE])
        put("id_ext", _int_bits(frame.can_id.value & 0x3FFFF, 18))
        put("rtr", [rtr_bit])
        put("reserved", [DOMINANT, DOMINANT])
    else:
        put("id", _int_bits(frame.can_id.value, 11))
        put("rtr", [rtr_bit])
        put("ide", [DOMINANT])
        put("reserved", [DOMINANT])
    put("dlc", _int_bits(frame.dlc, 4))
    data_bits: list[int] = []
    for byte in frame.payload:
        data_bits.extend(_int_bits(byte, 8))
    put("data", data_bits)
    put("crc", _int_bits(compute_crc15(body), 15))

    stuffed, wire_of, stuff_pos = _stuff_with_map(body)

    tail_fields = (("crc_delimiter", 1), ("ack_slot", 1), ("ack_delimiter", 1), ("eof", 7))
    for name, width in tail_fields:
        offsets[name] = (len(body), len(body) + width)
        for _ in range(width):
            wire_of.append(len(stuffed) + (len(wire_of) - len(body)) + 0)
            body.append(RECESSIVE)
    # Recompute tail wire positions cleanly: they follow the stuffed region 1:1.
    stuffed_src = offsets["crc"][1]
    wire_of = wire_of[:stuffed_src] + [len(stuffed) + k for k in range(FRAME_TAIL_BITS)]

    bits = stuffed + [RECESSIVE] * FRAME_TAIL_BITS
    return BitStream(bits=bits, field_offsets=offsets,
                     stuff_positions=frozenset(stuff_pos),
                     wire_of_source=tuple(wire_of))


# Parser stages in wire order.  Stuffing applies up to and including "crc".
_TAIL_STAGES = ("crc_delimiter", "ack_slot", "ack_delimiter", "eof", "done")


class FrameParser:
    """Incremental frame parser over observed wire bits.

    Drives both offline decoding and the bus engine's receive side: feed one
    bit per bus tick via :meth:`push`, which raises the matching
    :class:`DecodeError` subclass at the tick the fault becomes observable.
    The CRC verdict is latched when the CRC field completes so receivers can
    withhold acknowledgement, but the CRC error itself surfaces only after the
    frame tail, mirroring the delayed CRC error flag.
    """

    def __init__(self, strict_sof: bool = False):
        self._strict_sof = strict_sof
        self._stage = "sof"
        self._need = 1
        self._acc = 0
        self._run_bit: int | None = None
        self._run = 0
        self._pending_stuff = False
        self._in_stuffed = True
        self._crc_input: list[int] = []
        self._fields: dict[str, int] = {}
        self._data = bytearray()
        self._data_left = 0
        self._eof_left = 7
        self.position = 0
        self.started = False
        self.crc_ok: bool | None = None
        self.error: DecodeError | None = None
        self.frame: DataFrame | None = None

    @property
    def done(self) -> bool:
        return self.frame is not None

    @property
    def failed(self) -> bool:
        return self.error is not None

    @property
    def busy(self) -> bool:
        return self.started and not self.done and not self.failed

    @property
    def next_is_ack_slot(self) -> bool:
        return self._stage == "ack_slot" and not self._pending_stuff

    @property
    def will_ack(self) -> bool:
        """Whether a healthy receiver would drive the ACK slot dominant."""
        return self.next_is_ack_slot and not self.failed and bool(self.crc_ok)

    def push(self, bit: int) -> None:
        try:
            self._push(bit)
        except DecodeError as exc:
            self.error = exc
            raise
        finally:
            self.position += 1

    def _push(self, bit: int) -> None:
        pos = self.position
        if self.done or self.failed:
            raise RuntimeError("parser already finished")

        if self._stage == "sof":
            if bit == RECESSIVE:
                if self._strict_sof:
                    raise FormError("expected dominant start-of-frame bit", pos)
                return  # idle bus
            self.started = True
            self._run_bit = DOMINANT
            self._run = 1
            self._crc_input.append(DOMINANT)
            self._begin("id", 11)
            return

        if self._in_stuffed and self._pending_stuff:
            if bit == self._run_bit:
                raise StuffError(
                    f"six consecutive {'recessive' if bit else 'dominant'} bits", pos)
            self._run_bit = bit
            self._run = 1
            self._pending_stuff = False
            if self._stage in _TAIL_STAGES:
                self._in_stuffed = False
            return

        if self._in_stuffed and self._stage in _TAIL_STAGES:
            self._in_stuffed = False

        if self._in_stuffed:
            if bit == self._run_bit:
                self._run += 1
            else:
                self._run_bit = bit
                self._run = 1
            if self._run == STUFF_RUN:
                self._pending_stuff = True
            self._consume_content(bit, pos)
        else:
            self._consume_tail(bit, pos)

    def _begin(self, stage: str, width: int) -> None:
        self._stage = stage
        self._need = width
        self._acc = 0

    def _consume_content(self, bit: int, pos: int) -> None:
        if self._stage != "crc":
            self._crc_input.append(bit)
        self._acc = (self._acc << 1) | bit
        self._need -= 1
        if self._need:
            return
        value = self._acc
        stage = self._stage
        if stage == "id":
            self._fields["id"] = value
            self._begin("rtr_or_srr", 1)
        elif stage == "rtr_or_srr":
            self._fields["rtr_or_srr"] = value
            self._begin("ide", 1)
        elif stage == "ide":
            if value == DOMINANT:
                self._fields["extended"] = 0
                self._fields["rtr"] = self._fields["rtr_or_srr"]
                self._begin("reserved", 1)
            else:
                self._fields["extended"] = 1
                self._begin("id_ext", 18)
        elif stage == "id_ext":
            self._fields["id_ext"] = value
            self._begin("ext_rtr", 1)
        elif stage == "ext_rtr":
            self._fields["rtr"] = value
            self._begin("reserved", 2)
        elif stage == "reserved":
            # Reserved bits are transmitted dominant but tolerated either way;
            # any corruption here is caught by the CRC.
            self._begin("dlc", 4)
        elif stage == "dlc":
            if value > MAX_DLC:
                raise FormError(f"data length code {value} out of range", pos)
            self._fields["dlc"] = value
            if self._fields["rtr"] == RECESSIVE or value == 0:
                self._begin("crc", 15)
            else:
                self._data_left = value
                self._begin("data", 8)
        elif stage == "data":
            self._data.append(value)
            self._data_left -= 1
            if self._data_left:
                self._begin("data", 8)
            else:
                self._begin("crc", 15)
        elif stage == "crc":
            self.crc_ok = value == compute_crc15(self._crc_input)
            self._stage = "crc_delimiter"

    def _consume_tail(self, bit: int, pos: int) -> None:
        stage = self._stage
        if stage == "crc_delimiter":
            if bit != RECESSIVE:
                raise FormError("dominant CRC delimiter", pos)
            self._stage = "ack_slot"
        elif stage == "ack_slot":
            self._fields["ack"] = bit
            self._stage = "ack_delimiter"
        elif stage == "ack_delimiter":
            if bit != RECESSIVE:
                raise FormError("dominant ACK delimiter", pos)
            self._stage = "eof"
            self._eof_left = 7
        elif stage == "eof":
            if bit != RECESSIVE:
                raise FormError("dominant bit in end-of-frame", pos)
            self._eof_left -= 1
            if self._eof_left == 0:
                if not self.crc_ok:
                    raise CrcError("CRC mismatch", pos)
                self._finish()

    def _finish(self) -> None:
        if self._fields["extended"]:
            value = (self._fields["id"] << 18) | self._fields["id_ext"]
            can_id = FrameId(value, extended=True)
        else:
            can_id = FrameId(self._fields["id"])
        rtr = self._fields["rtr"] == RECESSIVE
        self._stage = "done"
        self.frame = DataFrame(can_id=can_id, dlc=self._fields["dlc"],
                               payload=bytes(self._data) if not rtr else b"",
                               rtr=rtr)


def decode_frame(stream) -> DataFrame:
    """Decode wire bits back into a frame; inverse of :func:`encode_frame`.

    Raises :class:`StuffError`, :class:`FormError` or :class:`CrcError` on
    malformed input.
    """
    bits = stream.bits if isinstance(stream, BitStream) else list(stream)
    if not bits:
        raise FormError("empty bit stream", 0)
    parser = FrameParser(strict_sof=True)
    for b in bits:
        if parser.done:
            if b != RECESSIVE:
                raise FormError("dominant bit after end of frame", parser.position)
            continue
        parser.push(b)
    if not parser.done:
        raise FormError("truncated frame", parser.position)
    return parser.frame
