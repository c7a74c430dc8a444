"""Node behavior models: periodic producers, consumers and the scripted driver.

Message kinds, identifiers and payload layouts come from the shipped signal
dictionary; the producer/consumer wiring must stay inside the shipped
adjacency dataset.  A small first-order vehicle plant links throttle commands
back to the speed telemetry so the dashboard -> driver -> throttle loop closes.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from importlib import resources

import yaml

from .codec import DataFrame, FrameId, app_checksum


@dataclass(frozen=True)
class FieldDef:
    name: str
    offset: int
    scale: float = 1.0
    unit: str = ""
    minimum: float = 0.0
    maximum: float = 0.0

    def encode_into(self, payload: bytearray, value: float) -> None:
        raw = max(0, min(0xFFFF, round(value / self.scale)))
        payload[self.offset:self.offset + 2] = raw.to_bytes(2, "big")

    def decode(self, payload: bytes) -> float | None:
        end = self.offset + 2
        if len(payload) < end:
            return None
        return int.from_bytes(payload[self.offset:end], "big") * self.scale


@dataclass(frozen=True)
class SignalDef:
    """One message kind: identifier, cadence, payload layout and source."""

    name: str
    frame_id: FrameId
    producer: str
    consumers: tuple[str, ...]
    period_ms: float
    generator: str
    params: dict = field(default_factory=dict)
    fields: tuple[FieldDef, ...] = ()
    checksum: bool = False
    dlc: int | None = None

    def payload_length(self) -> int:
        if self.dlc is not None:
            return self.dlc
        length = max((f.offset + 2 for f in self.fields), default=1)
        if self.checksum:
            length += 1
        return length

    def build_frame(self, values: dict[str, float] | None = None,
                    raw: bytes | None = None) -> DataFrame:
        if raw is not None:
            payload = bytes(raw)
        else:
            payload = bytearray(self.payload_length())
            for f in self.fields:
                f.encode_into(payload, (values or {}).get(f.name, 0.0))
            if self.checksum:
                payload[-1] = app_checksum(bytes(payload[:-1]))
            payload = bytes(payload)
        return DataFrame(can_id=self.frame_id, dlc=len(payload), payload=payload,
                         has_app_checksum=self.checksum)

    def field_named(self, name: str) -> FieldDef:
        for f in self.fields:
            if f.name == name:
                return f
        raise KeyError(f"signal {self.name} has no field {name!r}")


@dataclass(frozen=True)
class EcuSpec:
    """Which message kinds a node produces and consumes."""

    name: str
    produces: tuple[str, ...] = ()
    consumes: tuple[tuple[str, str], ...] = ()
    compromised: bool = False
    safety_critical: bool = False


class SignalDictionary:
    def __init__(self, signals: dict[str, SignalDef], adjacency: dict):
        self.signals = signals
        self.by_id = {s.frame_id: s for s in signals.values()}
        self.nodes = adjacency["nodes"]
        self.edges = adjacency["edges"]
        self._edge_set = {(e["from"], e["to"], e["signal"]) for e in self.edges}

    def signal(self, name: str) -> SignalDef:
        if name not in self.signals:
            raise KeyError(f"unknown signal {name!r}")
        return self.signals[name]

    def is_safety_critical(self, node: str) -> bool:
        return bool(self.nodes.get(node, {}).get("safety_critical"))

    def has_edge(self, src: str, dst: str, signal: str) -> bool:
        return (src, dst, signal) in self._edge_set

    def produces(self, node: str) -> list[str]:
        return sorted({e["signal"] for e in self.edges if e["from"] == node})

    def consumes(self, node: str) -> list[tuple[str, str]]:
        return sorted((e["signal"], e["from"]) for e in self.edges if e["to"] == node)


def load_dictionary() -> SignalDictionary:
    """Load the shipped signal dictionary and adjacency dataset."""
    data_dir = resources.files("cansim").joinpath("data")
    sig_doc = yaml.safe_load(data_dir.joinpath("signals.yaml").read_text())
    adj_doc = yaml.safe_load(data_dir.joinpath("adjacency.yaml").read_text())
    if sig_doc.get("schema") != "cansim-signals/1":
        raise ValueError("unsupported signal dictionary schema")
    if adj_doc.get("schema") != "cansim-adjacency/1":
        raise ValueError("unsupported adjacency schema")
    signals = {}
    for name, raw in sig_doc["signals"].items():
        fields = tuple(FieldDef(name=f["name"], offset=f["offset"],
                                scale=f.get("scale", 1.0), unit=f.get("unit", ""),
                                minimum=f.get("min", 0.0), maximum=f.get("max", 0.0))
                       for f in raw.get("fields", ()))
        signals[name] = SignalDef(
            name=name, frame_id=FrameId(raw["id"]), producer=raw["producer"],
            consumers=tuple(raw.get("consumers", ())),
            period_ms=float(raw.get("period_ms", 100)),
            generator=raw.get("generator", "counter"),
            params=raw.get("params", {}), fields=fields,
            checksum=bool(raw.get("checksum", False)), dlc=raw.get("dlc"))
    # The dictionary must itself be a subgraph of the adjacency dataset.
    edge_set = {(e["from"], e["to"], e["signal"]) for e in adj_doc["edges"]}
    for sig in signals.values():
        for consumer in sig.consumers:
            if (sig.producer, consumer, sig.name) not in edge_set:
                raise ValueError(f"signal {sig.name}: edge "
                                 f"{sig.producer}->{consumer} not in adjacency dataset")
    return SignalDictionary(signals, adj_doc)


class VehiclePlant:
    """First-order lag from throttle input to vehicle speed.

    speed' = (gain * throttle - speed) / tau, integrated in closed form
    between updates.  Sampling never moves time backwards; queries for an
    earlier instant return the current state.
    """

    def __init__(self, initial_speed: float = 0.0, gain: float = 200.0,
                 tau_s: float = 1.0, initial_throttle: float = 0.0):
        self.gain = gain
        self.tau_s = tau_s
        self.speed = initial_speed
        self.throttle = initial_throttle
        self._t_us = 0

    def advance_to(self, t_us: int) -> None:
        if t_us <= self._t_us:
            return
        dt = (t_us - self._t_us) / 1e6
        target = self.gain * self.throttle
        self.speed = target + (self.speed - target) * math.exp(-dt / self.tau_s)
        self._t_us = t_us

    def set_throttle(self, fraction: float, t_us: int) -> None:
        self.advance_to(t_us)
        self.throttle = max(0.0, min(1.0, fraction))

    def speed_at(self, t_us: int) -> float:
        self.advance_to(t_us)
        return self.speed

    @property
    def engine_rpm(self) -> float:
        return 700.0 + 40.0 * self.speed


@dataclass
class ScheduleEntry:
    signal: SignalDef
    period_ticks: int
    next_due: int = 0
    jitter_ticks: int = 0


class EcuNode:
    """A periodic producer/consumer node driven by the bus clock."""

    def __init__(self, spec: EcuSpec, entries: list[ScheduleEntry],
                 plant: VehiclePlant, rng: random.Random, bitrate: int):
        self.spec = spec
        self.entries = entries
        self.plant = plant
        self.rng = rng
        self.bitrate = bitrate
        self.relays: dict[str, float] = {}
        self.counters: dict[str, int] = {}
        self.busoff = False
        self.payload_override = None  # callable (signal, now_us) -> bytes | None

    def next_tick(self) -> int | None:
        if self.busoff or not self.entries:
            return None
        return min(e.next_due for e in self.entries)

    def emit_due(self, tick: int) -> list[DataFrame]:
        """Frames for every schedule entry due at this tick, lowest id first."""
        if self.busoff:
            return []
        frames = []
        now_us = tick * 1_000_000 // self.bitrate
        for entry in self.entries:
            if entry.next_due != tick:
                continue
            frames.append(self._build(entry.signal, now_us))
            step = entry.period_ticks
            if entry.jitter_ticks:
                step += self.rng.randint(-entry.jitter_ticks, entry.jitter_ticks)
            entry.next_due = tick + max(1, step)
        frames.sort(key=lambda f: (f.can_id.extended, f.can_id.value))
        return frames

    def _build(self, signal: SignalDef, now_us: int) -> DataFrame:
        if self.payload_override is not None:
            raw = self.payload_override(signal, now_us)
            if raw is not None:
                return signal.build_frame(raw=raw)
        gen = signal.generator
        if gen == "constant":
            value = float(signal.params.get("value", 0.0))
            return signal.build_frame({f.name: value for f in signal.fields})
        if gen == "counter":
            n = self.counters.get(signal.name, 0)
            self.counters[signal.name] = n + 1
            length = signal.payload_length()
            return signal.build_frame(raw=(n % 0x10000).to_bytes(2, "big")
                                      .rjust(length, b"\x00")[-length:])
        if gen == "noise":
            values = {f.name: self.rng.uniform(f.minimum, f.maximum)
                      for f in signal.fields}
            return signal.build_frame(values)
        if gen == "plant_speed":
            return signal.build_frame({"speed": self.plant.speed_at(now_us)})
        if gen == "plant_engine_speed":
            self.plant.advance_to(now_us)
            return signal.build_frame({"rpm": self.plant.engine_rpm})
        if gen == "plant_throttle":
            self.plant.advance_to(now_us)
            return signal.build_frame({"position": self.plant.throttle * 100.0})
        if gen == "relay":
            field_name = signal.fields[0].name if signal.fields else None
            value = self.relays.get(signal.name, 0.0)
            return signal.build_frame({field_name: value} if field_name else None)
        raise ValueError(f"unknown payload generator {gen!r} for {signal.name}")

    def receive(self, signal: SignalDef, frame: DataFrame, now_us: int) -> None:
        """Ingest a delivered frame this node consumes."""
        # Relay sources mirror a consumed field onto this node's own signal.
        for own in self.entries:
            if own.signal.generator == "relay" and own.signal.params.get("source") == signal.name:
                src_field = signal.field_named(own.signal.params.get("field"))
                value = src_field.decode(frame.payload)
                if value is not None:
                    self.relays[own.signal.name] = value
        if signal.name == "throttle_command":
            value = signal.field_named("throttle").decode(frame.payload)
            if value is not None:
                self.plant.set_throttle(value / 100.0, now_us)


@dataclass
class DriverModel:
    """The human driver as a virtual node closing the dashboard loop."""

    target_speed: float
    reaction_delay_ms: float = 200.0
    gain: float = 0.03
    period_ms: float = 100.0
    perceived_speed_source: str = "speed_display"
    throttle_limit: float = 100.0


class DriverNode:
    """Scripted driver: reads the displayed speed, nudges the throttle.

    The throttle command accumulates the speed error (integral control), so
    with an honest display the perceived speed settles on the target.  The
    driver reacts only to display values older than the reaction delay and
    holds the last perceived value when the display is absent or undecodable.
    """

    def __init__(self, model: DriverModel, display_signal: SignalDef,
                 command_signal: SignalDef, bitrate: int):
        self.model = model
        self.display_signal = display_signal
        self.command_signal = command_signal
        self.bitrate = bitrate
        self.period_ticks = ms_to_ticks_local(model.period_ms, bitrate)
        self.next_due = self.period_ticks
        self.history: list[tuple[int, float]] = []
        self.throttle = 0.0
        self.busoff = False

    def observe_display(self, frame: DataFrame, now_us: int) -> None:
        field_def = self.display_signal.fields[0]
        value = field_def.decode(frame.payload)
        if value is None:
            return  # undecodable: hold the last perceived value
        self.history.append((now_us, value))

    def perceived(self, now_us: int) -> float | None:
        cutoff = now_us - int(self.model.reaction_delay_ms * 1000)
        latest = None
        for ts, value in reversed(self.history):
            if ts <= cutoff:
                latest = value
                break
        return latest

    def next_tick(self) -> int | None:
        return None if self.busoff else self.next_due

    def emit_due(self, tick: int) -> list[DataFrame]:
        if self.busoff or tick != self.next_due:
            return []
        self.next_due = tick + self.period_ticks
        now_us = tick * 1_000_000 // self.bitrate
        value = self.perceived(now_us)
        if value is None:
            return []  # nothing perceived yet: no corrections
        error = self.model.target_speed - value
        dt_s = self.model.period_ms / 1000.0
        self.throttle = max(0.0, min(self.model.throttle_limit,
                                     self.throttle + self.model.gain * error * dt_s))
        return [self.command_signal.build_frame({"throttle": self.throttle})]


def ms_to_ticks_local(ms: float, bitrate: int) -> int:
    return max(1, round(ms * bitrate / 1000))
