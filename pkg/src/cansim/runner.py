"""Run orchestration: wire a scenario into a bus, drive it, collect metrics.

The run loop interleaves two event sources in tick order: node/attack
emissions (which pass through egress filters into transmit queues) and bus
occupancy cycles.  Detectors run post-hoc over the delivery trace and their
alerts are merged into the trace by timestamp.
"""

from __future__ import annotations

import random

from .attacks import (AttackSpec, BusOffAttack, DisplaySpoofAttack,
                      DosFloodAttack, SpoofAttack)
from .bus import (KIND_DELIVERED, KIND_DETECTOR_ALERT, Bus, TraceRecord,
                  format_trace_line, ms_to_ticks)
from .codec import DataFrame, FrameId
from .detectors import freq_detect, freq_train, tm_detect, tm_train
from .ecus import (DriverNode, EcuNode, EcuSpec, ScheduleEntry, VehiclePlant,
                   load_dictionary, ms_to_ticks_local)
from .icewall import Icewall
from .metrics import (InternalError, LatencyStats, MetricsReport, NodeStats,
                      percentile)
from .scenario import Scenario


def _fnv1a(text: str) -> int:
    h = 0xCBF29CE484222325
    for ch in text.encode():
        h = ((h ^ ch) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


class RunResult:
    def __init__(self, records: list[TraceRecord], metrics: MetricsReport):
        self.records = records
        self.metrics = metrics

    def trace_text(self) -> str:
        return "".join(format_trace_line(r) + "\n" for r in self.records)


def run(scenario: Scenario) -> RunResult:
    """Execute one scenario deterministically."""
    dictionary = load_dictionary()
    bitrate = scenario.bitrate
    horizon = ms_to_ticks(scenario.duration_ms, bitrate)
    bus = Bus(bitrate)
    plant = VehiclePlant(initial_speed=20.0)

    icewall_by_node = {}
    for cfg in scenario.icewalls:
        if cfg.mode == "manual":
            icewall_by_node[cfg.node] = Icewall(
                cfg.rules, error_flag_budget=cfg.error_flag_budget)
        else:
            icewall_by_node[cfg.node] = Icewall(
                None, learn_frames=cfg.learn_frames,
                learn_window_ms=cfg.learn_window_ms,
                error_flag_budget=cfg.error_flag_budget)

    producers: list = []
    nodes: dict[str, EcuNode] = {}
    driver: DriverNode | None = None
    legit_ids: dict[str, set[FrameId]] = {}

    for ncfg in scenario.nodes:
        bus.attach(ncfg.name, icewall_by_node.get(ncfg.name))
        rng = random.Random((scenario.seed * 1_000_003) ^ _fnv1a(ncfg.name))
        if ncfg.driver is not None:
            display = dictionary.signal(ncfg.driver.perceived_speed_source)
            command = dictionary.signal("throttle_command")
            driver = DriverNode(ncfg.driver, display, command, bitrate)
            producers.append((ncfg.name, driver))
            legit_ids[ncfg.name] = {command.frame_id}
            continue
        entries = []
        for scfg in ncfg.schedule:
            sig = dictionary.signal(scfg.signal)
            period = scfg.period_ms if scfg.period_ms is not None else sig.period_ms
            entries.append(ScheduleEntry(
                signal=sig, period_ticks=ms_to_ticks_local(period, bitrate),
                jitter_ticks=ms_to_ticks(scfg.jitter_ms, bitrate)))
        spec = EcuSpec(name=ncfg.name,
                       produces=tuple(s.signal for s in ncfg.schedule),
                       consumes=tuple(dictionary.consumes(ncfg.name)),
                       compromised=ncfg.compromised,
                       safety_critical=dictionary.is_safety_critical(ncfg.name))
        node = EcuNode(spec, entries, plant, rng, bitrate)
        nodes[ncfg.name] = node
        producers.append((ncfg.name, node))
        legit_ids[ncfg.name] = {e.signal.frame_id for e in entries}

    for spec in scenario.attacks:
        attack = _build_attack(spec, bitrate, horizon, dictionary, nodes)
        if isinstance(attack, BusOffAttack):
            bus.frame_start_listeners.append(
                lambda name, frame, stream, t0, a=attack: a.on_frame_start(
                    bus, name, frame, stream, t0))
        elif isinstance(attack, DisplaySpoofAttack):
            pass  # wired into the display node below
        else:
            producers.append((spec.node, attack))

    consumers_of: dict[FrameId, list[str]] = {}
    for sig in dictionary.signals.values():
        consumers_of[sig.frame_id] = list(sig.consumers)

    # Main loop: emissions and bus cycles in tick order.
    while True:
        next_emit = None
        for _, src in producers:
            t = src.next_tick()
            if t is not None and t < horizon and (next_emit is None or t < next_emit):
                next_emit = t
        next_bus = bus.next_activity_tick()
        if next_emit is None and (next_bus is None or next_bus >= horizon):
            break
        if next_emit is not None and (next_bus is None or next_emit <= next_bus):
            for name, src in producers:
                if src.next_tick() == next_emit:
                    if bus.attachments[name].busoff:
                        _silence(src)
                        continue
                    origin = "schedule" if isinstance(src, (EcuNode, DriverNode)) else "attack"
                    for frame in src.emit_due(next_emit):
                        bus.offer(name, frame, next_emit, origin=origin)
            continue
        before = len(bus.records)
        bus.run_cycle(next_bus)
        for rec in bus.records[before:]:
            if rec.kind != KIND_DELIVERED:
                continue
            sig = dictionary.by_id.get(rec.frame.can_id)
            if sig is None:
                continue
            for consumer in consumers_of.get(rec.frame.can_id, ()):
                if consumer in nodes:
                    nodes[consumer].receive(sig, rec.frame, rec.timestamp_us)
                elif driver is not None and consumer == "DRIVER" \
                        and sig.name == driver.display_signal.name:
                    driver.observe_display(rec.frame, rec.timestamp_us)

    records = sorted(bus.records, key=lambda r: (r.timestamp_us, r.seq))
    alerts = _run_detectors(scenario, bus, records)
    for ts_us, detector, message in alerts:
        rec = TraceRecord(timestamp_us=ts_us, kind=KIND_DETECTOR_ALERT,
                          seq=len(records) + len(bus.records),
                          detector=detector, info=message)
        bus.records.append(rec)
        records.append(rec)
    records.sort(key=lambda r: (r.timestamp_us, r.seq))

    metrics = _build_metrics(scenario, bus, records, legit_ids, alerts)
    return RunResult(records, metrics)


def _silence(src) -> None:
    """Stop scheduling a producer whose node has gone bus-off."""
    if isinstance(src, (EcuNode, DriverNode)):
        src.busoff = True
    elif hasattr(src, "next_due"):
        src.next_due = None


def _build_attack(spec: AttackSpec, bitrate: int, horizon: int, dictionary,
                  nodes: dict[str, EcuNode]):
    if spec.kind == "spoof":
        return SpoofAttack(spec, bitrate, horizon)
    if spec.kind == "dos_flood":
        return DosFloodAttack(spec, bitrate, horizon)
    if spec.kind == "busoff":
        return BusOffAttack(spec, bitrate, horizon)
    display = dictionary.signal(spec.target_signal)
    attack = DisplaySpoofAttack(spec, bitrate, horizon, display)
    node = nodes[spec.node]

    def override(signal, now_us, _node=node, _attack=attack):
        honest = _node.relays.get(signal.name, 0.0)
        return _attack.payload_override(signal, now_us, honest)

    node.payload_override = override
    return attack


def _run_detectors(scenario: Scenario, bus: Bus,
                   records: list[TraceRecord]) -> list[tuple[int, str, str]]:
    if not scenario.detectors:
        return []
    deliveries = [(r.timestamp_us, r.frame.can_id)
                  for r in records if r.kind == KIND_DELIVERED]
    alerts: list[tuple[int, str, str]] = []
    for cfg in scenario.detectors:
        train_us = int(cfg.train_ms * 1000)
        training = [e for e in deliveries if e[0] < train_us]
        live = [e for e in deliveries if e[0] >= train_us]
        if cfg.kind == "frequency":
            baseline = freq_train(training, cfg.window_ms, cfg.tolerance)
            found = freq_detect(live, baseline, start_us=train_us)
        else:
            matrix = tm_train(training)
            prev = training[-1][1] if training else None
            found = tm_detect(live, matrix, prev_id=prev)
        alerts.extend((a.timestamp_us, a.detector, a.message) for a in found)
    alerts.sort()
    return alerts


def _build_metrics(scenario: Scenario, bus: Bus, records: list[TraceRecord],
                   legit_ids: dict[str, set[FrameId]],
                   alerts: list[tuple[int, str, str]]) -> MetricsReport:
    report = MetricsReport(scenario=scenario.name, seed=scenario.seed,
                           duration_ms=scenario.duration_ms, bitrate=scenario.bitrate)
    for att in bus.attachments.values():
        report.nodes.append(NodeStats(
            name=att.name, offered=att.offered, delivered=att.delivered,
            blocked=att.blocked, blocked_legit=att.blocked_legit,
            abandoned=att.abandoned, queued_at_end=att.queue_len,
            errors_reported=att.errors_reported,
            final_tec=att.error_state.tec, final_rec=att.error_state.rec,
            final_mode=att.error_state.mode.value))

    spoof = 0
    for rec in records:
        if rec.kind == KIND_DELIVERED:
            fid = str(rec.frame.can_id)
            report.deliveries_by_id[fid] = report.deliveries_by_id.get(fid, 0) + 1
            if rec.node in legit_ids and rec.frame.can_id not in legit_ids[rec.node]:
                spoof += 1
        elif rec.reason is not None:
            report.block_reasons[rec.reason] = report.block_reasons.get(rec.reason, 0) + 1
    report.spoof_success = spoof

    by_id: dict[str, list[int]] = {}
    for _node, frame, offered, delivered in bus.latencies:
        by_id.setdefault(str(frame.can_id), []).append(
            bus.us(delivered) - bus.us(offered))
    for fid in sorted(by_id):
        values = sorted(by_id[fid])
        report.latencies.append(LatencyStats(
            frame_id=fid, count=len(values),
            p50_us=percentile(values, 0.50), p95_us=percentile(values, 0.95),
            max_us=values[-1]))

    trajectories: dict[str, list] = {}
    for ts_us, name, tec, rec_count, mode in bus.counter_log:
        trajectories.setdefault(name, []).append([ts_us, tec, rec_count, mode])
    report.counter_trajectories = trajectories
    report.alerts = [{"timestamp_us": ts, "detector": det, "message": msg}
                     for ts, det, msg in alerts]
    report.check_conservation()
    return report


def write_trace(result: RunResult, path) -> None:
    with open(path, "w") as fh:
        fh.write(result.trace_text())


def write_metrics(result: RunResult, path) -> None:
    with open(path, "w") as fh:
        fh.write(result.metrics.to_jsonl())
