"""Scenario files: declarative runs of nodes, schedules, attacks and defenses.

Scenarios are YAML documents with a versioned schema.  Loading validates every
cross-reference against the shipped signal dictionary and adjacency dataset
and reports all violations at once with their field locations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .attacks import ATTACK_KINDS, AttackSpec
from .codec import FrameId
from .ecus import DriverModel, SignalDictionary, load_dictionary
from .icewall import FilterRuleSet, PayloadPredicate

SCENARIO_SCHEMA = "cansim-scenario/1"
RULES_SCHEMA = "cansim-icewall-rules/1"

DEFAULT_BITRATE = 500_000
DEFAULT_DURATION_MS = 1000.0
DEFAULT_SEED = 0


class ConfigError(Exception):
    """Scenario validation failure; carries one message per violation."""

    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("; ".join(problems))


class _UniqueKeyLoader(yaml.SafeLoader):
    """SafeLoader that rejects duplicate mapping keys instead of keeping the last."""


def _check_unique(loader, node, deep=False):
    seen = set()
    for key_node, _ in node.value:
        key = loader.construct_object(key_node, deep=deep)
        if key in seen:
            raise yaml.YAMLError(
                f"duplicate key {key!r} at line {key_node.start_mark.line + 1}")
        seen.add(key)
    return loader.construct_mapping(node, deep)


_UniqueKeyLoader.add_constructor(
    yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _check_unique)


@dataclass
class ScheduleConfig:
    signal: str
    period_ms: float | None = None
    jitter_ms: float = 0.0


@dataclass
class NodeConfig:
    name: str
    schedule: list[ScheduleConfig] = field(default_factory=list)
    compromised: bool = False
    driver: DriverModel | None = None


@dataclass
class IcewallConfig:
    node: str
    mode: str  # "manual" | "learning"
    rules: FilterRuleSet | None = None
    learn_frames: int = 200
    learn_window_ms: float = 2000.0
    error_flag_budget: int = 16


@dataclass
class DetectorConfig:
    kind: str  # "frequency" | "transition"
    train_ms: float = 1000.0
    window_ms: float = 100.0
    tolerance: float = 2.0


@dataclass
class Scenario:
    name: str
    seed: int
    duration_ms: float
    bitrate: int
    nodes: list[NodeConfig]
    attacks: list[AttackSpec] = field(default_factory=list)
    icewalls: list[IcewallConfig] = field(default_factory=list)
    detectors: list[DetectorConfig] = field(default_factory=list)


def _parse_frame_id(value, where: str, problems: list[str]) -> FrameId | None:
    try:
        if isinstance(value, str):
            value = int(value, 16)
        extended = value > 0x7FF
        return FrameId(int(value), extended=extended)
    except (TypeError, ValueError) as exc:
        problems.append(f"{where}: bad identifier ({exc})")
        return None


def _build_rules(doc: dict, dictionary: SignalDictionary, where: str,
                 problems: list[str]) -> FilterRuleSet:
    allowed: set[FrameId] = set()
    for name in doc.get("allowed_signals", []) or []:
        if name not in dictionary.signals:
            problems.append(f"{where}.allowed_signals: unknown signal {name!r}")
            continue
        allowed.add(dictionary.signal(name).frame_id)
    for raw in doc.get("allowed_ids", []) or []:
        cid = _parse_frame_id(raw, f"{where}.allowed_ids", problems)
        if cid is not None:
            allowed.add(cid)
    gaps: dict[FrameId, float] = {}
    for key, gap in (doc.get("min_gap_ms") or {}).items():
        if key in dictionary.signals:
            gaps[dictionary.signal(key).frame_id] = float(gap)
        else:
            cid = _parse_frame_id(key, f"{where}.min_gap_ms", problems)
            if cid is not None:
                gaps[cid] = float(gap)
    predicates: dict[FrameId, list[PayloadPredicate]] = {}
    for i, lim in enumerate(doc.get("payload_limits", []) or []):
        loc = f"{where}.payload_limits[{i}]"
        sig_name = lim.get("signal")
        if sig_name not in dictionary.signals:
            problems.append(f"{loc}: unknown signal {sig_name!r}")
            continue
        sig = dictionary.signal(sig_name)
        try:
            fdef = sig.field_named(lim.get("field"))
        except KeyError as exc:
            problems.append(f"{loc}: {exc.args[0]}")
            continue
        pred = PayloadPredicate(
            field_name=fdef.name, byte_offset=fdef.offset, scale=fdef.scale,
            minimum=lim.get("min"), maximum=lim.get("max"),
            max_abs_delta_per_second=lim.get("max_delta_per_s"))
        predicates.setdefault(sig.frame_id, []).append(pred)
    return FilterRuleSet(allowed_ids=allowed, min_gap_ms=gaps,
                         payload_predicates=predicates)


def load_rules_file(path: str | Path, dictionary: SignalDictionary | None = None) -> FilterRuleSet:
    """Load a standalone manual icewall rule document."""
    dictionary = dictionary or load_dictionary()
    doc = yaml.load(Path(path).read_text(), Loader=_UniqueKeyLoader)
    problems: list[str] = []
    if not isinstance(doc, dict) or doc.get("schema") != RULES_SCHEMA:
        raise ConfigError([f"{path}: expected schema {RULES_SCHEMA!r}"])
    rules = _build_rules(doc, dictionary, str(path), problems)
    if problems:
        raise ConfigError(problems)
    return rules


def load_scenario(path: str | Path) -> Scenario:
    """Load and fully validate a scenario file.

    Raises :class:`ConfigError` listing every violation with its location.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError([f"{path}: no such file"])
    try:
        doc = yaml.load(path.read_text(), Loader=_UniqueKeyLoader)
    except yaml.YAMLError as exc:
        raise ConfigError([f"{path}: {exc}"]) from exc
    if not isinstance(doc, dict):
        raise ConfigError([f"{path}: scenario must be a mapping"])

    problems: list[str] = []
    dictionary = load_dictionary()

    if doc.get("schema") != SCENARIO_SCHEMA:
        problems.append(f"schema: expected {SCENARIO_SCHEMA!r}, got {doc.get('schema')!r}")

    name = str(doc.get("name", path.stem))
    seed = doc.get("seed", DEFAULT_SEED)
    if not isinstance(seed, int):
        problems.append("seed: must be an integer")
        seed = DEFAULT_SEED
    duration_ms = float(doc.get("duration_ms", DEFAULT_DURATION_MS))
    if duration_ms <= 0:
        problems.append("duration_ms: must be positive")
    bitrate = int((doc.get("bus") or {}).get("bitrate", DEFAULT_BITRATE))
    if not 0 < bitrate <= 1_000_000:
        problems.append("bus.bitrate: must be in (0, 1000000]")

    nodes: list[NodeConfig] = []
    names: set[str] = set()
    for i, raw in enumerate(doc.get("nodes", []) or []):
        loc = f"nodes[{i}]"
        node_name = raw.get("name")
        if not node_name:
            problems.append(f"{loc}: missing name")
            continue
        if node_name in names:
            problems.append(f"{loc}: duplicate node {node_name!r}")
            continue
        names.add(node_name)
        schedule = []
        for j, entry in enumerate(raw.get("schedule", []) or []):
            eloc = f"{loc}.schedule[{j}]"
            sig_name = entry.get("signal")
            if sig_name not in dictionary.signals:
                problems.append(f"{eloc}: unknown signal {sig_name!r}")
                continue
            sig = dictionary.signal(sig_name)
            if sig.producer != node_name:
                problems.append(
                    f"{eloc}: {node_name} does not produce {sig_name} "
                    f"(adjacency dataset names {sig.producer})")
                continue
            period = entry.get("period_ms")
            if period is not None and float(period) <= 0:
                problems.append(f"{eloc}: period_ms must be positive")
                continue
            schedule.append(ScheduleConfig(signal=sig_name,
                                           period_ms=None if period is None else float(period),
                                           jitter_ms=float(entry.get("jitter_ms", 0.0))))
        driver = None
        if "driver" in raw:
            draw = raw["driver"] or {}
            if node_name != "DRIVER":
                problems.append(f"{loc}: driver behavior requires the virtual "
                                f"node name DRIVER, got {node_name!r}")
            driver = DriverModel(
                target_speed=float(draw.get("target_speed", 30.0)),
                reaction_delay_ms=float(draw.get("reaction_delay_ms", 200.0)),
                gain=float(draw.get("gain", 0.03)),
                period_ms=float(draw.get("period_ms", 100.0)),
                perceived_speed_source=draw.get("display_signal", "speed_display"))
            if driver.perceived_speed_source not in dictionary.signals:
                problems.append(f"{loc}.driver: unknown display signal "
                                f"{driver.perceived_speed_source!r}")
        nodes.append(NodeConfig(name=node_name, schedule=schedule,
                                compromised=bool(raw.get("compromised", False)),
                                driver=driver))
    if not nodes:
        problems.append("nodes: at least one node required")
    node_by_name = {n.name: n for n in nodes}

    attacks: list[AttackSpec] = []
    for i, raw in enumerate(doc.get("attacks", []) or []):
        loc = f"attacks[{i}]"
        kind = raw.get("kind")
        if kind not in ATTACK_KINDS:
            problems.append(f"{loc}.kind: unknown attack kind {kind!r}")
            continue
        attacker = raw.get("node")
        if attacker not in node_by_name:
            problems.append(f"{loc}.node: undefined node {attacker!r}")
            continue
        if not node_by_name[attacker].compromised:
            problems.append(f"{loc}: node {attacker!r} is not flagged compromised")
        if dictionary.is_safety_critical(attacker):
            problems.append(f"{loc}: {attacker} is safety-critical; the attacker "
                            "model forbids compromising it")
        start_ms = float(raw.get("start_ms", 0.0))
        stop_ms = raw.get("stop_ms")
        stop_ms = float(stop_ms) if stop_ms is not None else None
        if start_ms < 0 or start_ms > duration_ms:
            problems.append(f"{loc}.start_ms: outside run duration")
        if stop_ms is not None and (stop_ms <= start_ms or stop_ms > duration_ms):
            problems.append(f"{loc}.stop_ms: must lie in (start_ms, duration_ms]")

        spec = AttackSpec(kind=kind, node=attacker, start_ms=start_ms, stop_ms=stop_ms)
        if kind in ("spoof", "dos_flood"):
            if "target_signal" in raw:
                sig_name = raw["target_signal"]
                if sig_name not in dictionary.signals:
                    problems.append(f"{loc}.target_signal: unknown signal {sig_name!r}")
                    continue
                spec.target_id = dictionary.signal(sig_name).frame_id
            elif "target_id" in raw:
                spec.target_id = _parse_frame_id(raw["target_id"], f"{loc}.target_id",
                                                 problems)
            elif kind == "spoof":
                problems.append(f"{loc}: spoof needs target_signal or target_id")
            spec.period_ms = float(raw.get("period_ms", 10.0))
            payload_hex = raw.get("payload_hex", "")
            try:
                spec.payload = bytes.fromhex(payload_hex) if payload_hex else b"\x00\x00"
            except ValueError:
                problems.append(f"{loc}.payload_hex: invalid hex")
            if len(spec.payload) > 8:
                problems.append(f"{loc}.payload_hex: payload longer than 8 bytes")
        elif kind == "busoff":
            victim = raw.get("victim")
            if victim not in node_by_name:
                problems.append(f"{loc}.victim: undefined node {victim!r}")
                continue
            spec.victim = victim
            sig_name = raw.get("victim_signal")
            if sig_name not in dictionary.signals:
                problems.append(f"{loc}.victim_signal: unknown signal {sig_name!r}")
                continue
            sig = dictionary.signal(sig_name)
            if sig.producer != victim:
                problems.append(f"{loc}.victim_signal: {victim} does not produce {sig_name}")
            if not any(s.signal == sig_name for s in node_by_name[victim].schedule):
                problems.append(f"{loc}.victim_signal: {victim} does not schedule {sig_name}")
            spec.victim_id = sig.frame_id
            spec.max_errors = raw.get("max_errors")
        elif kind == "display_spoof":
            sig_name = raw.get("target_signal", "speed_display")
            if sig_name not in dictionary.signals:
                problems.append(f"{loc}.target_signal: unknown signal {sig_name!r}")
                continue
            sig = dictionary.signal(sig_name)
            if sig.producer != attacker:
                problems.append(f"{loc}: display spoof must run on the display "
                                f"producer {sig.producer}")
            if not any(s.signal == sig_name for s in node_by_name[attacker].schedule):
                problems.append(f"{loc}: {attacker} does not schedule {sig_name}")
            spec.target_signal = sig_name
            if "false_value" in raw:
                spec.false_value = float(raw["false_value"])
            else:
                spec.false_offset = float(raw.get("false_offset", -20.0))
        attacks.append(spec)

    defenses = doc.get("defenses") or {}
    icewalls: list[IcewallConfig] = []
    guarded: set[str] = set()
    for i, raw in enumerate(defenses.get("icewalls", []) or []):
        loc = f"defenses.icewalls[{i}]"
        node_name = raw.get("node")
        if node_name not in node_by_name:
            problems.append(f"{loc}.node: undefined node {node_name!r}")
            continue
        if node_name in guarded:
            problems.append(f"{loc}: node {node_name!r} already has an icewall")
            continue
        guarded.add(node_name)
        mode = raw.get("mode", "manual")
        if mode not in ("manual", "learning"):
            problems.append(f"{loc}.mode: expected manual or learning")
            continue
        cfg = IcewallConfig(node=node_name, mode=mode,
                            error_flag_budget=int(raw.get("error_flag_budget", 16)))
        if mode == "manual":
            if "rules_file" in raw:
                rules_path = (path.parent / raw["rules_file"]).resolve()
                try:
                    cfg.rules = load_rules_file(rules_path, dictionary)
                except ConfigError as exc:
                    problems.extend(f"{loc}.rules_file: {p}" for p in exc.problems)
                    continue
            else:
                cfg.rules = _build_rules(raw, dictionary, loc, problems)
        else:
            cfg.learn_frames = int(raw.get("learn_frames", 200))
            cfg.learn_window_ms = float(raw.get("learn_window_ms", 2000.0))
            if cfg.learn_frames <= 0:
                problems.append(f"{loc}.learn_frames: must be positive")
        icewalls.append(cfg)

    detectors: list[DetectorConfig] = []
    for i, raw in enumerate(defenses.get("detectors", []) or []):
        loc = f"defenses.detectors[{i}]"
        kind = raw.get("kind")
        if kind not in ("frequency", "transition"):
            problems.append(f"{loc}.kind: expected frequency or transition")
            continue
        cfg = DetectorConfig(kind=kind,
                             train_ms=float(raw.get("train_ms", 1000.0)),
                             window_ms=float(raw.get("window_ms", 100.0)),
                             tolerance=float(raw.get("tolerance", 2.0)))
        if cfg.train_ms <= 0 or cfg.train_ms >= duration_ms:
            problems.append(f"{loc}.train_ms: must lie inside the run duration")
        detectors.append(cfg)

    if problems:
        raise ConfigError([f"{path.name}: {p}" for p in problems])
    return Scenario(name=name, seed=seed, duration_ms=duration_ms, bitrate=bitrate,
                    nodes=nodes, attacks=attacks, icewalls=icewalls,
                    detectors=detectors)
