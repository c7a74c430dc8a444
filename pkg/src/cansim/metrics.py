"""Run metrics: per-node accounting, latencies, counter trajectories, deltas.

Reports serialize to line-delimited JSON records (one logical chunk per line)
and render as a human-readable summary table.  Two reports from the same
scenario family can be diffed with :func:`compare`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

METRICS_SCHEMA = "cansim-metrics/1"


class InternalError(RuntimeError):
    """A simulator invariant failed; maps to exit code 2."""


class SchemaMismatchError(ValueError):
    """Two reports are not comparable."""


@dataclass
class NodeStats:
    name: str
    offered: int = 0
    delivered: int = 0
    blocked: int = 0
    blocked_legit: int = 0
    abandoned: int = 0
    queued_at_end: int = 0
    errors_reported: int = 0
    final_tec: int = 0
    final_rec: int = 0
    final_mode: str = "error-active"


@dataclass
class LatencyStats:
    frame_id: str
    count: int
    p50_us: int
    p95_us: int
    max_us: int


@dataclass
class MetricsReport:
    scenario: str
    seed: int
    duration_ms: float
    bitrate: int
    schema: str = METRICS_SCHEMA
    nodes: list[NodeStats] = field(default_factory=list)
    spoof_success: int = 0
    latencies: list[LatencyStats] = field(default_factory=list)
    counter_trajectories: dict[str, list] = field(default_factory=dict)
    alerts: list[dict] = field(default_factory=list)
    block_reasons: dict[str, int] = field(default_factory=dict)
    deliveries_by_id: dict[str, int] = field(default_factory=dict)

    def check_conservation(self) -> None:
        """Every offered frame must end in exactly one terminal state."""
        for n in self.nodes:
            total = n.delivered + n.blocked + n.queued_at_end + n.abandoned
            if total != n.offered:
                raise InternalError(
                    f"conservation violated for {n.name}: offered {n.offered} != "
                    f"delivered {n.delivered} + blocked {n.blocked} + "
                    f"queued {n.queued_at_end} + abandoned {n.abandoned}")

    def node(self, name: str) -> NodeStats:
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)

    def to_records(self) -> list[dict]:
        records: list[dict] = [{
            "record": "meta", "schema": self.schema, "scenario": self.scenario,
            "seed": self.seed, "duration_ms": self.duration_ms,
            "bitrate": self.bitrate, "spoof_success": self.spoof_success,
        }]
        for n in self.nodes:
            records.append({"record": "node", **n.__dict__})
        for lat in self.latencies:
            records.append({"record": "latency", **lat.__dict__})
        for name, points in sorted(self.counter_trajectories.items()):
            records.append({"record": "counters", "node": name, "points": points})
        for alert in self.alerts:
            records.append({"record": "alert", **alert})
        records.append({"record": "blocks", "reasons": dict(sorted(self.block_reasons.items()))})
        records.append({"record": "deliveries",
                        "by_id": dict(sorted(self.deliveries_by_id.items()))})
        return records

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.to_records())

    @classmethod
    def from_jsonl(cls, text: str) -> "MetricsReport":
        report: MetricsReport | None = None
        for line in text.splitlines():
            if not line.strip():
                continue
            raw = json.loads(line)
            kind = raw.pop("record")
            if kind == "meta":
                report = cls(scenario=raw["scenario"], seed=raw["seed"],
                             duration_ms=raw["duration_ms"], bitrate=raw["bitrate"],
                             schema=raw["schema"])
                report.spoof_success = raw["spoof_success"]
            elif report is None:
                raise ValueError("metrics stream must start with a meta record")
            elif kind == "node":
                report.nodes.append(NodeStats(**raw))
            elif kind == "latency":
                report.latencies.append(LatencyStats(**raw))
            elif kind == "counters":
                report.counter_trajectories[raw["node"]] = raw["points"]
            elif kind == "alert":
                report.alerts.append(raw)
            elif kind == "blocks":
                report.block_reasons = raw["reasons"]
            elif kind == "deliveries":
                report.deliveries_by_id = raw["by_id"]
        if report is None:
            raise ValueError("empty metrics stream")
        return report

    def summary_table(self) -> str:
        lines = [
            f"scenario: {self.scenario}  seed={self.seed}  "
            f"duration={self.duration_ms:g}ms  bitrate={self.bitrate}",
            f"spoof-success deliveries: {self.spoof_success}",
            "",
            f"{'node':<8} {'offered':>8} {'delivered':>10} {'blocked':>8} "
            f"{'abandoned':>10} {'queued':>7} {'errors':>7} {'tec':>4} {'rec':>4} mode",
        ]
        for n in self.nodes:
            lines.append(
                f"{n.name:<8} {n.offered:>8} {n.delivered:>10} {n.blocked:>8} "
                f"{n.abandoned:>10} {n.queued_at_end:>7} {n.errors_reported:>7} "
                f"{n.final_tec:>4} {n.final_rec:>4} {n.final_mode}")
        if self.latencies:
            lines.append("")
            lines.append(f"{'id':<10} {'count':>6} {'p50 us':>8} {'p95 us':>8} {'max us':>8}")
            for lat in self.latencies:
                lines.append(f"{lat.frame_id:<10} {lat.count:>6} {lat.p50_us:>8} "
                             f"{lat.p95_us:>8} {lat.max_us:>8}")
        if self.block_reasons:
            lines.append("")
            lines.append("blocks: " + ", ".join(f"{k}={v}" for k, v in
                                                sorted(self.block_reasons.items())))
        if self.alerts:
            lines.append("")
            lines.append(f"detector alerts: {len(self.alerts)}")
            for a in self.alerts:
                lines.append(f"  [{a['timestamp_us']}us] {a['detector']}: {a['message']}")
        return "\n".join(lines)


def percentile(sorted_values: list[int], q: float) -> int:
    if not sorted_values:
        return 0
    idx = max(0, min(len(sorted_values) - 1,
                     int(q * len(sorted_values) + 0.999999) - 1))
    return sorted_values[idx]


def compare(a: MetricsReport, b: MetricsReport) -> dict:
    """Side-by-side deltas between two runs of the same scenario family.

    The reports must share the metrics schema and node set; otherwise a
    :class:`SchemaMismatchError` is raised.
    """
    if a.schema != b.schema:
        raise SchemaMismatchError(f"schema {a.schema!r} vs {b.schema!r}")
    names_a = {n.name for n in a.nodes}
    names_b = {n.name for n in b.nodes}
    if names_a != names_b:
        raise SchemaMismatchError(
            f"node sets differ: {sorted(names_a)} vs {sorted(names_b)}")
    delta: dict = {
        "scenario_a": a.scenario,
        "scenario_b": b.scenario,
        "spoof_success": {"a": a.spoof_success, "b": b.spoof_success,
                          "delta": b.spoof_success - a.spoof_success},
        "alerts": {"a": len(a.alerts), "b": len(b.alerts),
                   "delta": len(b.alerts) - len(a.alerts)},
        "blocks": {"a": sum(a.block_reasons.values()),
                   "b": sum(b.block_reasons.values()),
                   "delta": sum(b.block_reasons.values()) - sum(a.block_reasons.values())},
        "nodes": {},
        "latency_max_us": {},
    }
    for name in sorted(names_a):
        na, nb = a.node(name), b.node(name)
        delta["nodes"][name] = {
            "delivered": {"a": na.delivered, "b": nb.delivered,
                          "delta": nb.delivered - na.delivered},
            "blocked": {"a": na.blocked, "b": nb.blocked,
                        "delta": nb.blocked - na.blocked},
        }
    lat_a = {l.frame_id: l for l in a.latencies}
    lat_b = {l.frame_id: l for l in b.latencies}
    for fid in sorted(set(lat_a) | set(lat_b)):
        ma = lat_a[fid].max_us if fid in lat_a else None
        mb = lat_b[fid].max_us if fid in lat_b else None
        delta["latency_max_us"][fid] = {
            "a": ma, "b": mb,
            "delta": (mb - ma) if (ma is not None and mb is not None) else None}
    return delta


def render_delta(delta: dict) -> str:
    lines = [f"compare: {delta['scenario_a']}  vs  {delta['scenario_b']}"]
    for key in ("spoof_success", "alerts", "blocks"):
        d = delta[key]
        lines.append(f"{key:<14} a={d['a']:<8} b={d['b']:<8} delta={d['delta']:+d}")
    lines.append("per-node delivered/blocked:")
    for name, nd in delta["nodes"].items():
        lines.append(f"  {name:<8} delivered {nd['delivered']['a']:>6} -> "
                     f"{nd['delivered']['b']:<6} ({nd['delivered']['delta']:+d})   "
                     f"blocked {nd['blocked']['a']:>6} -> {nd['blocked']['b']:<6} "
                     f"({nd['blocked']['delta']:+d})")
    if delta["latency_max_us"]:
        lines.append("max latency (us) per id:")
        for fid, d in delta["latency_max_us"].items():
            lines.append(f"  {fid:<10} a={d['a']} b={d['b']} delta={d['delta']}")
    return "\n".join(lines)
