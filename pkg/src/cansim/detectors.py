"""Baseline bus-wide intrusion detectors.

Two detectors trained on clean traffic: per-identifier frame counts over
tumbling windows (an alert needs three consecutive anomalous windows), and a
transition matrix of which identifier may directly follow which.  Both look
only at identifiers and timing, never at payload bytes.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

from .codec import FrameId

DEFAULT_TOLERANCE = 2.0
CONSECUTIVE_ANOMALIES_FOR_ALERT = 3


@dataclass(frozen=True)
class DetectorAlert:
    timestamp_us: int
    detector: str
    message: str


@dataclass(frozen=True)
class FrequencyBaseline:
    """Expected per-identifier frame count per tumbling window."""

    window_us: int
    tolerance: float
    expected: dict[FrameId, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.window_us <= 0:
            raise ValueError("window length must be positive")
        if self.tolerance < 1.0:
            raise ValueError("tolerance factor must be >= 1")


def _windows(events, anchor_us: int, window_us: int):
    """Group (timestamp, id) events into complete tumbling windows."""
    if not events:
        return []
    last = events[-1][0]
    n = (last - anchor_us) // window_us
    buckets = [Counter() for _ in range(n)]
    for ts, cid in events:
        k = (ts - anchor_us) // window_us
        if 0 <= k < n:
            buckets[k][cid] += 1
    return buckets


def freq_train(events, window_ms: float, tolerance: float = DEFAULT_TOLERANCE) -> FrequencyBaseline:
    """Learn expected per-id window counts from a clean delivery trace.

    ``events`` is a time-ordered sequence of ``(timestamp_us, FrameId)``.
    Requires at least three complete windows of training traffic.
    """
    window_us = int(window_ms * 1000)
    events = list(events)
    if not events:
        raise ValueError("empty training trace")
    buckets = _windows(events, events[0][0], window_us)
    if len(buckets) < 3:
        raise ValueError("training trace shorter than three windows")
    totals: Counter = Counter()
    for bucket in buckets:
        totals.update(bucket)
    expected = {cid: totals[cid] / len(buckets) for cid in totals}
    return FrequencyBaseline(window_us=window_us, tolerance=tolerance, expected=expected)


def freq_detect(events, baseline: FrequencyBaseline,
                start_us: int | None = None) -> list[DetectorAlert]:
    """Flag sustained per-id over-frequency or unknown identifiers.

    A window is anomalous when any identifier's count exceeds its expected
    count times the tolerance factor, or an identifier absent from training
    appears.  An alert fires on the third consecutive anomalous window and not
    again until the streak is broken.
    """
    events = list(events)
    if not events:
        return []
    anchor = start_us if start_us is not None else events[0][0]
    alerts: list[DetectorAlert] = []
    streak = 0
    for k, bucket in enumerate(_windows(events, anchor, baseline.window_us)):
        anomaly = None
        for cid, count in sorted(bucket.items(), key=lambda kv: (kv[0].extended, kv[0].value)):
            expect = baseline.expected.get(cid)
            if expect is None:
                anomaly = f"unknown id 0x{cid.value:X}"
                break
            if count > expect * baseline.tolerance:
                anomaly = f"id 0x{cid.value:X} count {count} exceeds expected {expect:g}"
                break
        if anomaly is None:
            streak = 0
            continue
        streak += 1
        if streak == CONSECUTIVE_ANOMALIES_FOR_ALERT:
            window_end = anchor + (k + 1) * baseline.window_us
            alerts.append(DetectorAlert(
                timestamp_us=window_end, detector="frequency",
                message=f"{anomaly} in 3 consecutive windows"))
    return alerts


@dataclass(frozen=True)
class TransitionMatrix:
    """Which identifier may directly follow which, per the training trace."""

    transitions: frozenset[tuple[FrameId, FrameId]]
    ids: frozenset[FrameId]


def tm_train(events) -> TransitionMatrix:
    """Build the observed id-transition set from a clean delivery trace."""
    ids = [cid for _, cid in events]
    if not ids:
        raise ValueError("empty training trace")
    pairs = {(a, b) for a, b in zip(ids, ids[1:])}
    return TransitionMatrix(transitions=frozenset(pairs), ids=frozenset(ids))


def tm_detect(events, matrix: TransitionMatrix,
              prev_id: FrameId | None = None) -> list[DetectorAlert]:
    """Flag every consecutive id pair that never occurred in training.

    ``prev_id`` seeds the first transition when detection continues a trace
    whose earlier part was used for training.
    """
    alerts: list[DetectorAlert] = []
    prev = prev_id
    for ts, cid in events:
        if prev is not None and (prev, cid) not in matrix.transitions:
            alerts.append(DetectorAlert(
                timestamp_us=ts, detector="transition",
                message=f"unseen transition 0x{prev.value:X} -> 0x{cid.value:X}"))
        prev = cid
    return alerts
