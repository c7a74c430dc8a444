"""Egress packet filter placed between one ECU and the bus.

An icewall blocks outgoing frames that violate its policy (unknown identifier,
rate budget, payload sanity) and passes every incoming frame untouched.  It
can be configured manually or learn its identifier/rate policy from the first
frames it observes.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from enum import Enum

from .codec import DataFrame, FrameId


class BlockReason(Enum):
    UNKNOWN_ID = "unknown-id"
    RATE_EXCEEDED = "rate-exceeded"
    ABNORMAL_READING = "abnormal-reading"
    ERROR_FLOOD = "error-flood"


@dataclass(frozen=True)
class Verdict:
    allowed: bool
    reason: BlockReason | None = None

    def __bool__(self):
        return self.allowed


ALLOW = Verdict(True)


def block(reason: BlockReason) -> Verdict:
    return Verdict(False, reason)


@dataclass(frozen=True)
class PayloadPredicate:
    """Range and slew-rate bounds on one big-endian 16-bit payload field."""

    field_name: str
    byte_offset: int
    scale: float = 1.0
    minimum: float | None = None
    maximum: float | None = None
    max_abs_delta_per_second: float | None = None

    def extract(self, payload: bytes) -> float | None:
        end = self.byte_offset + 2
        if len(payload) < end:
            return None
        raw = int.from_bytes(payload[self.byte_offset:end], "big")
        return raw * self.scale


@dataclass
class FilterRuleSet:
    """Egress policy: permitted identifiers, per-id rate budgets, payload bounds."""

    allowed_ids: set[FrameId] = field(default_factory=set)
    min_gap_ms: dict[FrameId, float] = field(default_factory=dict)
    payload_predicates: dict[FrameId, list[PayloadPredicate]] = field(default_factory=dict)
    unknown_id_verdict: str = "block"

    def __post_init__(self):
        for gap in self.min_gap_ms.values():
            if gap < 0:
                raise ValueError("minimum inter-frame gap must be >= 0")
        for preds in self.payload_predicates.values():
            for p in preds:
                if p.minimum is not None and p.maximum is not None and p.minimum > p.maximum:
                    raise ValueError(f"predicate {p.field_name}: min > max")


class IcewallMode(Enum):
    MANUAL = "manual"
    LEARNING = "learning"
    ENFORCING = "enforcing"


class IcewallError(Exception):
    pass


class Icewall:
    """One egress filter instance, owned by exactly one bus attachment."""

    def __init__(self, rules: FilterRuleSet | None = None, *,
                 learn_frames: int = 200, learn_window_ms: float = 2000.0,
                 gap_slack: float = 0.5, error_flag_budget: int = 16,
                 error_flag_window_ms: float = 1000.0):
        if error_flag_budget < 0:
            raise ValueError("error flag budget must be >= 0")
        self.manual = rules is not None
        self.rules = rules
        self.mode = IcewallMode.MANUAL if self.manual else IcewallMode.LEARNING
        self.learn_frames = learn_frames
        self.learn_window_ms = learn_window_ms
        self.gap_slack = gap_slack
        self.error_flag_budget = error_flag_budget
        self.error_flag_window_ms = error_flag_window_ms
        self._frames_remaining = learn_frames
        self._learn_deadline_us: int | None = None
        self._observed_ids: set[FrameId] = set()
        self._learn_last_us: dict[FrameId, int] = {}
        self._learn_min_gap_us: dict[FrameId, int] = {}
        self._last_emit_us: dict[FrameId, int] = {}
        self._last_field: dict[tuple[FrameId, str], tuple[int, float]] = {}
        self._flag_times: deque[int] = deque()

    @property
    def frames_remaining(self) -> int:
        return self._frames_remaining

    def filter_ingress(self, frame: DataFrame) -> Verdict:
        """All incoming traffic passes; the filter is egress-only."""
        return ALLOW

    def filter_egress(self, frame: DataFrame, now_us: int) -> Verdict:
        if self.mode is IcewallMode.LEARNING:
            if self._learn_deadline_us is not None and now_us >= self._learn_deadline_us:
                self._finalize_learning()
            else:
                self.learn_observe(frame, now_us)
                return ALLOW
        rules = self.rules
        assert rules is not None
        cid = frame.can_id
        if cid not in rules.allowed_ids and rules.unknown_id_verdict != "allow":
            return block(BlockReason.UNKNOWN_ID)
        gap_ms = rules.min_gap_ms.get(cid)
        last = self._last_emit_us.get(cid)
        if gap_ms and last is not None and (now_us - last) < gap_ms * 1000:
            return block(BlockReason.RATE_EXCEEDED)
        for pred in rules.payload_predicates.get(cid, ()):
            if not self._payload_ok(cid, pred, frame.payload, now_us):
                return block(BlockReason.ABNORMAL_READING)
        self._last_emit_us[cid] = now_us
        for pred in rules.payload_predicates.get(cid, ()):
            value = pred.extract(frame.payload)
            if value is not None:
                self._last_field[(cid, pred.field_name)] = (now_us, value)
        return ALLOW

    def _payload_ok(self, cid: FrameId, pred: PayloadPredicate,
                    payload: bytes, now_us: int) -> bool:
        value = pred.extract(payload)
        if value is None:
            return False
        if pred.minimum is not None and value < pred.minimum:
            return False
        if pred.maximum is not None and value > pred.maximum:
            return False
        if pred.max_abs_delta_per_second is not None:
            prev = self._last_field.get((cid, pred.field_name))
            if prev is not None:
                prev_us, prev_value = prev
                dt_s = (now_us - prev_us) / 1e6
                if dt_s <= 0:
                    return value == prev_value
                if abs(value - prev_value) / dt_s > pred.max_abs_delta_per_second:
                    return False
        return True

    def filter_error_flag(self, now_us: int) -> Verdict:
        """Cap active error flags to the configured budget per rolling window."""
        window_us = int(self.error_flag_window_ms * 1000)
        while self._flag_times and now_us - self._flag_times[0] >= window_us:
            self._flag_times.popleft()
        if len(self._flag_times) >= self.error_flag_budget:
            return block(BlockReason.ERROR_FLOOD)
        self._flag_times.append(now_us)
        return ALLOW

    def learn_observe(self, frame: DataFrame, now_us: int) -> None:
        """Record one egress frame during the learning window."""
        if self.mode is not IcewallMode.LEARNING:
            raise IcewallError("not in learning mode")
        if self._learn_deadline_us is None:
            self._learn_deadline_us = now_us + int(self.learn_window_ms * 1000)
        cid = frame.can_id
        self._observed_ids.add(cid)
        last = self._learn_last_us.get(cid)
        if last is not None:
            gap = now_us - last
            best = self._learn_min_gap_us.get(cid)
            if best is None or gap < best:
                self._learn_min_gap_us[cid] = gap
        self._learn_last_us[cid] = now_us
        self._frames_remaining -= 1
        if self._frames_remaining <= 0:
            self._finalize_learning()

    def _finalize_learning(self) -> None:
        gaps = {cid: (us / 1000.0) * self.gap_slack
                for cid, us in self._learn_min_gap_us.items()}
        self.rules = FilterRuleSet(allowed_ids=set(self._observed_ids), min_gap_ms=gaps)
        self.mode = IcewallMode.ENFORCING

    def reset(self) -> None:
        """Flush learned rules and restart the learning window."""
        if self.manual:
            raise IcewallError("manual rules are preprogrammed; no field reset")
        self.mode = IcewallMode.LEARNING
        self.rules = None
        self._frames_remaining = self.learn_frames
        self._learn_deadline_us = None
        self._observed_ids = set()
        self._learn_last_us = {}
        self._learn_min_gap_us = {}
        self._last_emit_us = {}
        self._last_field = {}
