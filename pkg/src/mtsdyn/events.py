"""Discrete events and their deterministic ordering."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

EVENT_KINDS = ("branch_trip", "tap_step", "oel_limit", "cvr_activate", "custom")

# Tie-break for events due at the same instant.
KIND_PRIORITY = {
    "branch_trip": 0,
    "oel_limit": 1,
    "tap_step": 2,
    "cvr_activate": 3,
    "custom": 4,
}


@dataclass
class Event:
    kind: str
    time: float
    payload: dict[str, Any] = field(default_factory=dict)
    seq: int = 0  # declaration order, assigned by the engine

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {self.kind!r}")

    def sort_key(self) -> tuple[float, int, int]:
        return (self.time, KIND_PRIORITY[self.kind], self.seq)


@dataclass
class JournalEntry:
    time: float
    kind: str
    payload: str

    def as_row(self) -> tuple[str, str, str]:
        return (f"{self.time:.6f}", self.kind, self.payload)


def format_payload(payload: dict[str, Any]) -> str:
    return ";".join(f"{k}={payload[k]}" for k in sorted(payload))
