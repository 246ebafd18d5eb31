"""Logical-byte accounting of tensor lifetimes, by category, with high-water marks.

Bytes are ``element_count * element_size``; allocator slack, page effects and
short-lived kernel workspaces (padded copies, concatenated row windows) are
not modelled, so real process RSS is always somewhat higher.
"""

from __future__ import annotations

import csv
import threading
from dataclasses import dataclass, field
from enum import Enum

from .errors import CorruptStateError, InvalidArgumentError


class Category(str, Enum):
    FEATURE_MAP = "FeatureMap"
    SHARE_CACHE = "ShareCache"
    OVERLAP_REPLICA = "OverlapReplica"
    CHECKPOINT = "Checkpoint"
    PARAMS = "Params"
    GRADS = "Grads"
    OTHER = "Other"


#: categories holding feature-map data (the quantity the planner predicts)
ACTIVATION_CATEGORIES = (Category.FEATURE_MAP, Category.SHARE_CACHE,
                         Category.OVERLAP_REPLICA, Category.CHECKPOINT)


@dataclass(frozen=True)
class Event:
    ordinal: int
    op: str  # "alloc" | "free"
    nbytes: int
    category: Category


@dataclass
class MeterReport:
    current: dict
    peak: dict
    global_peak: int
    events: list = field(repr=False)

    def combined_peak(self, categories) -> int:
        """High-water mark of the summed live bytes of ``categories``."""
        cats = set(categories)
        live = best = 0
        for ev in self.events:
            if ev.category in cats:
                live += ev.nbytes if ev.op == "alloc" else -ev.nbytes
                best = max(best, live)
        return best


class MemoryMeter:
    def __init__(self, element_size: int = 8):
        self.element_size = element_size
        self._lock = threading.Lock()
        self._live: dict[int, tuple[int, Category]] = {}
        self._next = 0
        self._ordinal = 0
        self.current = {c: 0 for c in Category}
        self.peak = {c: 0 for c in Category}
        self.global_current = 0
        self.global_peak = 0
        self.events: list[Event] = []

    def track_alloc(self, nbytes: int, category: Category) -> int:
        if nbytes < 0:
            raise InvalidArgumentError("negative allocation size")
        category = Category(category)
        with self._lock:
            handle = self._next
            self._next += 1
            self._live[handle] = (nbytes, category)
            self.current[category] += nbytes
            self.peak[category] = max(self.peak[category], self.current[category])
            self.global_current += nbytes
            self.global_peak = max(self.global_peak, self.global_current)
            self.events.append(Event(self._ordinal, "alloc", nbytes, category))
            self._ordinal += 1
        return handle

    def track_free(self, handle: int) -> None:
        with self._lock:
            try:
                nbytes, category = self._live.pop(handle)
            except KeyError:
                raise CorruptStateError(f"free of unknown or already freed handle {handle}") from None
            self.current[category] -= nbytes
            self.global_current -= nbytes
            self.events.append(Event(self._ordinal, "free", nbytes, category))
            self._ordinal += 1

    def alloc_array(self, array, category: Category) -> int:
        return self.track_alloc(array.size * self.element_size, category)

    def alloc_elements(self, count: int, category: Category) -> int:
        return self.track_alloc(count * self.element_size, category)

    def live_handles(self) -> int:
        return len(self._live)

    def snapshot(self) -> MeterReport:
        with self._lock:
            return MeterReport(dict(self.current), dict(self.peak), self.global_peak, list(self.events))

    def export_events(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["ordinal", "op", "bytes", "category"])
            for ev in self.snapshot().events:
                writer.writerow([ev.ordinal, ev.op, ev.nbytes, ev.category.value])
