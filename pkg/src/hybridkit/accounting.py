"""Transient-allocation accounting.

Forward and loss paths report their large working buffers (anything on the
order of tokens x vocab) through `record_alloc`. Tests wrap a region in
`track_allocations()` to assert that memory-bounded paths never materialize
full logit/softmax matrices.
"""

from contextlib import contextmanager
from dataclasses import dataclass, field


@dataclass
class AllocEvent:
    tag: str
    elements: int


@dataclass
class AllocTracker:
    events: list = field(default_factory=list)
    peak_elements: int = 0

    def record(self, tag: str, elements: int) -> None:
        self.events.append(AllocEvent(tag, int(elements)))
        self.peak_elements = max(self.peak_elements, int(elements))

    def largest(self, tag_prefix: str = "") -> int:
        sizes = [e.elements for e in self.events if e.tag.startswith(tag_prefix)]
        return max(sizes, default=0)


_active: list[AllocTracker] = []


def record_alloc(tag: str, elements: int) -> None:
    """Report a transient buffer of `elements` scalars to all active trackers."""
    for tracker in _active:
        tracker.record(tag, elements)


@contextmanager
def track_allocations():
    tracker = AllocTracker()
    _active.append(tracker)
    try:
        yield tracker
    finally:
        _active.remove(tracker)
