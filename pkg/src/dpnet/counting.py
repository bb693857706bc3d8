"""Execution-time multiply-accumulate counter.

Only matmul and conv2d report work; pooling, normalization, activations and
element-wise ops count zero. Counts are attributed to the innermost active
scope label so a single forward can be broken down by branch.
"""

from __future__ import annotations

import contextlib
from collections import defaultdict
from contextvars import ContextVar
from typing import Dict, Iterator, List, Optional

_ACTIVE: ContextVar[Optional["MacCounter"]] = ContextVar("dpnet_mac_counter", default=None)


class MacCounter:
    def __init__(self) -> None:
        self.total = 0
        self.by_scope: Dict[str, int] = defaultdict(int)
        self._stack: List[str] = []

    def add(self, macs: int) -> None:
        self.total += macs
        self.by_scope["/".join(self._stack)] += macs

    def scoped(self, prefix: str) -> int:
        """Sum of MACs recorded under scope paths containing ``prefix`` as a segment."""
        total = 0
        for path, n in self.by_scope.items():
            if prefix in path.split("/"):
                total += n
        return total


@contextlib.contextmanager
def counting() -> Iterator[MacCounter]:
    counter = MacCounter()
    token = _ACTIVE.set(counter)
    try:
        yield counter
    finally:
        _ACTIVE.reset(token)


@contextlib.contextmanager
def scope(label: str) -> Iterator[None]:
    counter = _ACTIVE.get()
    if counter is None:
        yield
        return
    counter._stack.append(label)
    try:
        yield
    finally:
        counter._stack.pop()


def record(macs: int) -> None:
    counter = _ACTIVE.get()
    if counter is not None:
        counter.add(int(macs))
