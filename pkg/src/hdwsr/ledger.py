"""Multiply-count accumulator for sparse attention kernels.

A ledger is activated for the current context with ``with ledger:``;
kernels call :func:`record` and silently do nothing when no ledger is
active. Context variables keep ledgers per thread, and :meth:`merge`
reduces them afterwards.
"""
from __future__ import annotations

import contextvars
from collections import defaultdict

_ACTIVE: contextvars.ContextVar["FlopLedger | None"] = contextvars.ContextVar(
    "hdwsr_flop_ledger", default=None
)


class FlopLedger:
    def __init__(self) -> None:
        self.counts: dict[str, int] = defaultdict(int)
        self._tokens: list[contextvars.Token] = []

    def add(self, name: str, count: int) -> None:
        self.counts[name] += int(count)

    def merge(self, other: "FlopLedger") -> None:
        for name, count in other.counts.items():
            self.counts[name] += count

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def __bool__(self) -> bool:
        return bool(self.counts)

    def __enter__(self) -> "FlopLedger":
        self._tokens.append(_ACTIVE.set(self))
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.reset(self._tokens.pop())


def record(name: str, count) -> None:
    ledger = _ACTIVE.get()
    if ledger is not None:
        ledger.add(name, int(count))
