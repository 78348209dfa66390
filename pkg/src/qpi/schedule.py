"""Experiment design: flights of consecutive t values at biexponential bases."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field


def rho(i: int) -> int:
    """Base offset: 0 for i = 0, otherwise 2**(i-1)."""
    if i < 0:
        raise ValueError("i must be nonnegative")
    return 0 if i == 0 else 1 << (i - 1)


@dataclass(frozen=True)
class ScheduleParams:
    l: int
    a_bar: int
    b_bar: int
    flight_len: int | None = None

    def __post_init__(self):
        if min(self.l, self.a_bar, self.b_bar) < 0:
            raise ValueError("l, a_bar, b_bar must be nonnegative")
        if self.flight_len is None:
            object.__setattr__(self, "flight_len", 2 * self.l + 2)
        if self.flight_len < 2 * self.l + 1:
            raise ValueError("flight_len must be at least 2l+1")


@dataclass(frozen=True)
class Flight:
    base: int
    times: tuple


@dataclass(frozen=True)
class Schedule:
    params: ScheduleParams
    bases: tuple
    flights: tuple
    T_set: tuple
    blocks: tuple = field(repr=False)

    @property
    def l(self) -> int:
        return self.params.l

    @property
    def a_bar(self) -> int:
        return self.params.a_bar

    @property
    def b_bar(self) -> int:
        return self.params.b_bar

    @property
    def flight_len(self) -> int:
        return self.params.flight_len

    def header(self) -> dict:
        p = self.params
        return {"l": p.l, "a_bar": p.a_bar, "b_bar": p.b_bar,
                "flight_len": p.flight_len, "bases": list(self.bases)}

    @classmethod
    def from_header(cls, doc: dict) -> "Schedule":
        sched = build_schedule(ScheduleParams(int(doc["l"]), int(doc["a_bar"]),
                                              int(doc["b_bar"]), int(doc["flight_len"])))
        if "bases" in doc and list(doc["bases"]) != list(sched.bases):
            raise ValueError("schedule header bases disagree with its parameters")
        return sched


def build_schedule(params: ScheduleParams) -> Schedule:
    bases = sorted({rho(a) + rho(b)
                    for a in range(params.a_bar + 1)
                    for b in range(params.b_bar + 1)})
    flights = tuple(Flight(base, tuple(range(base, base + params.flight_len)))
                    for base in bases)
    T_set = tuple(sorted({t for f in flights for t in f.times}))
    by_base = {f.base: f for f in flights}
    blocks = tuple(
        tuple(by_base[rho(a) + rho(bp)] for a in range(params.a_bar + 1))
        for bp in range(params.b_bar + 1))
    return Schedule(params, tuple(bases), flights, T_set, blocks)


def hankel_times(schedule: Schedule, shift: int = 0):
    """Yield (a, k1, b, k2, t) for every cell of the Hankel arrangement."""
    l = schedule.l
    for a in range(schedule.a_bar + 1):
        for k1 in range(l + 1):
            for b in range(schedule.b_bar + 1):
                for k2 in range(l + 1):
                    yield a, k1, b, k2, rho(a) + rho(b) + k1 + k2 + shift


def multiplicity(schedule: Schedule, n_init: int, n_meas: int,
                 shift: int = 0) -> dict:
    """Cells occupied by each experiment (i, t, m) across all block matrices.

    Indices i and m are positions in the label lists. ``shift=1`` counts
    cells of the time-shifted arrangement instead.
    """
    per_t = Counter(t for *_, t in hankel_times(schedule, shift))
    return {(i, t, m): c
            for t, c in per_t.items()
            for i in range(n_init)
            for m in range(n_meas)}
