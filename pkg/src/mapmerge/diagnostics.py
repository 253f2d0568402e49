"""Wall-clock stage timing and the runtime table."""
from __future__ import annotations

import contextvars
import time
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass, field

VOXEL = "voxel"
DESCRIPTOR = "desc"
OPTIM = "optim"
CATEGORIES = (VOXEL, DESCRIPTOR, OPTIM)
COLUMNS = ("Voxel sampl.", "Desc. ext.", "Optim.", "Total")

_current = contextvars.ContextVar("mapmerge_recorder", default=None)


@dataclass
class StageTiming:
    name: str
    wall: float = 0.0
    categories: dict = field(default_factory=lambda: defaultdict(float))
    counts: dict = field(default_factory=lambda: defaultdict(int))


class Recorder:
    """Accumulates per-stage wall time split into voxel/descriptor/optimization.

    Categories nest by pausing the enclosing one, so a stage's category
    times never double count.
    """

    def __init__(self):
        self.stages: dict[str, StageTiming] = {}
        self._stage: StageTiming | None = None
        self._stack: list[list] = []

    @contextmanager
    def stage(self, name: str):
        st = self.stages.setdefault(name, StageTiming(name))
        prev, self._stage = self._stage, st
        token = _current.set(self)
        t0 = time.perf_counter()
        try:
            yield st
        finally:
            st.wall += time.perf_counter() - t0
            self._stage = prev
            _current.reset(token)

    @contextmanager
    def category(self, cat: str):
        st = self._stage
        if st is None:
            yield
            return
        now = time.perf_counter()
        if self._stack:
            outer = self._stack[-1]
            st.categories[outer[0]] += now - outer[1]
        entry = [cat, now]
        self._stack.append(entry)
        try:
            yield
        finally:
            end = time.perf_counter()
            self._stack.pop()
            st.categories[cat] += end - entry[1]
            if self._stack:
                self._stack[-1][1] = end

    def count(self, key: str, n: int = 1):
        if self._stage is not None:
            self._stage.counts[key] += n


@contextmanager
def timed(cat: str):
    """Attribute the enclosed time to ``cat`` in the active recorder, if any."""
    rec = _current.get()
    if rec is None:
        yield
    else:
        with rec.category(cat):
            yield


def count(key: str, n: int = 1):
    rec = _current.get()
    if rec is not None:
        rec.count(key, n)


def report(run: Recorder | None) -> str:
    """Plain-text table, one row per stage plus a total row."""
    header = f"{'Stage':<22}" + "".join(f"{c:>14}" for c in COLUMNS)
    lines = [header, "-" * len(header)]
    if run is None or not run.stages:
        return "\n".join(lines) + "\n"
    totals = defaultdict(float)
    for st in run.stages.values():
        vals = [st.categories.get(c, 0.0) for c in CATEGORIES] + [st.wall]
        for c, v in zip(COLUMNS, vals):
            totals[c] += v
        lines.append(f"{st.name:<22}" + "".join(f"{v:>14.3f}" for v in vals))
    lines.append("-" * len(header))
    lines.append(f"{'Total':<22}" + "".join(f"{totals[c]:>14.3f}" for c in COLUMNS))
    return "\n".join(lines) + "\n"


def counts_text(run: Recorder) -> str:
    out = []
    for st in run.stages.values():
        for k, v in sorted(st.counts.items()):
            out.append(f"{st.name}.{k}={v}")
    return "\n".join(out) + ("\n" if out else "")
