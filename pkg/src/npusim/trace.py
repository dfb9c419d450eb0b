"""Execution trace collection and browser-viewable export.

Tracks are named streams of closed [begin, end] duration events, one track
per functional unit or fabric resource.  Within a track events never
overlap; the engine guarantees that by construction and check_tracks
re-verifies it for tests.

emit() writes the common trace-event JSON object format: "X" duration
events on numbered tids with thread_name metadata, cycles in the ts/dur
fields, plus a "summary" object with makespan, per-track busy fractions,
and byte counters.  Serialization is canonical (sorted keys, fixed
separators) so identical runs hash identically.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional

from npusim.errors import SimError


@dataclass(frozen=True)
class TraceEvent:
    track: str
    name: str
    begin: int
    end: int
    args: tuple = ()          # sorted (key, value) pairs

    def __post_init__(self):
        if self.end < self.begin:
            raise SimError(f"event {self.name!r} ends before it begins")


@dataclass
class Trace:
    events: List[TraceEvent] = field(default_factory=list)
    counters: Dict[str, int] = field(default_factory=dict)
    faults: List[str] = field(default_factory=list)
    makespan: int = 0

    def span(self, track: str, name: str, begin: int, end: int,
             **args) -> None:
        self.events.append(TraceEvent(track, name, begin, end,
                                      tuple(sorted(args.items()))))

    def bump(self, counter: str, amount: int = 1) -> None:
        self.counters[counter] = self.counters.get(counter, 0) + amount

    def fault(self, text: str) -> None:
        self.faults.append(text)

    # --- derived views ---

    def tracks(self) -> List[str]:
        seen: Dict[str, None] = {}
        for ev in self.events:
            seen.setdefault(ev.track, None)
        return list(seen)

    def busy(self) -> Dict[str, int]:
        out: Dict[str, int] = {}
        for ev in self.events:
            out[ev.track] = out.get(ev.track, 0) + (ev.end - ev.begin)
        return out

    def check_tracks(self) -> None:
        """Raise if any track has overlapping or mis-ordered events."""
        per: Dict[str, List[TraceEvent]] = {}
        for ev in self.events:
            per.setdefault(ev.track, []).append(ev)
        for track, evs in per.items():
            evs = sorted(evs, key=lambda e: (e.begin, e.end))
            for a, b in zip(evs, evs[1:]):
                if b.begin < a.end:
                    raise SimError(
                        f"track {track}: {a.name!r} [{a.begin},{a.end}) "
                        f"overlaps {b.name!r} [{b.begin},{b.end})")

    def summary(self) -> dict:
        span = max(1, self.makespan)
        return {
            "makespan": self.makespan,
            "events": len(self.events),
            "busy_cycles": dict(sorted(self.busy().items())),
            "busy_fraction": {k: round(v / span, 6)
                              for k, v in sorted(self.busy().items())},
            "counters": dict(sorted(self.counters.items())),
            "faults": list(self.faults),
        }

    # --- export ---

    def to_json(self) -> str:
        tids = {track: i for i, track in enumerate(sorted(self.tracks()))}
        out = []
        for track, tid in sorted(tids.items(), key=lambda kv: kv[1]):
            out.append({"ph": "M", "pid": 0, "tid": tid, "name": "thread_name",
                        "args": {"name": track}})
        for ev in self.events:
            out.append({"ph": "X", "pid": 0, "tid": tids[ev.track],
                        "name": ev.name, "ts": ev.begin,
                        "dur": ev.end - ev.begin,
                        "args": dict(ev.args)})
        doc = {"traceEvents": out, "displayTimeUnit": "ns",
               "summary": self.summary()}
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    def sha256(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def emit(self, path: str) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())
            fh.write("\n")
