"""
Line-delimited JSON trace files.

Record kinds, one JSON object per line with sorted keys:

    header    run parameters, layout, x0 and caller metadata (always first)
    update    {"tick", "agent", "clamped"}
    deliver   {"tick", "sender", "receiver", "tau"}
    snapshot  {"tick", "views"}: every agent's full copy, written after all
              events of that tick

Floats are written with repr precision so a read trace reproduces the run's
numbers exactly; identical traces serialize to identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, Iterator, List, Union

import numpy as np

from async_blockopt.engine import (
    DelayModel,
    DeliverEvent,
    Event,
    ScheduleConfig,
    Snapshot,
    Trace,
    UpdateEvent,
)
from async_blockopt.errors import MalformedLogError
from async_blockopt.problem import BlockLayout

logger = logging.getLogger(__name__)

TRACE_FORMAT = "async-blockopt-trace"
TRACE_VERSION = 1


def _encode_order(p: float) -> Union[float, str]:
    return "inf" if p == math.inf else p


def _decode_order(p: Union[float, str]) -> float:
    return math.inf if p in ("inf", ".inf", "Infinity") else float(p)


def _dump(record: Dict[str, Any]) -> str:
    return json.dumps(record, sort_keys=True, allow_nan=False, separators=(",", ":"))


def _header(trace: Trace) -> Dict[str, Any]:
    return {
        "kind": "header",
        "format": TRACE_FORMAT,
        "version": TRACE_VERSION,
        "seed": trace.seed,
        "schedule": {
            "p_update": trace.schedule.p_update,
            "p_comm": trace.schedule.p_comm,
            "delay": {"mode": trace.schedule.delay.mode.value, "max_latency": trace.schedule.delay.max_latency},
        },
        "layout": {
            "sizes": list(trace.layout.sizes),
            "orders": [_encode_order(p) for p in trace.layout.orders],
            "weights": list(trace.layout.weights),
        },
        "gamma": trace.gamma,
        "alphas": [float(a) for a in trace.alphas],
        "x0": [float(v) for v in trace.x0],
        "start_tick": trace.start_tick,
        "end_tick": trace.end_tick,
        "stride": trace.stride,
        "clamp_count": trace.clamp_count,
        "metadata": trace.metadata,
    }


def _event_record(event: Event) -> Dict[str, Any]:
    if isinstance(event, UpdateEvent):
        return {"kind": "update", "tick": event.tick, "agent": event.agent, "clamped": event.clamped}
    return {
        "kind": "deliver",
        "tick": event.tick,
        "sender": event.sender,
        "receiver": event.receiver,
        "tau": event.tau,
    }


def iter_trace_lines(trace: Trace) -> Iterator[str]:
    """Serialized records in file order, without trailing newlines."""
    yield _dump(_header(trace))
    events = trace.events
    e = 0
    for snap in trace.snapshots:
        while e < len(events) and events[e].tick <= snap.tick:
            yield _dump(_event_record(events[e]))
            e += 1
        yield _dump({"kind": "snapshot", "tick": snap.tick, "views": snap.views.tolist()})
    while e < len(events):
        yield _dump(_event_record(events[e]))
        e += 1


def dumps_trace(trace: Trace) -> str:
    return "".join(line + "\n" for line in iter_trace_lines(trace))


def trace_digest(trace: Trace) -> str:
    return hashlib.sha256(dumps_trace(trace).encode("utf-8")).hexdigest()


def write_atomic(path: Path, text: str) -> Path:
    """Write through a temporary sibling and rename it into place."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return path


def write_trace(trace: Trace, path: Union[str, Path]) -> Path:
    out = write_atomic(Path(path), dumps_trace(trace))
    logger.info("Saved trace (%d events, %d snapshots) to %s", len(trace.events), len(trace.snapshots), out)
    return out


def _require(record: Dict[str, Any], keys: List[str], lineno: int) -> None:
    missing = [k for k in keys if k not in record]
    if missing:
        raise MalformedLogError(f"Line {lineno}: {record.get('kind')!r} record lacks {missing}")


def loads_trace(text: str) -> Trace:
    """Parse a trace; the returned Trace has no final World attached."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise MalformedLogError("Trace is empty")

    records: List[Dict[str, Any]] = []
    for lineno, line in enumerate(lines, start=1):
        try:
            record = json.loads(line)
        except json.JSONDecodeError as e:
            raise MalformedLogError(f"Line {lineno}: invalid JSON ({e.msg})") from e
        if not isinstance(record, dict) or "kind" not in record:
            raise MalformedLogError(f"Line {lineno}: not a trace record")
        records.append(record)

    header = records[0]
    if header["kind"] != "header" or header.get("format") != TRACE_FORMAT:
        raise MalformedLogError("First record must be a trace header")
    if header.get("version") != TRACE_VERSION:
        raise MalformedLogError(f"Unsupported trace version {header.get('version')!r}")
    _require(
        header,
        ["seed", "schedule", "layout", "gamma", "alphas", "x0", "start_tick", "end_tick", "stride", "clamp_count"],
        1,
    )

    try:
        sched = header["schedule"]
        schedule = ScheduleConfig(
            p_update=float(sched["p_update"]),
            p_comm=float(sched["p_comm"]),
            delay=DelayModel(mode=sched["delay"]["mode"], max_latency=int(sched["delay"]["max_latency"])),
        )
        lay = header["layout"]
        layout = BlockLayout(
            sizes=tuple(lay["sizes"]),
            orders=tuple(_decode_order(p) for p in lay["orders"]),
            weights=tuple(lay["weights"]),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise MalformedLogError(f"Malformed trace header: {e}") from e

    events: List[Event] = []
    snapshots: List[Snapshot] = []
    for lineno, record in enumerate(records[1:], start=2):
        try:
            parsed = _parse_record(record, layout, lineno)
        except MalformedLogError:
            raise
        except (TypeError, ValueError) as e:
            raise MalformedLogError(f"Line {lineno}: {e}") from e
        if isinstance(parsed, Snapshot):
            snapshots.append(parsed)
        else:
            events.append(parsed)

    try:
        x0 = np.array(header["x0"], dtype=float)
        x0.setflags(write=False)
        alphas = np.array(header["alphas"], dtype=float)
        alphas.setflags(write=False)
        return Trace(
            seed=int(header["seed"]),
            schedule=schedule,
            layout=layout,
            gamma=float(header["gamma"]),
            alphas=alphas,
            x0=x0,
            start_tick=int(header["start_tick"]),
            end_tick=int(header["end_tick"]),
            stride=int(header["stride"]),
            snapshots=tuple(snapshots),
            events=tuple(events),
            clamp_count=int(header["clamp_count"]),
            final=None,
            metadata=dict(header.get("metadata") or {}),
        )
    except (TypeError, ValueError) as e:
        raise MalformedLogError(f"Line 1: {e}") from e


def _parse_record(record: Dict[str, Any], layout: BlockLayout, lineno: int) -> Union[Event, Snapshot]:
    kind = record["kind"]
    if kind == "update":
        _require(record, ["tick", "agent", "clamped"], lineno)
        return UpdateEvent(int(record["tick"]), int(record["agent"]), bool(record["clamped"]))
    if kind == "deliver":
        _require(record, ["tick", "sender", "receiver", "tau"], lineno)
        return DeliverEvent(int(record["tick"]), int(record["sender"]), int(record["receiver"]), int(record["tau"]))
    if kind == "snapshot":
        _require(record, ["tick", "views"], lineno)
        views = np.array(record["views"], dtype=float)
        if views.shape != (layout.num_blocks, layout.n):
            raise MalformedLogError(f"Line {lineno}: snapshot has shape {views.shape}")
        views.setflags(write=False)
        return Snapshot(int(record["tick"]), views)
    raise MalformedLogError(f"Line {lineno}: unknown record kind {kind!r}")


def read_trace(path: Union[str, Path]) -> Trace:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"No trace file at {p}")
    try:
        text = p.read_text(encoding="utf-8")
    except UnicodeDecodeError as e:
        raise MalformedLogError(f"{p} is not UTF-8 text: {e.reason}") from e
    return loads_trace(text)
