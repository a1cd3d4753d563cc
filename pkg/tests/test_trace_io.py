import json
import math

import numpy as np
import pytest

from async_blockopt.certify import check_theorem3, certify_trace_file
from async_blockopt.engine import DelayModel, ScheduleConfig, run
from async_blockopt.errors import MalformedLogError
from async_blockopt.netflow import paper_instance
from async_blockopt.schemas import ExperimentConfig
from async_blockopt.trace_io import (
    TRACE_FORMAT,
    dumps_trace,
    iter_trace_lines,
    loads_trace,
    read_trace,
    trace_digest,
    write_atomic,
    write_trace,
)


def a2_trace(seed=42, ticks=400, stride=50, schedule=None):
    config = ExperimentConfig.from_dict({"instance": {"kind": "paper", "regularization": "A2"}, "seed": seed})
    world = paper_instance("A2", seed, schedule=schedule)
    return run(world, ticks, stride=stride, metadata={"config": config.to_dict()})


class TestSerialization:
    def test_header_comes_first(self):
        lines = list(iter_trace_lines(a2_trace(ticks=20, stride=10)))
        header = json.loads(lines[0])
        assert header["kind"] == "header"
        assert header["format"] == TRACE_FORMAT
        assert header["layout"]["orders"][0] == "inf"
        assert header["metadata"]["config"]["seed"] == 42

    def test_snapshots_follow_their_tick_events(self):
        records = [json.loads(line) for line in iter_trace_lines(a2_trace(ticks=60, stride=20))]
        last_snapshot = -1
        for record in records[1:]:
            if record["kind"] == "snapshot":
                last_snapshot = record["tick"]
            else:
                assert record["tick"] > last_snapshot

    def test_round_trip_keeps_every_number(self):
        trace = a2_trace(schedule=ScheduleConfig(0.1, 0.1, DelayModel.queued(3)))
        back = loads_trace(dumps_trace(trace))
        assert back.events == trace.events
        np.testing.assert_array_equal(back.snapshot_views(), trace.snapshot_views())
        np.testing.assert_array_equal(back.alphas, trace.alphas)
        assert back.gamma == trace.gamma
        assert back.layout == trace.layout
        assert back.schedule == trace.schedule
        assert back.layout.orders[0] == math.inf
        assert back.final is None
        assert dumps_trace(back) == dumps_trace(trace)

    def test_identical_runs_write_identical_bytes(self, tmp_path):
        a = write_trace(a2_trace(seed=5), tmp_path / "a" / "trace.jsonl")
        b = write_trace(a2_trace(seed=5), tmp_path / "b" / "trace.jsonl")
        assert a.read_bytes() == b.read_bytes()
        assert trace_digest(a2_trace(seed=5)) != trace_digest(a2_trace(seed=6))

    def test_atomic_write_leaves_no_temporaries(self, tmp_path):
        target = tmp_path / "nested" / "out.csv"
        write_atomic(target, "a,b\n")
        write_atomic(target, "c,d\n")
        assert target.read_text(encoding="utf-8") == "c,d\n"
        assert [p.name for p in target.parent.iterdir()] == ["out.csv"]


class TestMalformedTraces:
    def test_empty(self):
        with pytest.raises(MalformedLogError):
            loads_trace("")

    def test_not_json(self):
        text = dumps_trace(a2_trace(ticks=5, stride=5))
        with pytest.raises(MalformedLogError):
            loads_trace(text + "{oops\n")

    def test_missing_header(self):
        lines = dumps_trace(a2_trace(ticks=5, stride=5)).splitlines()
        with pytest.raises(MalformedLogError):
            loads_trace("\n".join(lines[1:]))

    def test_unknown_record(self):
        text = dumps_trace(a2_trace(ticks=5, stride=5))
        with pytest.raises(MalformedLogError):
            loads_trace(text + '{"kind":"gossip","tick":9}\n')

    def test_incomplete_event(self):
        text = dumps_trace(a2_trace(ticks=5, stride=5))
        with pytest.raises(MalformedLogError):
            loads_trace(text + '{"kind":"deliver","tick":9,"sender":1}\n')

    def test_snapshot_with_wrong_shape(self):
        text = dumps_trace(a2_trace(ticks=5, stride=5))
        with pytest.raises(MalformedLogError):
            loads_trace(text + '{"kind":"snapshot","tick":9,"views":[[0.0]]}\n')

    @pytest.mark.parametrize("field, value", [("tick", "x"), ("tick", None), ("agent", [1])])
    def test_unconvertible_event_field(self, field, value):
        lines = dumps_trace(a2_trace(ticks=200, stride=200)).splitlines()
        at = next(n for n, ln in enumerate(lines) if json.loads(ln)["kind"] == "update")
        record = json.loads(lines[at])
        record[field] = value
        lines[at] = json.dumps(record)
        with pytest.raises(MalformedLogError, match=f"Line {at + 1}"):
            loads_trace("\n".join(lines))

    def test_unconvertible_header_field(self):
        lines = dumps_trace(a2_trace(ticks=5, stride=5)).splitlines()
        header = json.loads(lines[0])
        header["end_tick"] = "soon"
        lines[0] = json.dumps(header)
        with pytest.raises(MalformedLogError, match="Line 1"):
            loads_trace("\n".join(lines))

    def test_file_that_is_not_utf8(self, tmp_path):
        path = tmp_path / "trace.jsonl"
        path.write_bytes(b'{"kind": "header", "format": "\xff\xfe"}\n')
        with pytest.raises(MalformedLogError, match="UTF-8"):
            read_trace(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_trace(tmp_path / "absent.jsonl")


def test_saved_trace_certifies_like_the_live_run(tmp_path, rate_a2):
    trace = a2_trace(ticks=2000, stride=100)
    path = write_trace(trace, tmp_path / "trace.jsonl")
    live = check_theorem3(trace, rate_a2)
    saved = certify_trace_file(path)
    assert saved.rows == live.rows
    assert saved.total_cycles == live.total_cycles
    assert saved.passed


def test_trace_without_config_cannot_be_certified(tmp_path):
    world = paper_instance("A2", 1)
    path = write_trace(run(world, 10, stride=10), tmp_path / "bare.jsonl")
    with pytest.raises(MalformedLogError):
        certify_trace_file(path)
