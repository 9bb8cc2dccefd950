from __future__ import annotations

import pytest

from edera.agent import (
    OUTPUT_CHUNK,
    AgentConfig,
    InitAgent,
    MonitorEvent,
    MonitorKind,
    exec_request_payload,
    exit_code_of,
)
from edera.idm import Channel, Frame, MsgType, Tag, tlv_decode, tlv_get


def make(budget=64, interval=500):
    ch = Channel(budget)
    return ch, InitAgent(AgentConfig("z1", interval), ch.zone)


def drain(ch):
    out = []
    while (f := ch.daemon.recv_frame()) is not None:
        out.append(f)
    return out


def kinds(frames):
    return [f.msg_type for f in frames]


def test_config_validation():
    with pytest.raises(ValueError):
        AgentConfig("z", 5)


def test_first_tick_heartbeats_and_coalesces():
    ch, ag = make()
    ag.tick(0)
    assert kinds(drain(ch)) == [MsgType.HEARTBEAT]
    ag.tick(1500)  # three intervals elapsed at once
    assert kinds(drain(ch)) == [MsgType.HEARTBEAT]
    assert ag.last_emit == 1500
    ag.tick(1600)
    assert drain(ch) == []


def test_event_without_heartbeat_due():
    ch, ag = make()
    ag.tick(0)
    drain(ch)
    ag.post_event(MonitorEvent(MonitorKind.PROCESS_START, "pid 1", 10))
    ag.tick(100)
    frames = drain(ch)
    assert kinds(frames) == [MsgType.EVENT]
    assert MonitorEvent.from_payload(frames[0].payload) == MonitorEvent(MonitorKind.PROCESS_START, "pid 1", 10)


def test_backpressured_heartbeat_is_retried():
    ch, ag = make(budget=1)
    ch.zone.send(Frame(MsgType.LOG, 0, b""))  # fill the budget
    assert ag.tick(0) == []
    assert ag.heartbeat_seq == 0
    drain(ch)
    sent = ag.tick(1)
    assert kinds(sent) == [MsgType.HEARTBEAT]
    assert tlv_get(tlv_decode(sent[0].payload), Tag.SEQ) == (0).to_bytes(8, "big")


def test_exec_echo_false_missing():
    ch, ag = make()
    frames = ag.exec(["echo", "hi"])
    assert kinds(frames) == [MsgType.EXEC_OUTPUT, MsgType.EXIT_EVENT]
    assert tlv_get(tlv_decode(frames[0].payload), Tag.DATA) == b"hi\n"
    assert exit_code_of(frames[-1]) == 0
    frames = ag.exec(["false"])
    assert kinds(frames) == [MsgType.EXIT_EVENT] and exit_code_of(frames[0]) == 1
    assert exit_code_of(ag.exec(["no-such-bin"])[-1]) == 127


def test_exec_output_is_chunked():
    ch, ag = make()
    frames = ag.exec(["zeros", str(3 * OUTPUT_CHUNK + 5)])
    data = [tlv_get(tlv_decode(f.payload), Tag.DATA) for f in frames[:-1]]
    assert [len(d) for d in data] == [OUTPUT_CHUNK] * 3 + [5]


def test_exec_request_over_channel():
    ch, ag = make()
    ch.daemon.send(Frame(MsgType.EXEC_REQUEST, 9, exec_request_payload(["cat"], b"input")))
    frames = [f for f in ag.tick(0) if f.msg_type is not MsgType.HEARTBEAT]
    assert {f.stream_id for f in frames} == {9}
    assert tlv_get(tlv_decode(frames[0].payload), Tag.DATA) == b"input"


def test_disable_is_permanent_and_idempotent():
    ch, ag = make()
    ag.tick(0)
    drain(ch)
    ag.post_event(MonitorEvent(MonitorKind.CUSTOM, "x", 0))
    ag.disable()
    ag.disable()
    for t in (500, 1000, 1500):
        assert ag.tick(t) == []
    assert drain(ch) == []


def test_kick_forces_heartbeat():
    ch, ag = make()
    ag.tick(0)
    drain(ch)
    ch.daemon.send(Frame(MsgType.EVENT, 0, b"\x50\x00\x04kick"))
    assert kinds(ag.tick(1)) == [MsgType.HEARTBEAT]


def test_monitor_event_detail_is_bounded():
    with pytest.raises(ValueError):
        MonitorEvent(MonitorKind.CUSTOM, "x" * 5000, 0)
