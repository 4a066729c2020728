import base64

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from taskgrid import protocol
from taskgrid.protocol import (
    Dispatch,
    ErrorReply,
    FramingError,
    Heartbeat,
    HeartbeatAck,
    JobStatus,
    JobStatusReply,
    LineFramer,
    ProtocolError,
    Register,
    RegisterAck,
    Result,
    Submit,
    SubmitAck,
    SubmitTask,
    TaskReport,
    decode,
    encode,
)

ids = st.text(st.characters(min_codepoint=33, max_codepoint=126), min_size=1, max_size=12)
ms = st.integers(0, 2**40)
b64s = st.binary(max_size=64).map(lambda b: base64.b64encode(b).decode())
params = st.dictionaries(ids, st.text(max_size=16), max_size=4)

submit_tasks = st.builds(
    SubmitTask, task_id=ids, kind=ids, requires_gpu=st.booleans(), params=params, payload_b64=b64s
)
task_reports = st.builds(
    TaskReport,
    task_id=ids,
    state=st.sampled_from(["QUEUED", "DISPATCHED", "COMPLETED", "FAILED"]),
    worker_id=st.none() | ids,
    submitted_ms=st.none() | ms,
    dispatched_ms=st.none() | ms,
    completed_ms=st.none() | ms,
    exec_ms=st.none() | ms,
    output_b64=st.none() | b64s,
    error=st.none() | st.text(max_size=20),
)

messages = st.one_of(
    st.builds(
        Register,
        worker_id=ids,
        cpu_mhz=st.integers(1, 100000),
        has_gpu=st.booleans(),
        gpu_cores=st.none() | st.integers(1, 10000),
        gpu_mem_mb=st.none() | st.integers(1, 1 << 20),
    ),
    st.builds(
        RegisterAck,
        accepted=st.booleans(),
        heartbeat_interval_ms=st.integers(1, 10**6),
        reason=st.none() | st.text(max_size=20),
    ),
    st.builds(Heartbeat, worker_id=ids, ts_ms=ms, busy=st.booleans()),
    st.builds(HeartbeatAck, status=st.sampled_from(["OK", "NOT_REGISTERED"])),
    st.builds(
        Dispatch, task_id=ids, kind=ids, requires_gpu=st.booleans(), params=params, payload_b64=b64s
    ),
    st.builds(
        Result,
        task_id=ids,
        worker_id=ids,
        status=st.sampled_from(["OK", "FAILED"]),
        exec_ms=ms,
        output_b64=st.none() | b64s,
        error=st.none() | st.text(max_size=20),
    ),
    st.builds(Submit, job_id=ids, tasks=st.lists(submit_tasks, max_size=4).map(tuple)),
    st.builds(SubmitAck, job_id=ids, accepted_count=st.integers(0, 1000)),
    st.builds(JobStatus, job_id=ids),
    st.builds(JobStatusReply, job_id=ids, tasks=st.lists(task_reports, max_size=4).map(tuple)),
    st.builds(ErrorReply, code=ids, detail=st.text(max_size=40)),
)


def test_heartbeat_golden_bytes():
    beat = Heartbeat(worker_id="W1", ts_ms=5000, busy=False)
    assert encode(beat) == b'{"type":"HEARTBEAT","busy":false,"ts_ms":5000,"worker_id":"W1"}\n'


def test_empty_payload_dispatch():
    msg = Dispatch(task_id="T1", kind="noop", requires_gpu=False, params={}, payload_b64="")
    line = encode(msg)
    assert b'"payload_b64":""' in line
    assert decode(line) == msg


def test_result_base64_payload():
    assert base64.b64encode(b"\x01\x02\x03") == b"AQID"
    msg = Result(task_id="T1", worker_id="W1", status="OK", exec_ms=1, output_b64="AQID")
    assert b'"output_b64":"AQID"' in encode(msg)


def test_encoding_is_one_lf_terminated_line():
    line = encode(JobStatus(job_id="j"))
    assert line.endswith(b"\n") and line.count(b"\n") == 1


def test_optional_fields_omitted():
    line = encode(Register(worker_id="W1", cpu_mhz=2400, has_gpu=False))
    assert b"gpu_cores" not in line and b"gpu_mem_mb" not in line


def test_params_encode_sorted():
    msg = Dispatch(task_id="t", kind="k", requires_gpu=False, params={"z": "1", "a": "2"})
    text = encode(msg).decode()
    assert text.index('"a":"2"') < text.index('"z":"1"')


@given(messages)
@settings(max_examples=300)
def test_round_trip_identity(msg):
    assert decode(encode(msg)) == msg


@given(messages)
@settings(max_examples=100)
def test_encoding_deterministic(msg):
    assert encode(msg) == encode(msg)


@given(messages)
@settings(max_examples=100)
def test_decode_tolerates_any_field_order(msg):
    import json

    obj = json.loads(encode(msg))
    reordered = json.dumps(dict(reversed(list(obj.items())))).encode() + b"\n"
    assert decode(reordered) == msg


def test_unknown_type_rejected():
    with pytest.raises(ProtocolError, match="unknown message type"):
        decode(b'{"type":"NOPE"}\n')


def test_missing_field_named():
    with pytest.raises(ProtocolError, match="ts_ms"):
        decode(b'{"type":"HEARTBEAT","busy":false,"worker_id":"W1"}\n')


def test_missing_type_rejected():
    with pytest.raises(ProtocolError, match="type"):
        decode(b'{"busy":false}\n')


def test_malformed_json_rejected():
    with pytest.raises(ProtocolError, match="malformed JSON"):
        decode(b"{nope}\n")


def test_non_object_rejected():
    with pytest.raises(ProtocolError):
        decode(b"[1,2]\n")


def test_unknown_field_rejected():
    with pytest.raises(ProtocolError, match="unknown field"):
        decode(b'{"type":"JOB_STATUS","job_id":"j","bogus":1}\n')


def test_wrong_field_type_rejected():
    with pytest.raises(ProtocolError, match="ts_ms"):
        decode(b'{"type":"HEARTBEAT","busy":false,"ts_ms":"soon","worker_id":"W1"}\n')


def test_invalid_base64_rejected():
    with pytest.raises(ProtocolError, match="payload_b64"):
        decode(b'{"type":"DISPATCH","kind":"k","params":{},"payload_b64":"!!","requires_gpu":false,"task_id":"t"}\n')


def test_bool_is_not_an_int():
    with pytest.raises(ProtocolError, match="cpu_mhz"):
        decode(b'{"type":"REGISTER","cpu_mhz":true,"has_gpu":false,"worker_id":"W"}\n')


# -- framing ----------------------------------------------------------------


def test_two_messages_in_one_chunk():
    framer = LineFramer()
    lines = framer.feed(b'{"a":1}\n{"b":2}\n')
    assert lines == [b'{"a":1}', b'{"b":2}']


def test_message_split_across_chunks():
    framer = LineFramer()
    assert framer.feed(b'{"a"') == []
    assert framer.feed(b":1}\n") == [b'{"a":1}']


def test_line_cap_enforced():
    framer = LineFramer(max_line_bytes=10)
    with pytest.raises(FramingError):
        framer.feed(b"x" * 11)
    framer = LineFramer(max_line_bytes=10)
    with pytest.raises(FramingError):
        framer.feed(b"y" * 11 + b"\n")


def test_default_cap_is_64mib():
    assert protocol.MAX_LINE_BYTES == 64 * 1024 * 1024


@given(st.lists(messages, min_size=1, max_size=6), st.data())
@settings(max_examples=60)
def test_framing_is_chunking_invariant(msgs, data):
    stream = b"".join(encode(m) for m in msgs)
    cuts = sorted(
        data.draw(
            st.lists(st.integers(0, len(stream)), max_size=8),
        )
    )
    framer = LineFramer()
    got = []
    prev = 0
    for cut in cuts + [len(stream)]:
        got.extend(framer.feed(stream[prev:cut]))
        prev = cut
    assert [decode(line) for line in got] == list(msgs)
