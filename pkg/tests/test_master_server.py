import socket
import threading
import time

import pytest

from taskgrid import protocol
from taskgrid.client import ClientError, MasterClient, make_task
from taskgrid.master import MasterServer
from taskgrid.protocol import (
    Dispatch,
    ErrorReply,
    HeartbeatAck,
    JobStatusReply,
    Register,
    RegisterAck,
    Result,
)
from taskgrid.scheduler import SchedulerConfig
from taskgrid.worker import WorkerAgent, WorkerConfig


class FakeWorkerConn:
    """Raw socket speaking the worker side by hand."""

    def __init__(self, port, worker_id="W1", cpu_mhz=2400, has_gpu=True):
        self.sock = socket.create_connection(("127.0.0.1", port), timeout=5)
        self.sock.settimeout(5.0)
        self.worker_id = worker_id
        self._framer = protocol.LineFramer()
        self._pending = []
        self.send(Register(worker_id=worker_id, cpu_mhz=cpu_mhz, has_gpu=has_gpu))
        ack = self.read()
        assert isinstance(ack, RegisterAck) and ack.accepted

    def send(self, message):
        self.sock.sendall(protocol.encode(message))

    def read(self):
        while not self._pending:
            chunk = self.sock.recv(65536)
            if not chunk:
                raise AssertionError("master closed the connection")
            self._pending.extend(protocol.decode(line) for line in self._framer.feed(chunk))
        return self._pending.pop(0)

    def close(self):
        self.sock.close()


def test_register_ack_echoes_heartbeat_interval(server):
    sock = socket.create_connection(("127.0.0.1", server.port), timeout=5)
    sock.sendall(protocol.encode(Register(worker_id="Wint", cpu_mhz=1000, has_gpu=False)))
    framer = protocol.LineFramer()
    sock.settimeout(5.0)
    lines = []
    while not lines:
        lines = framer.feed(sock.recv(65536))
    ack = protocol.decode(lines[0])
    assert isinstance(ack, RegisterAck) and ack.accepted
    assert ack.heartbeat_interval_ms == 200  # the server's configured cadence
    sock.close()


@pytest.fixture
def server():
    srv = MasterServer("127.0.0.1", 0, SchedulerConfig(heartbeat_interval_ms=200))
    srv.start()
    yield srv
    srv.shutdown()


def test_register_submit_dispatch_complete(server):
    worker = FakeWorkerConn(server.port)
    with MasterClient("127.0.0.1", server.port) as client:
        ack = client.submit([make_task("noop", requires_gpu=True, task_id="T1")], job_id="J1")
        assert ack.accepted_count == 1

        dispatch = worker.read()
        assert isinstance(dispatch, Dispatch)
        assert dispatch.task_id == "T1" and dispatch.kind == "noop"
        worker.send(
            Result(task_id="T1", worker_id=worker.worker_id, status="OK", exec_ms=7, output_b64="")
        )

        reply = client.wait_for_job("J1", timeout_s=5)
        [report] = reply.tasks
        assert report.state == "COMPLETED"
        assert report.worker_id == "W1"
        assert report.exec_ms == 7
        assert report.submitted_ms <= report.dispatched_ms <= report.completed_ms
    worker.close()


def test_unknown_job_is_an_error(server):
    with MasterClient("127.0.0.1", server.port) as client:
        with pytest.raises(ClientError, match="UNKNOWN_JOB"):
            client.job_status("nope")


def test_duplicate_task_ids_not_accepted(server):
    with MasterClient("127.0.0.1", server.port) as client:
        ack = client.submit(
            [make_task("noop", task_id="T1"), make_task("noop", task_id="T1")], job_id="J1"
        )
        assert ack.accepted_count == 1


def test_malformed_line_answered_with_error(server):
    sock = socket.create_connection(("127.0.0.1", server.port), timeout=5)
    sock.sendall(b"this is not json\n")
    framer = protocol.LineFramer()
    sock.settimeout(5.0)
    message = None
    while message is None:
        lines = framer.feed(sock.recv(65536))
        if lines:
            message = protocol.decode(lines[0])
    assert isinstance(message, ErrorReply)
    assert message.code == "PROTOCOL_ERROR"
    sock.close()


def test_rejected_registration(server):
    sock = socket.create_connection(("127.0.0.1", server.port), timeout=5)
    sock.sendall(protocol.encode(Register(worker_id="W1", cpu_mhz=0, has_gpu=False)))
    framer = protocol.LineFramer()
    sock.settimeout(5.0)
    lines = []
    while not lines:
        lines = framer.feed(sock.recv(65536))
    ack = protocol.decode(lines[0])
    assert isinstance(ack, RegisterAck) and not ack.accepted
    assert "cpu_mhz" in ack.reason
    sock.close()


def test_heartbeat_from_unknown_worker(server):
    sock = socket.create_connection(("127.0.0.1", server.port), timeout=5)
    sock.sendall(protocol.encode(protocol.Heartbeat(worker_id="ghost", ts_ms=1, busy=False)))
    framer = protocol.LineFramer()
    sock.settimeout(5.0)
    lines = []
    while not lines:
        lines = framer.feed(sock.recv(65536))
    ack = protocol.decode(lines[0])
    assert isinstance(ack, HeartbeatAck) and ack.status == "NOT_REGISTERED"
    sock.close()


def test_silent_worker_evicted_and_task_recovered(server):
    # a silent fake worker takes the task, then a real agent finishes it
    silent = FakeWorkerConn(server.port, worker_id="Wsilent", cpu_mhz=9000)
    with MasterClient("127.0.0.1", server.port) as client:
        ack = client.submit([make_task("noop", requires_gpu=True, task_id="T1")], job_id="J1")
        assert ack.accepted_count == 1
        dispatch = silent.read()
        assert dispatch.task_id == "T1"  # sent to the silent worker; never answered

        config = WorkerConfig(
            worker_id="Wlive",
            master_host="127.0.0.1",
            master_port=server.port,
            cpu_mhz=1000,
            has_gpu=True,
        )
        agent = WorkerAgent(config)
        thread = threading.Thread(target=agent.run, daemon=True)
        thread.start()
        try:
            reply = client.wait_for_job("J1", timeout_s=10)
            [report] = reply.tasks
            assert report.state == "COMPLETED"
            assert report.worker_id == "Wlive"
        finally:
            agent.stop()
    silent.close()


def test_state_dump(server, tmp_path):
    worker = FakeWorkerConn(server.port)
    with MasterClient("127.0.0.1", server.port) as client:
        client.submit([make_task("noop", requires_gpu=True, task_id="T1")], job_id="J1")
        dispatch = worker.read()
        worker.send(
            Result(
                task_id=dispatch.task_id,
                worker_id=worker.worker_id,
                status="OK",
                exec_ms=1,
                output_b64="",
            )
        )
        client.wait_for_job("J1", timeout_s=5)

    path = tmp_path / "state.ndjson"
    server.dump_state(str(path))
    lines = path.read_bytes().splitlines()
    assert len(lines) == 1
    reply = protocol.decode(lines[0])
    assert isinstance(reply, JobStatusReply)
    assert reply.job_id == "J1"
    assert reply.tasks[0].state == "COMPLETED"
    worker.close()


def test_bind_conflict_raises():
    srv = MasterServer("127.0.0.1", 0, SchedulerConfig())
    try:
        with pytest.raises(OSError):
            MasterServer("127.0.0.1", srv.port, SchedulerConfig())
    finally:
        srv.shutdown()
