import socket
import threading
import time

import pytest

import taskgrid.worker as worker_mod
from taskgrid import protocol
from taskgrid.protocol import (
    Dispatch,
    Heartbeat,
    HeartbeatAck,
    Register,
    RegisterAck,
    Result,
)
from taskgrid.sobel import GrayImage, parse_pgm, sobel_sequential, write_pgm
from taskgrid.worker import RegistrationRejected, WorkerAgent, WorkerConfig, execute_dispatch
from taskgrid.workloads import built_in_registry


def make_dispatch(kind, payload=b"", params=None, task_id="T1"):
    return Dispatch(
        task_id=task_id,
        kind=kind,
        requires_gpu=False,
        params=params or {},
        payload_b64=protocol.to_b64(payload),
    )


# -- execute_dispatch ------------------------------------------------------------


def test_execute_noop():
    result = execute_dispatch(built_in_registry(), make_dispatch("noop"), "W1")
    assert result.status == "OK"
    assert result.output_b64 == ""
    assert result.exec_ms >= 0


def test_execute_unknown_kind():
    result = execute_dispatch(built_in_registry(), make_dispatch("bogus"), "W1")
    assert result.status == "FAILED"
    assert result.error == "UNKNOWN_KIND"


def test_execute_executor_exception_becomes_failed():
    dispatch = make_dispatch("sleep", params={"duration_ms": "not-a-number"})
    result = execute_dispatch(built_in_registry(), dispatch, "W1")
    assert result.status == "FAILED"
    assert "ValueError" in result.error


def test_execute_sobel_round_trip():
    img = GrayImage(4, 3, bytes(range(12)))
    dispatch = make_dispatch("sobel_seq", payload=write_pgm(img))
    result = execute_dispatch(built_in_registry(), dispatch, "W1")
    assert result.status == "OK"
    out = parse_pgm(protocol.from_b64(result.output_b64))
    assert out == sobel_sequential(img)


def test_execute_is_deterministic():
    img = GrayImage(6, 6, bytes(range(36)))
    dispatch = make_dispatch("sobel_par", payload=write_pgm(img), params={"lane_count": "3"})
    a = execute_dispatch(built_in_registry(), dispatch, "W1")
    b = execute_dispatch(built_in_registry(), dispatch, "W1")
    assert a.output_b64 == b.output_b64


def test_exec_ms_is_within_total_handler_time():
    img = GrayImage(64, 64, bytes(i % 256 for i in range(64 * 64)))
    dispatch = make_dispatch("sobel_seq", payload=write_pgm(img))
    t0 = time.perf_counter_ns()
    result = execute_dispatch(built_in_registry(), dispatch, "W1")
    wall_ms = (time.perf_counter_ns() - t0) // 1_000_000
    assert 0 <= result.exec_ms <= wall_ms


# -- agent against a scripted master ----------------------------------------------


class ScriptedMaster:
    def __init__(self):
        self.listener = socket.create_server(("127.0.0.1", 0))
        self.port = self.listener.getsockname()[1]
        self.conn = None
        self._framer = protocol.LineFramer()
        self._pending = []

    def accept(self, timeout=5.0):
        self.listener.settimeout(timeout)
        self.conn, _ = self.listener.accept()
        self.conn.settimeout(5.0)

    def read(self):
        while not self._pending:
            chunk = self.conn.recv(65536)
            if not chunk:
                raise AssertionError("agent closed the connection")
            self._pending.extend(protocol.decode(line) for line in self._framer.feed(chunk))
        return self._pending.pop(0)

    def read_until(self, cls, limit=50):
        for _ in range(limit):
            message = self.read()
            if isinstance(message, cls):
                return message
        raise AssertionError(f"no {cls.__name__} within {limit} messages")

    def send(self, message):
        self.conn.sendall(protocol.encode(message))

    def close(self):
        if self.conn is not None:
            self.conn.close()
        self.listener.close()


@pytest.fixture
def scripted():
    master = ScriptedMaster()
    agents = []

    def start_agent(interval_ms=60000, **config_kwargs):
        config = WorkerConfig(
            worker_id="W1",
            master_host="127.0.0.1",
            master_port=master.port,
            cpu_mhz=2400,
            **config_kwargs,
        )
        agent = WorkerAgent(config)
        thread = threading.Thread(target=agent.run, daemon=True)
        thread.start()
        agents.append(agent)
        master.accept()
        register = master.read_until(Register)
        master.send(RegisterAck(accepted=True, heartbeat_interval_ms=interval_ms))
        return agent, register

    yield master, start_agent
    for agent in agents:
        agent.stop()
    master.close()


def test_agent_registers_and_executes(scripted):
    master, start_agent = scripted
    _, register = start_agent()
    assert register == Register(worker_id="W1", cpu_mhz=2400, has_gpu=False)
    master.send(make_dispatch("noop"))
    result = master.read_until(Result)
    assert result.status == "OK"
    assert result.worker_id == "W1"
    assert result.task_id == "T1"


def test_agent_heartbeats_mid_execution(scripted):
    master, start_agent = scripted
    start_agent(interval_ms=50)
    master.send(make_dispatch("sleep", params={"duration_ms": "400"}))
    saw_busy = False
    while True:
        message = master.read()
        if isinstance(message, Heartbeat):
            if message.busy:
                saw_busy = True
            master.send(HeartbeatAck(status="OK"))
        elif isinstance(message, Result):
            assert message.status == "OK"
            break
    assert saw_busy


def test_agent_rejects_dispatch_while_busy(scripted):
    master, start_agent = scripted
    start_agent()
    master.send(make_dispatch("sleep", params={"duration_ms": "500"}, task_id="T-long"))
    time.sleep(0.1)
    master.send(make_dispatch("noop", task_id="T-second"))
    result = master.read_until(Result)
    assert result.task_id == "T-second"
    assert result.status == "FAILED"
    assert result.error == "BUSY"
    final = master.read_until(Result)
    assert final.task_id == "T-long"
    assert final.status == "OK"


def test_agent_reregisters_on_not_registered(scripted):
    master, start_agent = scripted
    start_agent(interval_ms=50)
    master.read_until(Heartbeat)
    master.send(HeartbeatAck(status="NOT_REGISTERED"))
    register = master.read_until(Register)
    assert register.worker_id == "W1"


def test_agent_terminates_on_rejection():
    master = ScriptedMaster()
    config = WorkerConfig(
        worker_id="W1", master_host="127.0.0.1", master_port=master.port, cpu_mhz=2400
    )
    agent = WorkerAgent(config)
    errors = []

    def run():
        try:
            agent.run()
        except RegistrationRejected as exc:
            errors.append(exc)

    thread = threading.Thread(target=run, daemon=True)
    thread.start()
    master.accept()
    master.read_until(Register)
    master.send(RegisterAck(accepted=False, heartbeat_interval_ms=0, reason="bad profile"))
    thread.join(timeout=5)
    assert not thread.is_alive()
    assert errors and "bad profile" in str(errors[0])
    master.close()


def test_agent_retries_with_backoff(monkeypatch):
    monkeypatch.setattr(worker_mod, "RETRY_BASE_S", 0.05)
    master = ScriptedMaster()
    port = master.port
    master.close()  # nothing listening yet

    config = WorkerConfig(worker_id="W1", master_host="127.0.0.1", master_port=port, cpu_mhz=1000)
    agent = WorkerAgent(config)
    thread = threading.Thread(target=agent.run, daemon=True)
    thread.start()
    time.sleep(0.2)  # let a few connection attempts fail

    listener = socket.create_server(("127.0.0.1", port))
    listener.settimeout(5.0)
    conn, _ = listener.accept()
    conn.settimeout(5.0)
    framer = protocol.LineFramer()
    chunk = conn.recv(65536)
    messages = [protocol.decode(line) for line in framer.feed(chunk)]
    assert any(isinstance(m, Register) for m in messages)
    agent.stop()
    conn.close()
    listener.close()


def test_worker_config_validation():
    with pytest.raises(ValueError):
        WorkerConfig(
            worker_id="W1", master_host="h", master_port=1, cpu_mhz=2400, gpu_cores=4
        ).validate()
    with pytest.raises(ValueError):
        WorkerConfig(worker_id="W1", master_host="h", master_port=1, cpu_mhz=0).validate()
    config = WorkerConfig(worker_id="W1", master_host="h", master_port=1, cpu_mhz=1)
    assert config.lane_count >= 1
