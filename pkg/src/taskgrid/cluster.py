"""Deterministic in-process cluster for integration testing.

One :class:`MasterCore` and any number of simulated worker agents are
wired through in-memory channels that carry the exact wire-protocol
bytes (every message passes through encode -> framer -> decode). Time
is a logical clock advanced by the test script; heartbeats, eviction
ticks and task completions are discrete events processed in a
deterministic (time, insertion) order, so identical scripts produce
identical dispatch logs byte for byte.

Execution semantics: a dispatch runs its executor immediately (in wall
time), but the RESULT is delivered after the executor-reported exec_ms
of *logical* time, so tasks stay observably in flight. A task param
``sim_exec_ms`` overrides that logical duration (real agents ignore
it); use it to hold a task in flight across heartbeat windows.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Callable

from . import protocol
from .master import MasterCore
from .model import TaskDescriptor, TaskState, WorkerProfile
from .protocol import (
    Dispatch,
    Heartbeat,
    HeartbeatAck,
    JobStatus,
    JobStatusReply,
    Message,
    Register,
    RegisterAck,
    Result,
    Submit,
    SubmitAck,
    SubmitTask,
)
from .scheduler import SchedulerConfig
from .worker import execute_dispatch
from .workloads import ExecutorRegistry, built_in_registry


@dataclass
class TransitionEvent:
    task_id: str
    from_state: TaskState
    to_state: TaskState
    at_ms: int


@dataclass
class AssignmentEvent:
    task_id: str
    worker_id: str
    requires_gpu: bool
    worker_has_gpu: bool
    at_ms: int


@dataclass(order=True)
class _Event:
    at_ms: int
    seq: int
    action: Callable[[], None] = field(compare=False)


class _Channel:
    """One direction of an in-memory duplex link carrying wire bytes."""

    def __init__(self, cluster: InProcCluster, deliver: Callable[[Message], None]):
        self._cluster = cluster
        self._deliver = deliver
        self._framer = protocol.LineFramer()

    def send_bytes(self, data: bytes) -> None:
        for line in self._framer.feed(data):
            message = protocol.decode(line)
            self._cluster._schedule(0, lambda m=message: self._deliver(m))

    def send(self, message: Message) -> None:
        self.send_bytes(protocol.encode(message))


class SimWorker:
    """Scripted stand-in for a worker agent, driven by logical time."""

    def __init__(self, cluster: InProcCluster, register_msg: Register, registry: ExecutorRegistry):
        self.cluster = cluster
        self.worker_id = register_msg.worker_id
        self.register_msg = register_msg
        self.registry = registry
        self.alive = True
        self.busy = False
        self.beat_interval_ms: int | None = None
        self.to_master: _Channel | None = None

    def _send(self, message: Message) -> None:
        if self.alive and self.to_master is not None:
            self.to_master.send(message)

    def start(self) -> None:
        self._send(self.register_msg)

    def on_message(self, message: Message) -> None:
        if not self.alive:
            return
        if isinstance(message, RegisterAck):
            if not message.accepted:
                raise AssertionError(f"sim worker {self.worker_id} rejected: {message.reason}")
            if self.beat_interval_ms is None:
                self.beat_interval_ms = message.heartbeat_interval_ms
                self._schedule_beat()
        elif isinstance(message, HeartbeatAck):
            if message.status == protocol.HEARTBEAT_NOT_REGISTERED:
                self._send(self.register_msg)
        elif isinstance(message, Dispatch):
            self._run_task(message)

    def _schedule_beat(self) -> None:
        assert self.beat_interval_ms is not None
        self.cluster._schedule(self.beat_interval_ms, self._beat)

    def _beat(self) -> None:
        if not self.alive:
            return
        self._send(Heartbeat(worker_id=self.worker_id, ts_ms=self.cluster.now_ms, busy=self.busy))
        self._schedule_beat()

    def _run_task(self, dispatch: Dispatch) -> None:
        if self.busy:
            self._send(
                Result(
                    task_id=dispatch.task_id,
                    worker_id=self.worker_id,
                    status=protocol.RESULT_FAILED,
                    exec_ms=0,
                    error="BUSY",
                )
            )
            return
        self.busy = True
        result = execute_dispatch(self.registry, dispatch, self.worker_id)
        logical_ms = result.exec_ms
        if "sim_exec_ms" in dispatch.params:
            logical_ms = int(dispatch.params["sim_exec_ms"])

        def finish() -> None:
            if not self.alive:
                return
            self.busy = False
            self._send(result)

        self.cluster._schedule(logical_ms, finish)


class InProcCluster:
    """Master plus simulated workers under a controllable logical clock.

    Master eviction ticks run every ``heartbeat_interval_ms`` of logical
    time starting at the first interval after construction.
    """

    def __init__(self, config: SchedulerConfig | None = None):
        self.config = config or SchedulerConfig()
        self.now_ms = 0
        self._heap: list[_Event] = []
        self._seq = 0
        self.dispatch_frames: list[bytes] = []
        self.transitions: list[TransitionEvent] = []
        self.assignments: list[AssignmentEvent] = []
        self.core = MasterCore(
            self.config,
            clock=lambda: self.now_ms,
            on_transition=self._record_transition,
            on_assignment=self._record_assignment,
        )
        self.workers: dict[str, SimWorker] = {}
        self._client_channel = _Channel(self, self._handle_client_message)
        self._client_replies: list[Message] = []
        self._schedule(self.config.heartbeat_interval_ms, self._master_tick)

    # -- recording -----------------------------------------------------------

    def _record_transition(
        self, task: TaskDescriptor, from_state: TaskState, to_state: TaskState, at_ms: int
    ) -> None:
        self.transitions.append(TransitionEvent(task.task_id, from_state, to_state, at_ms))

    def _record_assignment(self, task: TaskDescriptor, profile: WorkerProfile, at_ms: int) -> None:
        self.assignments.append(
            AssignmentEvent(
                task.task_id, profile.worker_id, task.requires_gpu, profile.has_gpu, at_ms
            )
        )

    # -- wiring ----------------------------------------------------------------

    def _schedule(self, delay_ms: int, action: Callable[[], None]) -> None:
        self._seq += 1
        heapq.heappush(self._heap, _Event(self.now_ms + delay_ms, self._seq, action))

    def _master_tick(self) -> None:
        self.core.tick()
        self._schedule(self.config.heartbeat_interval_ms, self._master_tick)

    def _attach_worker(self, worker: SimWorker) -> None:
        to_worker = _Channel(self, worker.on_message)

        def master_sender(message: Message) -> None:
            data = protocol.encode(message)
            if isinstance(message, Dispatch):
                self.dispatch_frames.append(data)
            to_worker.send_bytes(data)

        worker.to_master = _Channel(
            self, lambda m, send=master_sender: self._handle_worker_message(m, send)
        )

    def _handle_worker_message(self, message: Message, sender: Callable[[Message], None]) -> None:
        reply = self.core.handle(message, sender)
        if reply is not None:
            sender(reply)

    def _handle_client_message(self, message: Message) -> None:
        reply = self.core.handle(message, self._client_replies.append)
        if reply is not None:
            self._client_replies.append(reply)

    # -- cluster control -----------------------------------------------------------

    def add_worker(
        self,
        worker_id: str,
        cpu_mhz: int = 2000,
        has_gpu: bool = False,
        gpu_cores: int | None = None,
        gpu_mem_mb: int | None = None,
        lane_count: int = 1,
        registry: ExecutorRegistry | None = None,
    ) -> SimWorker:
        """Connect and register a simulated worker. Sleep workloads are
        simulated so their durations consume only logical time. Replacing
        a live worker id silences the old incarnation first."""
        old = self.workers.get(worker_id)
        if old is not None:
            old.alive = False
        register = Register(
            worker_id=worker_id,
            cpu_mhz=cpu_mhz,
            has_gpu=has_gpu,
            gpu_cores=gpu_cores,
            gpu_mem_mb=gpu_mem_mb,
        )
        worker = SimWorker(
            self,
            register,
            registry or built_in_registry(lane_count=lane_count, simulated_sleep=True),
        )
        self._attach_worker(worker)
        self.workers[worker_id] = worker
        worker.start()
        self._drain_due_events()
        return worker

    def kill_worker(self, worker_id: str) -> None:
        """Silence a worker: no more heartbeats, results, or reactions.
        The master notices only through heartbeat staleness."""
        self.workers[worker_id].alive = False

    def submit(self, tasks: list[SubmitTask], job_id: str = "job") -> SubmitAck:
        self._client_channel.send(Submit(job_id=job_id, tasks=tuple(tasks)))
        self._drain_due_events()
        reply = self._client_replies.pop(0)
        assert isinstance(reply, SubmitAck), reply
        return reply

    def job_status(self, job_id: str = "job") -> JobStatusReply:
        self._client_channel.send(JobStatus(job_id=job_id))
        self._drain_due_events()
        reply = self._client_replies.pop(0)
        assert isinstance(reply, JobStatusReply), reply
        return reply

    # -- time -------------------------------------------------------------------------

    def _drain_due_events(self) -> None:
        while self._heap and self._heap[0].at_ms <= self.now_ms:
            heapq.heappop(self._heap).action()

    def advance(self, dt_ms: int) -> None:
        """Move logical time forward, firing due events in order."""
        target = self.now_ms + dt_ms
        while self._heap and self._heap[0].at_ms <= target:
            event = heapq.heappop(self._heap)
            self.now_ms = max(self.now_ms, event.at_ms)
            event.action()
        self.now_ms = target

    def run_until_terminal(
        self, job_id: str = "job", max_ms: int = 10 * 60 * 1000
    ) -> JobStatusReply:
        """Advance in heartbeat-interval steps until the job settles."""
        step = self.config.heartbeat_interval_ms
        waited = 0
        while waited <= max_ms:
            if self.core.job_is_terminal(job_id):
                return self.job_status(job_id)
            self.advance(step)
            waited += step
        raise TimeoutError(f"job {job_id} not terminal after {max_ms} logical ms")
