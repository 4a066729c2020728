"""Master-side scheduling: membership rings, FCFS queue, round-robin dispatch.

Workers are segregated into a GPU ring and a CPU ring by their declared
capability. Tasks are served first-come-first-served; each task draws
an idle worker from its eligible ring by rotating that ring's cursor.
GPU tasks are never placed on CPU-only workers. GPU capability metadata
(cores, memory) and current load play no part in placement.
"""

from __future__ import annotations

import bisect
import logging
from dataclasses import dataclass, field
from typing import Callable

from .model import (
    TaskDescriptor,
    TaskState,
    WorkerProfile,
    validate_profile,
    validate_transition,
)

logger = logging.getLogger(__name__)

TransitionHook = Callable[[TaskDescriptor, TaskState, TaskState, int], None]
UNSCHEDULABLE_ERROR = "UNSCHEDULABLE: no GPU worker registered within timeout"


class RegistrationError(ValueError):
    """Worker profile rejected by the membership catalog."""


class DuplicateTaskError(ValueError):
    """A task_id was reused within this master's lifetime."""


@dataclass
class SchedulerConfig:
    heartbeat_interval_ms: int = 2000
    liveness_misses: int = 3
    unschedulable_timeout_ms: int = 60000
    listen_address: str = "127.0.0.1:7070"

    def __post_init__(self) -> None:
        if self.heartbeat_interval_ms <= 0:
            raise ValueError("heartbeat_interval_ms must be positive")
        if self.liveness_misses <= 0:
            raise ValueError("liveness_misses must be positive")
        if self.unschedulable_timeout_ms <= 0:
            raise ValueError("unschedulable_timeout_ms must be positive")

    @property
    def liveness_window_ms(self) -> int:
        return self.heartbeat_interval_ms * self.liveness_misses


class _Ring:
    """Worker ids ordered by descending cpu_mhz (ties: ascending id),
    with a rotating cursor for round-robin selection."""

    def __init__(self) -> None:
        self.ids: list[str] = []
        self.cursor: int = 0

    @staticmethod
    def _key(profile: WorkerProfile) -> tuple[int, str]:
        return (-profile.cpu_mhz, profile.worker_id)

    def insert(self, profile: WorkerProfile, profiles: dict[str, WorkerProfile]) -> None:
        pos = bisect.bisect_left(
            self.ids, self._key(profile), key=lambda wid: self._key(profiles[wid])
        )
        self.ids.insert(pos, profile.worker_id)
        # Keep the rotation pointed at the same pre-existing worker.
        if len(self.ids) > 1 and pos <= self.cursor:
            self.cursor += 1

    def remove(self, worker_id: str) -> None:
        pos = self.ids.index(worker_id)
        self.ids.pop(pos)
        if not self.ids:
            self.cursor = 0
        elif pos < self.cursor:
            self.cursor -= 1
        elif self.cursor >= len(self.ids):
            self.cursor = 0

    def take_idle(self, profiles: dict[str, WorkerProfile]) -> str | None:
        """Next idle worker by cyclic cursor scan; advances the cursor
        past the chosen worker."""
        count = len(self.ids)
        for step in range(count):
            pos = (self.cursor + step) % count
            wid = self.ids[pos]
            if not profiles[wid].busy:
                self.cursor = (pos + 1) % count
                return wid
        return None


class MembershipCatalog:
    """Live workers split into GPU and CPU dispatch rings."""

    def __init__(self) -> None:
        self.workers: dict[str, WorkerProfile] = {}
        self.gpu_ring = _Ring()
        self.cpu_ring = _Ring()

    def _ring_for(self, profile: WorkerProfile) -> _Ring:
        return self.gpu_ring if profile.has_gpu else self.cpu_ring

    def insert(self, profile: WorkerProfile) -> None:
        self.workers[profile.worker_id] = profile
        self._ring_for(profile).insert(profile, self.workers)

    def remove(self, worker_id: str) -> WorkerProfile:
        profile = self.workers[worker_id]
        self._ring_for(profile).remove(worker_id)
        del self.workers[worker_id]
        return profile

    def __contains__(self, worker_id: str) -> bool:
        return worker_id in self.workers


class Scheduler:
    """Deterministic scheduling state machine.

    All mutation must come through one logical event loop; the class
    itself takes no locks. Every method that can change task state takes
    the caller's notion of "now" so clocks stay outside.
    """

    def __init__(self, config: SchedulerConfig, on_transition: TransitionHook | None = None):
        self.config = config
        self.catalog = MembershipCatalog()
        self.tasks: dict[str, TaskDescriptor] = {}
        self.queue: list[str] = []  # task_ids, FCFS order
        self._seen_task_ids: set[str] = set()
        self._enqueue_seq: dict[str, int] = {}
        self._next_seq = 0
        self._on_transition = on_transition

    # -- lifecycle helpers -------------------------------------------------

    def _transition(self, task: TaskDescriptor, to_state: TaskState, now_ms: int) -> None:
        from_state = task.state
        if not validate_transition(from_state, to_state):
            raise AssertionError(f"illegal transition {from_state} -> {to_state} for {task.task_id}")
        task.state = to_state
        if self._on_transition is not None:
            self._on_transition(task, from_state, to_state, now_ms)

    def _queue_key(self, task_id: str) -> tuple[int, int]:
        task = self.tasks[task_id]
        return (task.timing.submitted_ms or 0, self._enqueue_seq[task_id])

    def _requeue(self, task: TaskDescriptor, now_ms: int) -> None:
        """Return an orphaned task to the queue at its original FCFS slot."""
        task.assigned_worker = None
        task.timing.dispatched_ms = None
        task.attempt += 1
        self._transition(task, TaskState.QUEUED, now_ms)
        bisect.insort(self.queue, task.task_id, key=self._queue_key)

    # -- membership --------------------------------------------------------

    def register_worker(self, profile: WorkerProfile, now_ms: int) -> None:
        """Insert (or replace) a worker in its capability ring.

        Re-registering a known id drops the old profile; a task the old
        incarnation held is re-queued.
        """
        reason = validate_profile(profile)
        if reason is not None:
            raise RegistrationError(reason)
        if profile.worker_id in self.catalog:
            old = self.catalog.remove(profile.worker_id)
            if old.current_task is not None:
                orphan = self.tasks[old.current_task]
                logger.warning(
                    "worker %s re-registered; re-queueing task %s", profile.worker_id, orphan.task_id
                )
                self._requeue(orphan, now_ms)
        profile.last_heartbeat_ms = now_ms
        profile.busy = False
        profile.current_task = None
        self.catalog.insert(profile)

    def heartbeat(self, worker_id: str, ts_ms: int, busy: bool) -> bool:
        """Record liveness; returns False for unknown workers.

        Out-of-order beats (older timestamp than recorded) are ignored.
        The busy flag is informational only; the catalog's busy state is
        maintained by dispatch/completion bookkeeping.
        """
        profile = self.catalog.workers.get(worker_id)
        if profile is None:
            return False
        if ts_ms >= profile.last_heartbeat_ms:
            profile.last_heartbeat_ms = ts_ms
        return True

    def evict_stale(self, now_ms: int) -> list[str]:
        """Drop workers whose last beat is older than the liveness window;
        re-queue any task they held. Returns the evicted worker ids."""
        window = self.config.liveness_window_ms
        stale = [
            wid
            for wid, profile in self.catalog.workers.items()
            if now_ms - profile.last_heartbeat_ms > window
        ]
        for wid in stale:
            profile = self.catalog.remove(wid)
            logger.warning("evicting worker %s (no heartbeat for > %d ms)", wid, window)
            if profile.current_task is not None:
                self._requeue(self.tasks[profile.current_task], now_ms)
        return stale

    # -- tasks ---------------------------------------------------------------

    def enqueue_task(self, task: TaskDescriptor, now_ms: int) -> None:
        if task.task_id in self._seen_task_ids:
            raise DuplicateTaskError(task.task_id)
        if task.state is not TaskState.QUEUED:
            raise ValueError(f"task {task.task_id} submitted in state {task.state}")
        task.timing.submitted_ms = now_ms
        self._seen_task_ids.add(task.task_id)
        self._enqueue_seq[task.task_id] = self._next_seq
        self._next_seq += 1
        self.tasks[task.task_id] = task
        self.queue.append(task.task_id)

    def schedule_round(self, now_ms: int) -> list[tuple[str, str]]:
        """One FCFS pass over the queue; returns (task_id, worker_id)
        assignments made.

        Each task draws from its eligible ring (GPU ring for GPU tasks;
        CPU ring otherwise, falling back to the GPU ring only when no
        CPU worker exists). A task with no idle eligible worker stays
        queued without blocking tasks of the other class. GPU tasks with
        no GPU worker registered at all fail once they outlive the
        unschedulable timeout.
        """
        assignments: list[tuple[str, str]] = []
        blocked: set[int] = set()  # id() of rings with no idle worker left
        remaining: list[str] = []
        for task_id in self.queue:
            task = self.tasks[task_id]
            if task.requires_gpu:
                ring = self.catalog.gpu_ring
                if not ring.ids:
                    age = now_ms - (task.timing.submitted_ms or 0)
                    if age > self.config.unschedulable_timeout_ms:
                        task.error = UNSCHEDULABLE_ERROR
                        self._transition(task, TaskState.FAILED, now_ms)
                        continue
                    remaining.append(task_id)
                    continue
            else:
                ring = self.catalog.cpu_ring
                if not ring.ids:
                    ring = self.catalog.gpu_ring
                    if not ring.ids:
                        remaining.append(task_id)
                        continue
            if id(ring) in blocked:
                remaining.append(task_id)
                continue
            worker_id = ring.take_idle(self.catalog.workers)
            if worker_id is None:
                blocked.add(id(ring))
                remaining.append(task_id)
                continue
            profile = self.catalog.workers[worker_id]
            profile.busy = True
            profile.current_task = task_id
            task.assigned_worker = worker_id
            task.timing.dispatched_ms = now_ms
            self._transition(task, TaskState.DISPATCHED, now_ms)
            assignments.append((task_id, worker_id))
        self.queue = remaining
        return assignments

    def complete_task(
        self,
        task_id: str,
        worker_id: str,
        ok: bool,
        exec_ms: int,
        now_ms: int,
        error: str | None = None,
    ) -> bool:
        """Finish a dispatched task. Reports from a worker other than the
        current assignee are stale (the task was re-queued) and ignored;
        returns False for them."""
        task = self.tasks.get(task_id)
        if task is None or task.state is not TaskState.DISPATCHED or task.assigned_worker != worker_id:
            logger.warning("ignoring stale result for %s from %s", task_id, worker_id)
            return False
        task.timing.completed_ms = now_ms
        task.timing.exec_ms = exec_ms
        if ok:
            self._transition(task, TaskState.COMPLETED, now_ms)
        else:
            task.error = error or "task failed"
            self._transition(task, TaskState.FAILED, now_ms)
        profile = self.catalog.workers.get(worker_id)
        if profile is not None:
            profile.busy = False
            profile.current_task = None
        return True
