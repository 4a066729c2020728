"""Client-side helpers: submit jobs to a master and poll for completion."""

from __future__ import annotations

import socket
import time
import uuid

from . import protocol
from .protocol import (
    ErrorReply,
    JobStatus,
    JobStatusReply,
    Message,
    Submit,
    SubmitAck,
    SubmitTask,
)

TERMINAL_STATES = {"COMPLETED", "FAILED"}


class MasterUnreachable(ConnectionError):
    pass


class ClientError(RuntimeError):
    """The master answered with an ERROR reply."""


def new_id(prefix: str) -> str:
    return f"{prefix}-{uuid.uuid4().hex[:12]}"


def make_task(
    kind: str,
    payload: bytes = b"",
    requires_gpu: bool = False,
    params: dict[str, str] | None = None,
    task_id: str | None = None,
) -> SubmitTask:
    return SubmitTask(
        task_id=task_id or new_id("task"),
        kind=kind,
        requires_gpu=requires_gpu,
        params=dict(params or {}),
        payload_b64=protocol.to_b64(payload),
    )


class MasterClient:
    """One TCP connection speaking the request/reply subset of the protocol."""

    def __init__(self, host: str, port: int, connect_timeout_s: float = 5.0):
        try:
            self._sock = socket.create_connection((host, port), timeout=connect_timeout_s)
        except OSError as exc:
            raise MasterUnreachable(f"cannot reach master at {host}:{port}: {exc}") from exc
        self._sock.settimeout(None)
        self._framer = protocol.LineFramer()
        self._pending: list[Message] = []

    def close(self) -> None:
        self._sock.close()

    def __enter__(self) -> MasterClient:
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()

    def _recv(self) -> Message:
        while not self._pending:
            chunk = self._sock.recv(65536)
            if not chunk:
                raise MasterUnreachable("master closed the connection")
            self._pending.extend(protocol.decode(line) for line in self._framer.feed(chunk))
        return self._pending.pop(0)

    def _request(self, message: Message) -> Message:
        self._sock.sendall(protocol.encode(message))
        reply = self._recv()
        if isinstance(reply, ErrorReply):
            raise ClientError(f"{reply.code}: {reply.detail}")
        return reply

    def submit(self, tasks: list[SubmitTask], job_id: str | None = None) -> SubmitAck:
        job_id = job_id or new_id("job")
        reply = self._request(Submit(job_id=job_id, tasks=tuple(tasks)))
        if not isinstance(reply, SubmitAck):
            raise ClientError(f"unexpected reply to SUBMIT: {type(reply).__name__}")
        return reply

    def job_status(self, job_id: str) -> JobStatusReply:
        reply = self._request(JobStatus(job_id=job_id))
        if not isinstance(reply, JobStatusReply):
            raise ClientError(f"unexpected reply to JOB_STATUS: {type(reply).__name__}")
        return reply

    def wait_for_job(
        self,
        job_id: str,
        timeout_s: float | None = None,
        poll_interval_s: float = 0.1,
    ) -> JobStatusReply:
        """Poll JOB_STATUS until every task is terminal or the timeout
        expires; returns the last reply either way."""
        deadline = None if timeout_s is None else time.monotonic() + timeout_s
        while True:
            reply = self.job_status(job_id)
            if all(task.state in TERMINAL_STATES for task in reply.tasks):
                return reply
            if deadline is not None and time.monotonic() >= deadline:
                return reply
            time.sleep(poll_interval_s)
