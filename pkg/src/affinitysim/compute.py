"""Trigger-driven task runtime.

Handlers register under key prefixes; a put whose key matches a prefix
fires an upcall at the home shard's designated member.  Tasks queue per
(node, affinity key) and tasks sharing a queue run strictly in put order;
tasks in different queues contend only for the node's workers.

A task's life is: queue until it reaches its queue head, then a fetch
phase (blocking gets and prefix lists, which may suspend on transfers or
absent keys), then one contiguous service interval on a node worker, then
its output puts.  Fetch waits are I/O and hold no worker; workers are
granted in trigger order once a timestamp's activity has settled, so runs
are reproducible and two tasks with equal affinity keys can never overlap.
"""

from __future__ import annotations

import heapq
from collections import deque
from dataclasses import dataclass
from enum import Enum

from .core import is_segment_prefix, validate_key
from .errors import DuplicatePrefix
from .store import DataObject, PutMode, Store


class StepLabel(Enum):
    MOT = "MOT"
    PRED = "PRED"
    CD = "CD"
    OTHER = "OTHER"


class TaskState(Enum):
    QUEUED = "queued"
    RUNNING = "running"
    SUSPENDED = "suspended"
    DONE = "done"
    FAILED = "failed"


@dataclass(frozen=True)
class UdlRegistration:
    prefix: str
    handler_id: str
    step: StepLabel


@dataclass(frozen=True)
class PutSpec:
    """A put a handler wants issued when its task completes."""

    key: str
    size: int
    mode: PutMode = PutMode.VOLATILE
    meta: object = None


class Handler:
    """Base class for user-defined logic fired by key-prefix upcalls.

    Subclasses decide what a task fetches, how long its service takes, and
    what it puts downstream.  Handlers must be deterministic functions of
    the task, the triggering object, and the fetched inputs.
    """

    step: StepLabel = StepLabel.OTHER

    def plan(self, task: "TaskInstance", trigger_obj: DataObject) -> list:
        """Fetch plan: a list of ("get", key) / ("list", prefix) ops."""
        return []

    def service_us(self, task: "TaskInstance", fetched: list) -> int:
        """Worker time the task consumes once all inputs are fetched."""
        return 0

    def outputs(self, task: "TaskInstance", fetched: list) -> list[PutSpec]:
        """Downstream puts issued at task completion."""
        return []


class UdlRegistry:
    def __init__(self):
        self._regs: dict[str, UdlRegistration] = {}

    def register(self, prefix: str, handler_id: str, step: StepLabel) -> UdlRegistration:
        validate_key(prefix)
        if prefix in self._regs:
            raise DuplicatePrefix(f"handler already registered for {prefix!r}")
        reg = UdlRegistration(prefix, handler_id, step)
        self._regs[prefix] = reg
        return reg

    def match(self, key: str) -> UdlRegistration | None:
        """Longest registered prefix matching ``key`` at a segment boundary."""
        best = None
        for prefix, reg in self._regs.items():
            if is_segment_prefix(prefix, key):
                if best is None or len(prefix) > len(best.prefix):
                    best = reg
        return best


class TaskInstance:
    __slots__ = ("task_id", "key", "label", "qkey", "node", "fired_at", "fired_seq",
                 "store_seq", "step", "handler", "trigger_obj", "state",
                 "started_at", "done_at", "fetch_us", "service_time",
                 "remote_bytes", "cache_hits", "cache_misses",
                 "plan", "plan_pos", "fetched", "error")

    def __init__(self, task_id, key, label, qkey, node, fired_at, fired_seq,
                 store_seq, step, handler, trigger_obj):
        self.task_id = task_id
        self.key = key
        self.label = label
        self.qkey = qkey
        self.node = node
        self.fired_at = fired_at
        self.fired_seq = fired_seq
        self.store_seq = store_seq
        self.step = step
        self.handler = handler
        self.trigger_obj = trigger_obj
        self.state = TaskState.QUEUED
        self.started_at = None
        self.done_at = None
        self.fetch_us = 0
        self.service_time = 0
        self.remote_bytes = 0
        self.cache_hits = 0
        self.cache_misses = 0
        self.plan = []
        self.plan_pos = 0
        self.fetched = []
        self.error = None


class TaskRuntime:
    """Queues, workers, and the upcall dispatcher for one cluster."""

    def __init__(self, loop, store: Store, workers_for_node):
        self.loop = loop
        self.store = store
        self.udl = UdlRegistry()
        self.handlers: dict[str, Handler] = {}
        self._workers_for_node = workers_for_node
        self._queues: dict[tuple[int, str], deque] = {}
        self._busy: dict[int, int] = {}
        self._pending: dict[int, list] = {}
        self._task_seq = 0
        self.tasks_done = 0
        self.tasks_created = 0
        self.task_log: list[TaskInstance] = []
        self.failed_tasks: list[TaskInstance] = []
        store.trigger_sink = self.dispatch

    def register_udl(self, prefix: str, handler_id: str, handler: Handler,
                     step: StepLabel | None = None) -> UdlRegistration:
        reg = self.udl.register(prefix, handler_id, step or handler.step)
        self.handlers[handler_id] = handler
        return reg

    # -- dispatch ------------------------------------------------------------

    def dispatch(self, key, pool, shard_idx, label, node, obj, store_seq):
        """Upcall entry: fire a task if a registered prefix matches the put."""
        reg = self.udl.match(key)
        if reg is None:
            return None
        self._task_seq += 1
        self.tasks_created += 1
        task = TaskInstance(
            task_id=self._task_seq,
            key=key,
            label=label,
            qkey=label if label is not None else key,
            node=node,
            fired_at=self.loop.now,
            fired_seq=self._task_seq,
            store_seq=store_seq,
            step=reg.step,
            handler=self.handlers[reg.handler_id],
            trigger_obj=obj,
        )
        queue = self._queues.setdefault((node, task.qkey), deque())
        queue.append(task)
        if len(queue) == 1:
            self._begin(task)
        return task

    # -- fetch phase ---------------------------------------------------------

    def _begin(self, task: TaskInstance):
        task.started_at = self.loop.now
        task.state = TaskState.RUNNING
        try:
            task.plan = task.handler.plan(task, task.trigger_obj)
        except Exception as exc:  # handler bugs must not crash the engine
            self._fail(task, exc)
            return
        task.plan_pos = 0
        self._advance_fetch(task)

    def _advance_fetch(self, task: TaskInstance):
        while task.plan_pos < len(task.plan):
            op = task.plan[task.plan_pos]
            if op[0] == "get":
                key = op[1]
                outcome, obj, cost = self.store.try_get(key, task.node)
                if outcome == "absent":
                    task.state = TaskState.SUSPENDED
                    self.store.add_waiter(
                        key, lambda obj, stored, t=task: self._waiter_wake(t, obj, stored))
                    return
                self.store.account_get(task.node, outcome, obj)
                if outcome == "cache":
                    task.cache_hits += 1
                else:
                    task.cache_misses += 1
                if outcome == "remote":
                    task.remote_bytes += obj.size
                task.fetched.append(obj)
                task.plan_pos += 1
                if cost > 0:
                    task.state = TaskState.SUSPENDED
                    self.loop.schedule(self.loop.now + cost, self._resume_fetch, task)
                    return
            elif op[0] == "list":
                prefix = op[1]
                objs, cost, remote = self.store.list_prefix(
                    prefix, task.node, up_to_seq=task.store_seq)
                task.remote_bytes += remote
                task.fetched.append(objs)
                task.plan_pos += 1
                if cost > 0:
                    task.state = TaskState.SUSPENDED
                    self.loop.schedule(self.loop.now + cost, self._resume_fetch, task)
                    return
            else:
                raise ValueError(f"unknown fetch op {op!r}")
        self._fetch_complete(task)

    def _waiter_wake(self, task: TaskInstance, obj: DataObject, stored: bool):
        task.state = TaskState.RUNNING
        if stored:
            # the awaited put has landed; retry the same plan step
            self._advance_fetch(task)
            return
        # trigger-mode put: the object was never stored, so hand the
        # transient copy straight to the waiter and charge one delivery
        self.store.account_get(task.node, "remote", obj)
        task.cache_misses += 1
        task.remote_bytes += obj.size
        task.fetched.append(obj)
        task.plan_pos += 1
        cost = self.store.link.transfer_time(obj.size, False)
        if cost > 0:
            task.state = TaskState.SUSPENDED
            self.loop.schedule(self.loop.now + cost, self._resume_fetch, task)
        else:
            self._advance_fetch(task)

    def _resume_fetch(self, task: TaskInstance):
        task.state = TaskState.RUNNING
        self._advance_fetch(task)

    # -- service phase ---------------------------------------------------------

    def _fetch_complete(self, task: TaskInstance):
        task.fetch_us = self.loop.now - task.started_at
        try:
            task.service_time = task.handler.service_us(task, task.fetched)
        except Exception as exc:
            self._fail(task, exc)
            return
        if task.service_time <= 0:
            self._finish(task)
            return
        node = task.node
        heapq.heappush(self._pending.setdefault(node, []),
                       (task.fired_at, task.fired_seq, task))
        self.loop.request_settle(("workers", node), lambda n=node: self._drain(n))

    def _drain(self, node: int):
        """Grant free workers to pending tasks in trigger order.

        Runs at timestamp settlement, after every event at the current
        instant has been processed, so grants never depend on the order
        same-instant requests happened to arrive.
        """
        busy = self._busy.get(node, 0)
        capacity = self._workers_for_node(node)
        pending = self._pending.get(node)
        while pending and busy < capacity:
            _, _, task = heapq.heappop(pending)
            busy += 1
            self.loop.schedule(self.loop.now + task.service_time,
                               self._service_end, task)
        self._busy[node] = busy

    def _service_end(self, task: TaskInstance):
        self._busy[task.node] -= 1
        self._finish(task)
        node = task.node
        self.loop.request_settle(("workers", node), lambda n=node: self._drain(n))

    def _finish(self, task: TaskInstance):
        task.done_at = self.loop.now
        task.state = TaskState.DONE
        try:
            puts = task.handler.outputs(task, task.fetched)
        except Exception as exc:
            self._fail(task, exc)
            return
        self.tasks_done += 1
        for spec in puts:
            self.store.put(spec.key, spec.size, spec.mode, origin=task.node,
                           meta=spec.meta)
        self.task_log.append(task)
        self._advance_queue(task)

    def _fail(self, task: TaskInstance, exc: Exception):
        """Record a handler failure; downstream simply never fires."""
        task.done_at = self.loop.now
        task.state = TaskState.FAILED
        task.error = f"{type(exc).__name__}: {exc}"
        self.tasks_done += 1
        self.failed_tasks.append(task)
        self.task_log.append(task)
        self._advance_queue(task)

    def _advance_queue(self, task: TaskInstance):
        queue = self._queues[(task.node, task.qkey)]
        head = queue.popleft()
        assert head is task, "queue head must complete first"
        if queue:
            self._begin(queue[0])
        else:
            del self._queues[(task.node, task.qkey)]

    # -- inspection -------------------------------------------------------------

    def unfinished(self) -> int:
        return self.tasks_created - self.tasks_done

    def busy_workers(self, node: int) -> int:
        return self._busy.get(node, 0)

    def log_rows(self):
        """Run-log rows: fired_at_us,start_us,done_us,node,step,key,affinity_key,fetch_us,service_us,remote_bytes."""
        rows = []
        for t in self.task_log:
            rows.append((t.fired_at, t.started_at, t.done_at, t.node, t.step.value,
                         t.key, t.label or "", t.fetch_us, t.service_time,
                         t.remote_bytes))
        return rows
