"""Deterministic discrete-event engine, cluster layouts, and the link model.

Virtual time is integer microseconds.  Events run in (time, creation
sequence) order, so two runs over the same inputs produce bit-identical
logs.  The loop settles each timestamp in two phases: first every event
scheduled at the current instant (including cascades they create), then
deferred "settlement" callbacks such as worker grants.  Deferring grants
until the instant has fully settled is what keeps scheduling independent
of the arbitrary arrival order of same-instant requests.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from heapq import heappop, heappush

from .core import PoolSpec
from .errors import DeadlockDetected, InsufficientNodes
from .compute import Handler, StepLabel, TaskRuntime
from .store import Store


@dataclass(frozen=True)
class LinkModel:
    """Uniform all-pairs link: one-way latency plus size over bandwidth.

    The default bandwidth is a 100 Gbps backbone (12,500 bytes/us); the
    50 us latency is a representative RDMA-cluster figure and a config
    knob, not a measured claim.  Same-node transfers are free.
    """

    latency_us: int = 50
    bandwidth_bytes_per_us: int = 12500

    def __post_init__(self):
        if self.latency_us < 0:
            raise ValueError("latency must be >= 0")
        if self.bandwidth_bytes_per_us <= 0:
            raise ValueError("bandwidth must be > 0")

    def transfer_time(self, nbytes: int, local: bool) -> int:
        if nbytes < 0:
            raise ValueError("cannot transfer a negative byte count")
        if local:
            return 0
        return self.latency_us + nbytes // self.bandwidth_bytes_per_us


def transfer_time(nbytes: int, local: bool, link: LinkModel | None = None) -> int:
    """Transfer duration in whole microseconds under ``link`` (or defaults)."""
    return (link or LinkModel()).transfer_time(nbytes, local)


class EventLoop:
    """Priority-queue event loop over integer virtual time."""

    def __init__(self):
        self.now = 0
        self._heap = []
        self._seq = 0
        self._settlers: dict = {}
        self.events_run = 0

    def schedule(self, at: int, fn, *args):
        if at < self.now:
            raise AssertionError(f"causality violation: {at} < now {self.now}")
        heappush(self._heap, (at, self._seq, fn, args))
        self._seq += 1

    def schedule_in(self, delay: int, fn, *args):
        self.schedule(self.now + delay, fn, *args)

    def request_settle(self, key, fn):
        """Run ``fn`` once the current instant has no more events pending.

        Repeat requests under the same key before settlement collapse into
        one call.
        """
        self._settlers.setdefault(key, fn)

    def run(self) -> int:
        heap = self._heap
        while True:
            if heap and heap[0][0] == self.now:
                _, _, fn, args = heappop(heap)
                self.events_run += 1
                fn(*args)
                continue
            if self._settlers:
                settlers = self._settlers
                self._settlers = {}
                for fn in settlers.values():
                    fn()
                continue
            if heap:
                self.now = heap[0][0]
                continue
            return self.now


@dataclass
class PoolGroupSpec:
    """A placement group: pools that share one shard-to-node mapping.

    Shard i of every pool in the group lives on the same member nodes,
    which is how objects from sibling pools with equal affinity labels end
    up collocated on one physical server.
    """

    name: str
    shard_count: int
    replication_factor: int = 1
    pools: list = field(default_factory=list)  # (path, affinity_regex | None)
    workers_per_node: int | None = None

    def node_demand(self) -> int:
        return self.shard_count * self.replication_factor


@dataclass
class ClusterLayout:
    """Node groups, clients, link parameters, and worker capacity."""

    groups: list  # list[PoolGroupSpec]
    client_names: list = field(default_factory=list)
    link: LinkModel = field(default_factory=LinkModel)
    workers_per_node: int = 1
    cache_enabled: bool = True
    cache_capacity_bytes: int | None = None

    def server_nodes(self) -> int:
        return sum(g.node_demand() for g in self.groups)

    def total_nodes(self) -> int:
        return self.server_nodes() + len(self.client_names)


class Cluster:
    """One simulated deployment: nodes, store, task runtime, event loop."""

    def __init__(self, link: LinkModel | None = None, max_nodes: int | None = None,
                 workers_per_node: int = 1, cache_enabled: bool = True,
                 cache_capacity_bytes: int | None = None):
        self.loop = EventLoop()
        self.link = link or LinkModel()
        self.max_nodes = max_nodes
        self._next_node = 0
        self._node_workers: dict[int, int] = {}
        self.default_workers = workers_per_node
        self._group_members: dict[str, list] = {}
        self._group_geometry: dict[str, tuple[int, int]] = {}
        self.client_nodes: dict[str, int] = {}
        self.store = Store(self.loop, self.link, cache_enabled=cache_enabled,
                           cache_capacity_bytes=cache_capacity_bytes)
        self.runtime = TaskRuntime(self.loop, self.store, self.workers_for_node)

    # -- node allocation -----------------------------------------------------

    def _alloc_node(self, workers: int | None = None) -> int:
        if self.max_nodes is not None and self._next_node >= self.max_nodes:
            raise InsufficientNodes(
                f"cluster limited to {self.max_nodes} nodes")
        node = self._next_node
        self._next_node += 1
        if workers is not None:
            self._node_workers[node] = workers
        return node

    def workers_for_node(self, node: int) -> int:
        return self._node_workers.get(node, self.default_workers)

    @property
    def node_count(self) -> int:
        return self._next_node

    def add_client(self, name: str) -> int:
        node = self._alloc_node()
        self.client_nodes[name] = node
        return node

    # -- pools and handlers -------------------------------------------------

    def create_object_pool(self, path: str, shard_count: int,
                           replication_factor: int = 1,
                           affinity_regex: str | None = None,
                           placement_group: str | None = None,
                           workers_per_node: int | None = None) -> PoolSpec:
        """Register a pool on every node, allocating shard members.

        Pools sharing ``placement_group`` reuse the group's member nodes
        and must match its shard geometry.
        """
        spec = PoolSpec(path, shard_count, replication_factor,
                        affinity_regex=affinity_regex,
                        placement_group=placement_group)
        group = spec.placement_group
        if group in self._group_members:
            if self._group_geometry[group] != (shard_count, replication_factor):
                raise InsufficientNodes(
                    f"pool {path!r} wants {shard_count}x{replication_factor} but "
                    f"group {group!r} has {self._group_geometry[group]}")
            members = self._group_members[group]
        else:
            members = [
                [self._alloc_node(workers_per_node) for _ in range(replication_factor)]
                for _ in range(shard_count)
            ]
            self._group_members[group] = members
            self._group_geometry[group] = (shard_count, replication_factor)
        return self.store.add_pool(spec, members)

    def register_udl(self, prefix: str, handler_id: str, handler: Handler,
                     step: StepLabel | None = None):
        return self.runtime.register_udl(prefix, handler_id, handler, step)

    # -- running ---------------------------------------------------------------

    def run_until_idle(self) -> int:
        """Drain all events; raise DeadlockDetected if tasks remain stuck."""
        final = self.loop.run()
        if self.runtime.unfinished() > 0:
            blocked = self.store.blocked_keys()
            raise DeadlockDetected(
                f"{self.runtime.unfinished()} task(s) never completed; "
                f"blocked on keys: {blocked[:5]}")
        return final


def build_cluster(layout: ClusterLayout) -> Cluster:
    """Instantiate nodes, shards, and pools for a layout; run starts at t=0."""
    cluster = Cluster(link=layout.link, max_nodes=layout.total_nodes(),
                      workers_per_node=layout.workers_per_node,
                      cache_enabled=layout.cache_enabled,
                      cache_capacity_bytes=layout.cache_capacity_bytes)
    for group in layout.groups:
        for path, regex in group.pools:
            cluster.create_object_pool(
                path, group.shard_count, group.replication_factor,
                affinity_regex=regex, placement_group=group.name,
                workers_per_node=group.workers_per_node)
    for name in layout.client_names:
        cluster.add_client(name)
    return cluster


def run_until_idle(cluster: Cluster) -> int:
    return cluster.run_until_idle()
