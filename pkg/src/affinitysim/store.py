"""Sharded volatile K/V object store with per-node caches.

The store is owned by the simulation engine: puts and gets happen at
virtual-time instants, and every mutation is applied inside an engine
event.  A volatile put is visible (and triggers any handler) only once the
slowest replica transfer has finished; a trigger put fires its handler at
the designated member and stores nothing.

Gets resolve in a fixed order: requester cache, local shard replica,
remote fetch.  The first two are free; a remote fetch costs one link
transfer and is charged to the remote-byte ledger.
"""

from __future__ import annotations

from bisect import bisect_left, insort
from collections import OrderedDict
from dataclasses import dataclass
from enum import Enum

from .core import PoolRegistry, PoolSpec, affinity_key_for, fnv1a64, shard_index_for, validate_key
from .errors import InsufficientNodes, NoSuchPool, ObjectMissing


class PutMode(Enum):
    TRIGGER = "trigger"
    VOLATILE = "volatile"


class DataObject:
    """A stored value: key plus an opaque payload of a declared size.

    Payloads are synthetic unless a caller supplies real bytes; the cost
    model only ever reads ``size``.  ``meta`` carries small structured
    metadata that in a real deployment would travel inside the payload.
    """

    __slots__ = ("key", "size", "payload", "meta", "version", "created_at", "stored_seq")

    def __init__(self, key, size, payload=None, meta=None, version=1,
                 created_at=0, stored_seq=0):
        self.key = key
        self.size = size
        self.payload = payload
        self.meta = meta
        self.version = version
        self.created_at = created_at
        self.stored_seq = stored_seq

    def __repr__(self):
        return f"DataObject({self.key!r}, size={self.size}, v{self.version})"


@dataclass
class PutRecord:
    """One put, as it appears in the engine's put ledger."""

    key: str
    pool: str
    shard: int
    label: str | None
    origin: int
    mode: PutMode
    size: int
    issued_at: int
    completed_at: int
    max_transfer: int


class _NodeCache:
    """Per-node object cache; unbounded unless a byte budget is set."""

    def __init__(self, capacity_bytes=None):
        self.capacity = capacity_bytes
        self.entries: OrderedDict[str, DataObject] = OrderedDict()
        self.bytes = 0

    def get(self, key):
        obj = self.entries.get(key)
        if obj is not None and self.capacity is not None:
            self.entries.move_to_end(key)
        return obj

    def put(self, obj: DataObject):
        old = self.entries.pop(obj.key, None)
        if old is not None:
            self.bytes -= old.size
        self.entries[obj.key] = obj
        self.bytes += obj.size
        if self.capacity is not None:
            while self.bytes > self.capacity and len(self.entries) > 1:
                _, evicted = self.entries.popitem(last=False)
                self.bytes -= evicted.size


class _ShardState:
    __slots__ = ("members", "objects", "sorted_keys")

    def __init__(self, members):
        self.members = list(members)
        self.objects: dict[str, DataObject] = {}
        self.sorted_keys: list[str] = []


class _PoolState:
    __slots__ = ("spec", "shards")

    def __init__(self, spec: PoolSpec, members_per_shard):
        self.spec = spec
        self.shards = [_ShardState(m) for m in members_per_shard]


class Store:
    """All shard, cache, and accounting state for one simulated cluster."""

    def __init__(self, loop, link, cache_enabled=True, cache_capacity_bytes=None):
        self.loop = loop
        self.link = link
        self.cache_enabled = cache_enabled
        self.cache_capacity_bytes = cache_capacity_bytes
        self.registry = PoolRegistry()
        self._pools: dict[str, _PoolState] = {}
        self._caches: dict[int, _NodeCache] = {}
        self._waiters: dict[str, list] = {}
        self._store_seq = 0
        # callback(key, pool_state, shard_idx, label, node, obj, store_seq)
        self.trigger_sink = None
        # accounting
        self.remote_fetch_bytes = 0
        self.replication_bytes = 0
        self.cache_hits = 0
        self.cache_misses = 0
        self.affinity_fallbacks = 0
        self.put_log: list[PutRecord] = []

    # -- pool management ---------------------------------------------------

    def add_pool(self, spec: PoolSpec, members_per_shard) -> PoolSpec:
        if len(members_per_shard) != spec.shard_count:
            raise InsufficientNodes(
                f"pool {spec.path!r} needs {spec.shard_count} shards, "
                f"got {len(members_per_shard)} member sets")
        for members in members_per_shard:
            if len(members) != spec.replication_factor or len(set(members)) != len(members):
                raise InsufficientNodes(
                    f"pool {spec.path!r} needs {spec.replication_factor} "
                    f"distinct nodes per shard, got {members}")
        self.registry.register(spec)
        self._pools[spec.path] = _PoolState(spec, members_per_shard)
        return spec

    def pool_state(self, path: str) -> _PoolState:
        return self._pools[path]

    def _cache(self, node: int) -> _NodeCache:
        cache = self._caches.get(node)
        if cache is None:
            cache = self._caches[node] = _NodeCache(self.cache_capacity_bytes)
        return cache

    def _resolve(self, key: str) -> _PoolState:
        spec = self.registry.resolve(key)
        return self._pools[spec.path]

    # -- puts ----------------------------------------------------------------

    def put(self, key: str, size: int, mode: PutMode, origin: int,
            payload=None, meta=None) -> PutRecord:
        """Route a put to its home shard and schedule delivery.

        VOLATILE puts complete (and fire any trigger) when the slowest
        member transfer finishes; TRIGGER puts deliver to the designated
        member only and store nothing.
        """
        validate_key(key)
        if size < 0:
            raise ValueError(f"negative payload size for {key!r}")
        pool = self._resolve(key)
        idx, label = shard_index_for(pool.spec, key)
        if pool.spec.pattern is not None and label is None:
            self.affinity_fallbacks += 1
        shard = pool.shards[idx]
        now = self.loop.now
        obj = DataObject(key, size, payload=payload, meta=meta, created_at=now)
        if self.cache_enabled:
            # the producing node keeps its own copy
            self._cache(origin).put(obj)

        designated = shard.members[fnv1a64(key) % len(shard.members)]
        if mode is PutMode.TRIGGER:
            transfer = self.link.transfer_time(size, origin == designated)
            if origin != designated:
                self.replication_bytes += size
            completion = now + transfer
            record = PutRecord(key, pool.spec.path, idx, label, origin, mode,
                               size, now, completion, transfer)
            self.put_log.append(record)
            self.loop.schedule(completion, self._deliver_trigger_put,
                               pool, idx, label, designated, obj)
            return record

        transfers = [self.link.transfer_time(size, origin == m) for m in shard.members]
        for m in shard.members:
            if m != origin:
                self.replication_bytes += size
        completion = now + max(transfers)
        record = PutRecord(key, pool.spec.path, idx, label, origin, mode,
                           size, now, completion, max(transfers))
        self.put_log.append(record)
        self.loop.schedule(completion, self._complete_volatile_put,
                           pool, idx, label, designated, obj)
        return record

    def _complete_volatile_put(self, pool, idx, label, designated, obj):
        shard = pool.shards[idx]
        self._store_seq += 1
        obj.stored_seq = self._store_seq
        prior = shard.objects.get(obj.key)
        if prior is not None:
            obj.version = prior.version + 1
        else:
            insort(shard.sorted_keys, obj.key)
        shard.objects[obj.key] = obj
        self._wake_waiters(obj, stored=True)
        if self.trigger_sink is not None:
            self.trigger_sink(obj.key, pool, idx, label, designated, obj, obj.stored_seq)

    def _deliver_trigger_put(self, pool, idx, label, designated, obj):
        # nothing stored: the object exists only for waiters and the upcall
        self._wake_waiters(obj, stored=False)
        if self.trigger_sink is not None:
            self.trigger_sink(obj.key, pool, idx, label, designated, obj, self._store_seq)

    def _wake_waiters(self, obj, stored):
        waiters = self._waiters.pop(obj.key, None)
        if waiters:
            for callback in waiters:
                callback(obj, stored)

    # -- gets ----------------------------------------------------------------

    def try_get(self, key: str, node: int):
        """Resolve a get without side effects.

        Returns (outcome, obj, cost_us) with outcome one of "cache",
        "local", "remote", "absent".
        """
        pool = self._resolve(key)
        if self.cache_enabled:
            obj = self._cache(node).get(key)
            if obj is not None:
                return "cache", obj, 0
        idx, _ = shard_index_for(pool.spec, key)
        shard = pool.shards[idx]
        obj = shard.objects.get(key)
        if obj is None:
            return "absent", None, 0
        if node in shard.members:
            return "local", obj, 0
        return "remote", obj, self.link.transfer_time(obj.size, False)

    def account_get(self, node: int, outcome: str, obj: DataObject):
        """Score one satisfied get: hit/miss counters, byte ledger, caching."""
        if outcome == "cache":
            self.cache_hits += 1
            return
        if self.cache_enabled:
            self.cache_misses += 1
            self._cache(node).put(obj)
        if outcome == "remote":
            self.remote_fetch_bytes += obj.size

    def get_nowait(self, key: str, node: int):
        """Non-blocking get: (obj, cost_us) or ObjectMissing."""
        outcome, obj, cost = self.try_get(key, node)
        if outcome == "absent":
            raise ObjectMissing(f"{key!r} is not stored")
        self.account_get(node, outcome, obj)
        return obj, cost

    def add_waiter(self, key: str, callback):
        """Suspend a caller until a put delivers ``key``."""
        self._resolve(key)  # NoSuchPool applies to blocking gets too
        self._waiters.setdefault(key, []).append(callback)

    def blocked_keys(self) -> list[str]:
        return list(self._waiters.keys())

    # -- listing ---------------------------------------------------------------

    def list_prefix(self, prefix: str, node: int, up_to_seq: int | None = None):
        """All stored objects whose key begins with ``prefix``.

        When the pool groups by affinity and the prefix itself carries a
        label, only that label's shard is consulted; otherwise every shard
        is queried in parallel and the cost is the slowest response.
        ``up_to_seq`` bounds visibility to objects stored at or before a
        given store sequence, which is how an upcall sees the store as of
        its own triggering put.

        Returns (objects, cost_us, remote_bytes).
        """
        validate_key(prefix)
        pool = self._resolve(prefix)
        label = affinity_key_for(pool.spec, prefix)
        if label is not None:
            indices = [fnv1a64(label) % pool.spec.shard_count]
        else:
            indices = range(pool.spec.shard_count)

        results: list[DataObject] = []
        cost = 0
        remote_bytes = 0
        for idx in indices:
            shard = pool.shards[idx]
            start = bisect_left(shard.sorted_keys, prefix)
            shard_objs = []
            for key in shard.sorted_keys[start:]:
                if not key.startswith(prefix):
                    break
                obj = shard.objects[key]
                if up_to_seq is not None and obj.stored_seq > up_to_seq:
                    continue
                shard_objs.append(obj)
            returned = sum(o.size for o in shard_objs)
            if node in shard.members:
                shard_cost = 0
            else:
                shard_cost = self.link.transfer_time(returned, False)
                remote_bytes += returned
            cost = max(cost, shard_cost)
            results.extend(shard_objs)
        results.sort(key=lambda o: o.key)
        self.remote_fetch_bytes += remote_bytes
        return results, cost, remote_bytes

    # -- end-of-run inspection ---------------------------------------------

    def dump_rows(self):
        """One row per stored replica: pool,shard,node,key,affinity_key,bytes,version."""
        rows = []
        for pool in self._pools.values():
            for idx, shard in enumerate(pool.shards):
                for key in shard.sorted_keys:
                    obj = shard.objects[key]
                    label = affinity_key_for(pool.spec, key) or ""
                    for node in shard.members:
                        rows.append((pool.spec.path, idx, node, key, label,
                                     obj.size, obj.version))
        return rows
