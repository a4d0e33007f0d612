"""Key space, object pools, and affinity-key placement.

Request keys are slash-separated paths like ``/positions/little3_7_42``.
An object pool claims a pathname prefix and may carry an affinity regex.
The leftmost match of that regex against the full key text is the key's
affinity label; the label (not the key) is hashed to pick a shard, so any
two keys with equal labels land on the same shard.  Keys in a pool without
a regex, and keys the regex does not match, fall back to hashing the full
key text, which is the baseline random placement.

Everything here is a pure function of its inputs: extraction and shard
mapping must give the same answer on every node, so the hash is pinned to
FNV-1a 64 over UTF-8 bytes rather than anything platform-dependent.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum

from .errors import BadRegex, MalformedKey, NoSuchPool

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1

# Affinity regexes are restricted to a linear-time dialect: literals,
# character classes, +, *, ?, alternation, grouping, and anchors.
# Backreferences and lookaround would allow superlinear matching on the
# put path, so they are rejected outright.
_FORBIDDEN_CONSTRUCTS = re.compile(
    r"""
    \\[1-9]            # numeric backreference
    | \(\?P=           # named backreference
    | \(\?=            # lookahead
    | \(\?!            # negative lookahead
    | \(\?<=           # lookbehind
    | \(\?<!           # negative lookbehind
    | \(\?\(           # conditional group
    """,
    re.VERBOSE,
)


def fnv1a64(text: str) -> int:
    """FNV-1a 64-bit hash of the UTF-8 encoding of ``text``."""
    h = FNV64_OFFSET
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * FNV64_PRIME) & _MASK64
    return h


def validate_key(text: str) -> str:
    """Return ``text`` if it is a well-formed object key, else raise.

    A key is non-empty, starts with '/', contains no whitespace, and has
    no empty path segment.
    """
    if not isinstance(text, str) or not text:
        raise MalformedKey("key is empty")
    if not text.startswith("/"):
        raise MalformedKey(f"key {text!r} must start with '/'")
    if any(ch.isspace() for ch in text):
        raise MalformedKey(f"key {text!r} contains whitespace")
    for segment in text[1:].split("/"):
        if not segment:
            raise MalformedKey(f"key {text!r} has an empty path segment")
    return text


def is_segment_prefix(prefix: str, key: str) -> bool:
    """True when ``prefix`` matches ``key`` at a path-segment boundary.

    "/frames" matches "/frames/a" but not "/framesX/a".
    """
    return key == prefix or key.startswith(prefix + "/")


def compile_affinity_regex(pattern: str) -> re.Pattern:
    """Compile an affinity regex, rejecting non-linear constructs."""
    if not isinstance(pattern, str) or not pattern:
        raise BadRegex("affinity regex is empty")
    if _FORBIDDEN_CONSTRUCTS.search(pattern):
        raise BadRegex(f"regex {pattern!r} uses a disallowed construct")
    try:
        return re.compile(pattern)
    except re.error as exc:
        raise BadRegex(f"regex {pattern!r} does not compile: {exc}") from exc


def extract_affinity_key(pattern: str | re.Pattern, key: str) -> str | None:
    """Leftmost match of ``pattern`` in the full key text, or None.

    The matched substring is the affinity key.  Absence of a match is a
    value, not an error: such keys simply fall back to whole-key hashing.
    """
    if isinstance(pattern, str):
        pattern = compile_affinity_regex(pattern)
    m = pattern.search(key)
    return m.group(0) if m else None


class OpKind(Enum):
    PUT_VOLATILE = "put_volatile"
    PUT_TRIGGER = "put_trigger"
    GET = "get"
    LIST = "list"


@dataclass(frozen=True)
class Descriptor:
    """Metadata describing a storage or compute request to be placed."""

    key: str
    op_kind: OpKind = OpKind.PUT_VOLATILE


@dataclass(frozen=True)
class ShardId:
    pool: str
    index: int


class PoolSpec:
    """An object pool: path prefix, shard count, replication, optional regex."""

    __slots__ = ("path", "shard_count", "replication_factor", "affinity_regex",
                 "pattern", "placement_group")

    def __init__(self, path: str, shard_count: int, replication_factor: int = 1,
                 affinity_regex: str | None = None, placement_group: str | None = None):
        validate_key(path)
        if shard_count < 1:
            raise ValueError(f"shard_count must be >= 1, got {shard_count}")
        if replication_factor < 1:
            raise ValueError(f"replication_factor must be >= 1, got {replication_factor}")
        self.path = path
        self.shard_count = shard_count
        self.replication_factor = replication_factor
        self.affinity_regex = affinity_regex
        self.pattern = compile_affinity_regex(affinity_regex) if affinity_regex else None
        # Pools sharing a placement group (and shard geometry) map shard i
        # to the same member nodes, which is what makes e.g. frame and
        # state objects with equal labels land on one physical node.
        self.placement_group = placement_group if placement_group is not None else path

    def __repr__(self):
        return (f"PoolSpec({self.path!r}, shards={self.shard_count}, "
                f"r={self.replication_factor}, regex={self.affinity_regex!r})")


def affinity_key_for(pool: PoolSpec, key: str) -> str | None:
    """The pool's affinity label for ``key``, or None when ungrouped."""
    if pool.pattern is None:
        return None
    return extract_affinity_key(pool.pattern, key)


def shard_index_for(pool: PoolSpec, key: str) -> tuple[int, str | None]:
    """Shard index and the affinity label that produced it (None = fallback).

    With a label the hash input is the label; otherwise the full key text,
    which reproduces baseline random placement.
    """
    label = affinity_key_for(pool, key)
    basis = label if label is not None else key
    return fnv1a64(basis) % pool.shard_count, label


def shard_for(pool: PoolSpec, key: str) -> ShardId:
    index, _ = shard_index_for(pool, key)
    return ShardId(pool.path, index)


class PoolRegistry:
    """The set of registered pools, resolvable by key prefix."""

    def __init__(self):
        self._pools: dict[str, PoolSpec] = {}

    def register(self, pool: PoolSpec) -> PoolSpec:
        from .errors import DuplicatePool
        for existing in self._pools.values():
            if existing.path == pool.path:
                raise DuplicatePool(f"pool {pool.path!r} already registered")
            if is_segment_prefix(existing.path, pool.path) or \
               is_segment_prefix(pool.path, existing.path):
                raise DuplicatePool(
                    f"pool {pool.path!r} nests with existing pool {existing.path!r}")
        self._pools[pool.path] = pool
        return pool

    def resolve(self, key: str) -> PoolSpec:
        """The unique pool whose prefix matches ``key`` at a segment boundary."""
        for pool in self._pools.values():
            if is_segment_prefix(pool.path, key):
                return pool
        raise NoSuchPool(f"no pool prefix matches {key!r}")

    def pools(self) -> list[PoolSpec]:
        return list(self._pools.values())

    def __contains__(self, path: str) -> bool:
        return path in self._pools

    def __len__(self):
        return len(self._pools)


def resolve_pool(key: str, registry: PoolRegistry) -> PoolSpec:
    return registry.resolve(key)
