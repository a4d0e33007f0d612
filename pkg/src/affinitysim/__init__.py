"""Deterministic simulator for affinity-key data/compute collocation.

A sharded in-memory K/V store routes objects and the tasks their puts
trigger by hashing an affinity label extracted from the request key with
a per-pool regex.  A synthetic three-stage inference pipeline drives the
store, and a harness replays identical traces under random vs affinity
placement to measure the latency effect of collocation.
"""

from .core import (Descriptor, OpKind, PoolRegistry, PoolSpec, ShardId,
                   extract_affinity_key, fnv1a64, resolve_pool, shard_for,
                   shard_index_for, validate_key)
from .compute import Handler, PutSpec, StepLabel, TaskInstance, UdlRegistration
from .errors import (BadConfig, BadRegex, DeadlockDetected, DuplicatePool,
                     DuplicatePrefix, InsufficientNodes, MalformedKey,
                     NoSuchPool, ObjectMissing, SimError, TraceMismatch)
from .harness import (ExperimentConfig, LatencyRecord, MetricsReport, Strategy,
                      compare, default_table_path, load_experiment_config,
                      run_experiment, validate_regex)
from .netsim import (Cluster, ClusterLayout, EventLoop, LinkModel,
                     PoolGroupSpec, build_cluster, run_until_idle,
                     transfer_time)
from .store import DataObject, PutMode, PutRecord, Store
from .workload import (ActorTrack, FrameTrace, WorkloadConfig, client_source,
                       generate_trace)

__version__ = "0.1.0"
