"""Synthetic 3-stage pipeline workload: clients, frames, actors, handlers.

Clients stream video-frame puts at a fixed rate.  A tracking task (MOT)
fires per frame, reads the previous frame's state, and emits one position
per live actor plus the new state.  A prediction task (PRED) fires per
position and, once an actor has eight consecutive positions, reads the
prior seven and emits a trajectory prediction.  A collision task (CD)
fires per prediction, lists every prediction for the same frame, and
emits one result object.

The trace (which actors live in which frames) replaces a real video
dataset: it is a deterministic function of the workload seed, so the same
trace can be replayed under different placement strategies.  Object sizes
and service times are config knobs; the defaults are calibrated so a
single client is stable on a 1/1/1 layout and three clients saturate it.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

from .compute import Handler, PutSpec, StepLabel
from .core import fnv1a64
from .errors import BadConfig
from .rng import SplitMix64, mix
from .store import PutMode

# The shipped affinity regexes: one groups per client ("/little3_"), the
# other per client+leading-number ("/little3_7_"), which reads as actor
# for position keys and frame for prediction keys.
CLIENT_REGEX = "/[a-zA-Z0-9]+_"
CLIENT_NUMBER_REGEX = "/[a-zA-Z0-9]+_[0-9]+_"

FRAMES_POOL = "/frames"
STATES_POOL = "/states"
POSITIONS_POOL = "/positions"
PREDICTIONS_POOL = "/predictions"
CD_POOL = "/cd"

DEFAULT_CLIENTS = ("little3", "hyang5", "gates3")


@dataclass
class WorkloadConfig:
    clients: tuple = DEFAULT_CLIENTS
    fps: float = 2.5
    frames: int = 700
    warmup_discard: int = 100
    past_positions: int = 8       # positions required before predicting
    predicted_positions: int = 12  # positions per emitted trajectory
    frame_bytes: int = 8 * 1024 * 1024
    state_base_bytes: int = 16 * 1024
    state_per_actor_bytes: int = 200 * 1024
    state_cap_bytes: int = 10 * 1024 * 1024
    position_bytes: int = 64
    prediction_bytes: int = 0     # 0 -> predicted_positions * 16
    cd_result_bytes: int = 16
    max_actors: int = 49
    actor_arrival_rate: float = 0.8   # expected new actors per frame
    actor_lifetime_mean: float = 14.0  # frames, geometric
    collision_prob: float = 0.05
    mot_base_us: int = 120_000
    mot_per_actor_us: int = 2_000
    pred_us: int = 40_000
    cd_per_pair_us: int = 500
    rng_seed: int = 42
    frames_put_mode: str = "volatile"  # or "trigger" (ablation)

    def __post_init__(self):
        self.clients = tuple(self.clients)
        if self.prediction_bytes == 0:
            self.prediction_bytes = self.predicted_positions * 16

    def validate(self):
        if not self.clients:
            raise BadConfig("at least one client required")
        for name in self.clients:
            if not name.isalnum():
                raise BadConfig(f"client name {name!r} must be alphanumeric")
        if len(set(self.clients)) != len(self.clients):
            raise BadConfig("client names must be unique")
        if self.fps <= 0:
            raise BadConfig("fps must be positive")
        if self.frames <= self.warmup_discard:
            raise BadConfig("frames must exceed warmup_discard")
        if self.past_positions < 1 or self.predicted_positions < 1:
            raise BadConfig("position window sizes must be >= 1")
        if self.max_actors < 0 or self.actor_arrival_rate < 0:
            raise BadConfig("actor model parameters must be non-negative")
        if self.frames_put_mode not in ("volatile", "trigger"):
            raise BadConfig(f"unknown frames_put_mode {self.frames_put_mode!r}")
        for name in ("frame_bytes", "state_base_bytes", "state_per_actor_bytes",
                     "state_cap_bytes", "position_bytes", "prediction_bytes",
                     "cd_result_bytes", "mot_base_us", "mot_per_actor_us",
                     "pred_us", "cd_per_pair_us"):
            if getattr(self, name) < 0:
                raise BadConfig(f"{name} must be non-negative")
        return self

    @property
    def frame_period_us(self) -> int:
        return int(round(1_000_000 / self.fps))

    def state_bytes(self, actors: int) -> int:
        return min(self.state_cap_bytes,
                   self.state_base_bytes + actors * self.state_per_actor_bytes)

    def with_seed(self, seed: int) -> "WorkloadConfig":
        return replace(self, rng_seed=seed)


@dataclass(frozen=True)
class ActorTrack:
    actor_id: int
    first_frame: int
    last_frame: int


@dataclass
class FrameTrace:
    """Per client, per frame: the live actors and their sequence numbers."""

    seed: int
    clients: tuple
    frames: dict = field(default_factory=dict)  # client -> [ [(actor_id, seq)] ]
    tracks: dict = field(default_factory=dict)  # client -> [ActorTrack]

    def live(self, client: str, frame: int) -> list:
        return self.frames[client][frame]

    def predicted_actors(self, client: str, frame: int, p: int) -> list:
        return [a for a, seq in self.frames[client][frame] if seq >= p]

    def max_concurrent(self, client: str) -> int:
        return max((len(row) for row in self.frames[client]), default=0)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["client", "frame", "actor_id", "seq"])
            for client in self.clients:
                for frame, row in enumerate(self.frames[client]):
                    for actor_id, seq in row:
                        writer.writerow([client, frame, actor_id, seq])

    @classmethod
    def from_csv(cls, path, seed=0, frames=None):
        rows_by_client: dict[str, dict[int, list]] = {}
        order: list[str] = []
        max_frame = -1
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            for row in reader:
                client = row["client"]
                frame = int(row["frame"])
                if client not in rows_by_client:
                    rows_by_client[client] = {}
                    order.append(client)
                rows_by_client[client].setdefault(frame, []).append(
                    (int(row["actor_id"]), int(row["seq"])))
                max_frame = max(max_frame, frame)
        nframes = frames if frames is not None else max_frame + 1
        trace = cls(seed=seed, clients=tuple(order))
        for client in order:
            per_frame = [sorted(rows_by_client[client].get(k, []))
                         for k in range(nframes)]
            trace.frames[client] = per_frame
            firsts: dict[int, int] = {}
            lasts: dict[int, int] = {}
            for k, row in enumerate(per_frame):
                for actor_id, _ in row:
                    firsts.setdefault(actor_id, k)
                    lasts[actor_id] = k
            trace.tracks[client] = [ActorTrack(a, firsts[a], lasts[a])
                                    for a in sorted(firsts)]
        return trace


def generate_trace(config: WorkloadConfig) -> FrameTrace:
    """Deterministic actor trace: Poisson arrivals thinned at the
    concurrency cap, geometric lifetimes, per-client independent streams."""
    config.validate()
    trace = FrameTrace(seed=config.rng_seed, clients=config.clients)
    for client in config.clients:
        rng = SplitMix64(mix(config.rng_seed, fnv1a64(client)))
        live: list[list] = []   # [actor_id, first_frame, last_frame]
        tracks: list[ActorTrack] = []
        next_id = 0
        per_frame = []
        for k in range(config.frames):
            live = [t for t in live if t[2] >= k]
            arrivals = rng.poisson(config.actor_arrival_rate)
            for _ in range(arrivals):
                if len(live) >= config.max_actors:
                    continue
                lifetime = rng.geometric(config.actor_lifetime_mean)
                last = min(k + lifetime - 1, config.frames - 1)
                live.append([next_id, k, last])
                tracks.append(ActorTrack(next_id, k, last))
                next_id += 1
            per_frame.append([(t[0], k - t[1] + 1) for t in live])
        trace.frames[client] = per_frame
        trace.tracks[client] = tracks
    return trace


def collides(seed: int, client: str, frame: int, actor_a: int, actor_b: int,
             prob: float) -> bool:
    """Trace-level pseudo collision verdict for one actor pair in a frame."""
    lo, hi = sorted((actor_a, actor_b))
    draw = mix(seed, 0xC0111DE, fnv1a64(client), frame, lo, hi)
    return (draw >> 11) * (2.0 ** -53) < prob


# -- key helpers ---------------------------------------------------------------

def frame_key(client: str, frame: int) -> str:
    return f"{FRAMES_POOL}/{client}_{frame}"


def state_key(client: str, frame: int) -> str:
    return f"{STATES_POOL}/{client}_{frame}"


def position_key(client: str, actor: int, frame: int) -> str:
    return f"{POSITIONS_POOL}/{client}_{actor}_{frame}"


def prediction_key(client: str, frame: int, actor: int) -> str:
    return f"{PREDICTIONS_POOL}/{client}_{frame}_{actor}"


def cd_key(client: str, frame: int, actor: int, collisions: int) -> str:
    return f"{CD_POOL}/{client}_{frame}_{actor}_{collisions}"


def _split_tail(key: str, parts: int) -> list[str]:
    tail = key.rsplit("/", 1)[1]
    fields = tail.split("_")
    if len(fields) != parts:
        raise ValueError(f"key {key!r} does not have {parts} tail fields")
    return fields


def parse_frame_key(key: str) -> tuple[str, int]:
    client, frame = _split_tail(key, 2)
    return client, int(frame)


def parse_position_key(key: str) -> tuple[str, int, int]:
    client, actor, frame = _split_tail(key, 3)
    return client, int(actor), int(frame)


def parse_prediction_key(key: str) -> tuple[str, int, int]:
    client, frame, actor = _split_tail(key, 3)
    return client, int(frame), int(actor)


# -- handlers -------------------------------------------------------------------

class MotHandler(Handler):
    """Tracking stage: consume a frame, refresh state, emit positions."""

    step = StepLabel.MOT

    def __init__(self, config: WorkloadConfig, trace: FrameTrace):
        self.config = config
        self.trace = trace

    def plan(self, task, trigger_obj):
        client, frame = parse_frame_key(task.key)
        if frame == 0:
            return []
        return [("get", state_key(client, frame - 1))]

    def service_us(self, task, fetched):
        client, frame = parse_frame_key(task.key)
        actors = len(self.trace.live(client, frame))
        return self.config.mot_base_us + actors * self.config.mot_per_actor_us

    def outputs(self, task, fetched):
        client, frame = parse_frame_key(task.key)
        live = self.trace.live(client, frame)
        puts = [PutSpec(state_key(client, frame),
                        self.config.state_bytes(len(live)))]
        for actor_id, seq in live:
            puts.append(PutSpec(position_key(client, actor_id, frame),
                                self.config.position_bytes, meta=seq))
        return puts


class PredHandler(Handler):
    """Prediction stage: needs the past window of positions for one actor.

    The triggering position object carries the actor's sequence number, so
    the handler knows without any extra fetch whether a full window exists;
    below the threshold it completes immediately and emits nothing.
    """

    step = StepLabel.PRED

    def __init__(self, config: WorkloadConfig, trace: FrameTrace):
        self.config = config
        self.trace = trace

    def _window(self, task):
        seq = task.trigger_obj.meta
        if seq is None or seq < self.config.past_positions:
            return None
        client, actor, frame = parse_position_key(task.key)
        return client, actor, frame

    def plan(self, task, trigger_obj):
        window = self._window(task)
        if window is None:
            return []
        client, actor, frame = window
        p = self.config.past_positions
        return [("get", position_key(client, actor, j))
                for j in range(frame - (p - 1), frame)]

    def service_us(self, task, fetched):
        return self.config.pred_us if self._window(task) else 0

    def outputs(self, task, fetched):
        window = self._window(task)
        if window is None:
            return []
        client, actor, frame = window
        return [PutSpec(prediction_key(client, frame, actor),
                        self.config.prediction_bytes)]


class CdHandler(Handler):
    """Collision stage: match one trajectory against the frame's others.

    The list is bounded to the store as of the triggering put, so under
    per-frame sequencing the j-th task of a frame sees exactly j
    predictions and the frame's tasks jointly cover all actor pairs.
    """

    step = StepLabel.CD

    def __init__(self, config: WorkloadConfig, trace: FrameTrace):
        self.config = config
        self.trace = trace

    def plan(self, task, trigger_obj):
        client, frame, _ = parse_prediction_key(task.key)
        return [("list", f"{PREDICTIONS_POOL}/{client}_{frame}_")]

    def service_us(self, task, fetched):
        count = len(fetched[0])
        return (count - 1) * self.config.cd_per_pair_us

    def outputs(self, task, fetched):
        client, frame, actor = parse_prediction_key(task.key)
        found = 0
        for other in fetched[0]:
            _, _, other_actor = parse_prediction_key(other.key)
            if other_actor == actor:
                continue
            if collides(self.trace.seed, client, frame, actor, other_actor,
                        self.config.collision_prob):
                found += 1
        return [PutSpec(cd_key(client, frame, actor, found),
                        self.config.cd_result_bytes)]


# -- client sources -----------------------------------------------------------

def client_source(client: str, config: WorkloadConfig) -> list:
    """The put schedule for one client: [(t_us, key, size)]."""
    period = config.frame_period_us
    return [(k * period, frame_key(client, k), config.frame_bytes)
            for k in range(config.frames)]


def schedule_clients(cluster, config: WorkloadConfig):
    """Arm every client's frame puts on the cluster's event loop."""
    mode = PutMode.TRIGGER if config.frames_put_mode == "trigger" else PutMode.VOLATILE
    for client in config.clients:
        node = cluster.client_nodes[client]
        for at, key, size in client_source(client, config):
            cluster.loop.schedule(at, cluster.store.put, key, size, mode, node)


def install_pipeline(cluster, config: WorkloadConfig, trace: FrameTrace):
    """Register the three stage handlers under their trigger prefixes."""
    cluster.register_udl(FRAMES_POOL, "mot", MotHandler(config, trace))
    cluster.register_udl(POSITIONS_POOL, "pred", PredHandler(config, trace))
    cluster.register_udl(PREDICTIONS_POOL, "cd", CdHandler(config, trace))
