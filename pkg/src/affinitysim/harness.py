"""Experiment runner: build a cluster, replay a trace, collect metrics.

A run is described by an ExperimentConfig: shard layout x/y/z (tracking,
prediction, collision pools), per-group replication, placement strategy
(random key hashing vs affinity grouping), cache flag, link model, and the
workload.  Runs are deterministic for a fixed seed and write four CSVs:

    records.csv     one row per post-warmup frame (latency breakdown)
    summary.csv     one row per run (percentiles, throughput, bytes)
    run_log.csv     one row per task
    store_dump.csv  one row per stored replica at end of run

End-to-end latency for a frame is the interval from the client's frame
put to the completion of the last collision-result put for that frame.
"""

from __future__ import annotations

import csv
import importlib.resources
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import yaml

from . import workload as wl
from .core import extract_affinity_key
from .errors import BadConfig, TraceMismatch
from .netsim import ClusterLayout, LinkModel, PoolGroupSpec, build_cluster
from .workload import FrameTrace, WorkloadConfig, generate_trace

RECORDS_HEADER = ("run_id,strategy,layout,client,frame,e2e_us,mot_us,pred_us,"
                  "cd_us,remote_bytes,cache_hits,cache_misses")
SUMMARY_HEADER = ("run_id,strategy,layout,clients,median_us,p75_us,p99_us,"
                  "mean_us,fps,total_remote_bytes,cache_hit_rate")
RUN_LOG_HEADER = ("fired_at_us,start_us,done_us,node,step,key,affinity_key,"
                  "fetch_us,service_us,remote_bytes")
STORE_DUMP_HEADER = "pool,shard,node,key,affinity_key,bytes,version"


class Strategy(Enum):
    RANDOM = "random"
    AFFINITY = "affinity"


@dataclass
class ExperimentConfig:
    strategy: Strategy = Strategy.AFFINITY
    layout: tuple = (3, 5, 5)              # shards for MOT / PRED / CD pools
    replication: tuple = (1, 1, 1)         # nodes per shard, same order
    cache_enabled: bool = True
    cache_capacity_bytes: int | None = None
    workers_per_node: int = 1
    link: LinkModel = field(default_factory=LinkModel)
    workload: WorkloadConfig = field(default_factory=WorkloadConfig)

    def __post_init__(self):
        if isinstance(self.strategy, str):
            self.strategy = Strategy(self.strategy.lower())
        self.layout = tuple(int(v) for v in self.layout)
        if isinstance(self.replication, int):
            self.replication = (self.replication,) * 3
        self.replication = tuple(int(v) for v in self.replication)
        if len(self.layout) != 3 or any(v < 1 for v in self.layout):
            raise BadConfig(f"layout must be three positive shard counts, got {self.layout}")
        if len(self.replication) != 3 or any(v < 1 for v in self.replication):
            raise BadConfig(f"replication must be three positive factors, got {self.replication}")
        if self.workers_per_node < 1:
            raise BadConfig("workers_per_node must be >= 1")

    @property
    def layout_str(self) -> str:
        return "/".join(str(v) for v in self.layout)

    def run_id(self, seed: int) -> str:
        x, y, z = self.layout
        rm, rp, rc = self.replication
        cache = "on" if self.cache_enabled else "off"
        return (f"{self.strategy.value}-{x}_{y}_{z}-r{rm}{rp}{rc}-"
                f"cache_{cache}-seed{seed}")


def make_layout(config: ExperimentConfig) -> ClusterLayout:
    """Expand an experiment config into pool groups and client nodes.

    Affinity runs attach the shipped regexes; random runs attach none.
    The collision-result pool is never grouped.  Pools sharing a stage
    (frames/states, predictions/cd) share the stage's nodes, so a state
    object and the frame that produced it live on one server.
    """
    affinity = config.strategy is Strategy.AFFINITY
    client_rx = wl.CLIENT_REGEX if affinity else None
    number_rx = wl.CLIENT_NUMBER_REGEX if affinity else None
    x, y, z = config.layout
    rm, rp, rc = config.replication
    groups = [
        PoolGroupSpec("mot", x, rm, [(wl.FRAMES_POOL, client_rx),
                                     (wl.STATES_POOL, client_rx)]),
        PoolGroupSpec("pred", y, rp, [(wl.POSITIONS_POOL, number_rx)]),
        PoolGroupSpec("cd", z, rc, [(wl.PREDICTIONS_POOL, number_rx),
                                    (wl.CD_POOL, None)]),
    ]
    return ClusterLayout(groups=groups,
                         client_names=list(config.workload.clients),
                         link=config.link,
                         workers_per_node=config.workers_per_node,
                         cache_enabled=config.cache_enabled,
                         cache_capacity_bytes=config.cache_capacity_bytes)


@dataclass
class LatencyRecord:
    client: str
    frame: int
    e2e_us: int
    mot_us: int
    pred_us: int
    cd_us: int
    remote_bytes: int
    cache_hits: int
    cache_misses: int


@dataclass
class MetricsReport:
    run_id: str
    strategy: Strategy
    layout_str: str
    seed: int
    records: list
    summary: dict
    saturated: bool
    counters: dict
    task_rows: list
    put_log: list
    dump_rows: list
    pool_members: dict
    client_nodes: dict
    final_time_us: int
    paths: dict = field(default_factory=dict)


def percentile_nearest_rank(sorted_values, pct: float):
    """Nearest-rank percentile over a pre-sorted sequence."""
    if not sorted_values:
        return 0
    rank = max(1, -(-len(sorted_values) * pct // 100))  # ceil
    return sorted_values[int(rank) - 1]


def run_experiment(config: ExperimentConfig, seed: int | None = None,
                   out_dir=None, run_id: str | None = None,
                   trace: FrameTrace | None = None) -> MetricsReport:
    """Execute one experiment on a fresh cluster and aggregate its metrics."""
    workload = config.workload if seed is None else config.workload.with_seed(seed)
    workload.validate()
    seed = workload.rng_seed
    if trace is None:
        trace = generate_trace(workload)
    elif trace.seed != workload.rng_seed:
        raise TraceMismatch(
            f"trace seed {trace.seed} != workload seed {workload.rng_seed}")

    cluster = build_cluster(make_layout(config))
    wl.install_pipeline(cluster, workload, trace)
    wl.schedule_clients(cluster, workload)
    final_time = cluster.run_until_idle()

    records = _aggregate_records(workload, cluster)
    summary, saturated = _summarize(config, workload, seed, records, cluster)
    run_id = run_id or config.run_id(seed)
    summary["run_id"] = run_id

    store = cluster.store
    counters = {
        "remote_fetch_bytes": store.remote_fetch_bytes,
        "replication_bytes": store.replication_bytes,
        "total_remote_bytes": store.remote_fetch_bytes + store.replication_bytes,
        "cache_hits": store.cache_hits,
        "cache_misses": store.cache_misses,
        "affinity_fallbacks": store.affinity_fallbacks,
        "tasks": cluster.runtime.tasks_done,
        "events": cluster.loop.events_run,
    }
    report = MetricsReport(
        run_id=run_id,
        strategy=config.strategy,
        layout_str=config.layout_str,
        seed=seed,
        records=records,
        summary=summary,
        saturated=saturated,
        counters=counters,
        task_rows=cluster.runtime.log_rows(),
        put_log=list(store.put_log),
        dump_rows=store.dump_rows(),
        pool_members={p.spec.path: [list(s.members) for s in p.shards]
                      for p in store._pools.values()},
        client_nodes=dict(cluster.client_nodes),
        final_time_us=final_time,
    )
    if out_dir is not None:
        write_report(report, config, out_dir)
    return report


def _aggregate_records(workload: WorkloadConfig, cluster) -> list:
    frame_put: dict = {}
    state_done: dict = {}
    cd_last: dict = {}
    for rec in cluster.store.put_log:
        if rec.pool == wl.FRAMES_POOL:
            frame_put[wl.parse_frame_key(rec.key)] = rec.issued_at
        elif rec.pool == wl.STATES_POOL:
            state_done[wl.parse_frame_key(rec.key)] = rec.completed_at
        elif rec.pool == wl.CD_POOL:
            client, frame, _actor, _m = wl._split_tail(rec.key, 4)
            ck = (client, int(frame))
            cd_last[ck] = max(cd_last.get(ck, 0), rec.completed_at)
        elif rec.pool == wl.PREDICTIONS_POOL:
            pass

    pred_done: dict = {}
    for rec in cluster.store.put_log:
        if rec.pool == wl.PREDICTIONS_POOL:
            client, frame, actor = wl.parse_prediction_key(rec.key)
            pred_done[(client, frame, actor)] = rec.completed_at

    mot_fired: dict = {}
    pred_span: dict = {}
    cd_first: dict = {}
    frame_tallies: dict = {}
    for task in cluster.runtime.task_log:
        if task.step.name == "MOT":
            ck = wl.parse_frame_key(task.key)
            mot_fired[ck] = task.fired_at
        elif task.step.name == "PRED":
            client, actor, frame = wl.parse_position_key(task.key)
            ck = (client, frame)
            done = pred_done.get((client, frame, actor))
            if done is not None:
                interval = done - task.fired_at
                pred_span[ck] = max(pred_span.get(ck, 0), interval)
        elif task.step.name == "CD":
            client, frame, _ = wl.parse_prediction_key(task.key)
            ck = (client, frame)
            prev = cd_first.get(ck)
            cd_first[ck] = task.fired_at if prev is None else min(prev, task.fired_at)
        else:
            continue
        tally = frame_tallies.setdefault(ck, [0, 0, 0])
        tally[0] += task.remote_bytes
        tally[1] += task.cache_hits
        tally[2] += task.cache_misses

    records = []
    for client in workload.clients:
        for frame in range(workload.warmup_discard, workload.frames):
            ck = (client, frame)
            if ck not in cd_last or ck not in frame_put:
                continue  # no collision output: end-to-end undefined
            end = cd_last[ck]
            tally = frame_tallies.get(ck, [0, 0, 0])
            records.append(LatencyRecord(
                client=client,
                frame=frame,
                e2e_us=end - frame_put[ck],
                mot_us=state_done.get(ck, mot_fired.get(ck, 0)) - mot_fired.get(ck, 0),
                pred_us=pred_span.get(ck, 0),
                cd_us=end - cd_first[ck],
                remote_bytes=tally[0],
                cache_hits=tally[1],
                cache_misses=tally[2],
            ))
    return records


def _summarize(config, workload, seed, records, cluster):
    e2e = sorted(r.e2e_us for r in records)
    store = cluster.store
    hits, misses = store.cache_hits, store.cache_misses
    hit_rate = hits / (hits + misses) if hits + misses else 0.0
    summary = {
        "strategy": config.strategy.value,
        "layout": config.layout_str,
        "clients": len(workload.clients),
        "median_us": percentile_nearest_rank(e2e, 50),
        "p75_us": percentile_nearest_rank(e2e, 75),
        "p99_us": percentile_nearest_rank(e2e, 99),
        "mean_us": sum(e2e) / len(e2e) if e2e else 0.0,
        "total_remote_bytes": store.remote_fetch_bytes + store.replication_bytes,
        "cache_hit_rate": hit_rate,
    }
    saturated = False
    fps = 0.0
    if records:
        first_put = min(r.frame for r in records) * workload.frame_period_us
        last_done = max(r.e2e_us + f * workload.frame_period_us
                        for r, f in ((r, r.frame) for r in records))
        span = last_done - first_put
        if span > 0:
            fps = len(records) * 1_000_000 / span
        offered = len(workload.clients) * workload.fps
        saturated = fps < 0.95 * offered
    summary["fps"] = fps
    return summary, saturated


# -- CSV output -----------------------------------------------------------------

def write_report(report: MetricsReport, config: ExperimentConfig, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "records": out / "records.csv",
        "summary": out / "summary.csv",
        "run_log": out / "run_log.csv",
        "store_dump": out / "store_dump.csv",
    }
    with open(paths["records"], "w", newline="") as fh:
        fh.write(RECORDS_HEADER + "\n")
        for r in report.records:
            fh.write(f"{report.run_id},{report.strategy.value},{report.layout_str},"
                     f"{r.client},{r.frame},{r.e2e_us},{r.mot_us},{r.pred_us},"
                     f"{r.cd_us},{r.remote_bytes},{r.cache_hits},{r.cache_misses}\n")
    with open(paths["summary"], "w", newline="") as fh:
        fh.write(SUMMARY_HEADER + "\n")
        s = report.summary
        fh.write(f"{report.run_id},{s['strategy']},{s['layout']},{s['clients']},"
                 f"{s['median_us']},{s['p75_us']},{s['p99_us']},{s['mean_us']:.3f},"
                 f"{s['fps']:.6f},{s['total_remote_bytes']},{s['cache_hit_rate']:.6f}\n")
    with open(paths["run_log"], "w", newline="") as fh:
        fh.write(RUN_LOG_HEADER + "\n")
        for row in report.task_rows:
            fh.write(",".join(str(v) for v in row) + "\n")
    with open(paths["store_dump"], "w", newline="") as fh:
        fh.write(STORE_DUMP_HEADER + "\n")
        for row in report.dump_rows:
            fh.write(",".join(str(v) for v in row) + "\n")
    report.paths = {k: str(v) for k, v in paths.items()}
    return report.paths


# -- comparisons ------------------------------------------------------------------

def compare(configs: list, out_dir=None, repetitions: int = 3,
            seed: int | None = None, labels: list | None = None):
    """Run several experiment configs over one trace and tabulate them.

    Each config runs ``repetitions`` times with seeds seed, seed+1, ...;
    per-frame records are pooled per config.  All configs must share the
    same workload (hence the same trace per repetition seed).
    """
    if not configs:
        raise BadConfig("compare needs at least one config")
    base = asdict(configs[0].workload)
    for cfg in configs[1:]:
        if asdict(cfg.workload) != base:
            raise TraceMismatch("configs do not share the same workload/trace")
    base_seed = seed if seed is not None else configs[0].workload.rng_seed
    if labels is None:
        labels = [f"{cfg.layout_str} {cfg.strategy.value}"
                  + ("" if cfg.cache_enabled else " nocache")
                  for cfg in configs]

    pooled = []
    for cfg, label in zip(configs, labels):
        values = []
        for rep in range(repetitions):
            report = run_experiment(cfg, seed=base_seed + rep)
            values.extend(r.e2e_us for r in report.records)
        values.sort()
        pooled.append({
            "label": label,
            "strategy": cfg.strategy.value,
            "layout": cfg.layout_str,
            "replication": "/".join(str(v) for v in cfg.replication),
            "cache_enabled": int(cfg.cache_enabled),
            "reps": repetitions,
            "frames": len(values),
            "median_us": percentile_nearest_rank(values, 50),
            "p25_us": percentile_nearest_rank(values, 25),
            "p75_us": percentile_nearest_rank(values, 75),
            "p99_us": percentile_nearest_rank(values, 99),
            "mean_us": sum(values) / len(values) if values else 0.0,
            "min_us": values[0] if values else 0,
            "max_us": values[-1] if values else 0,
            "_values": values,
        })

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "comparison.csv", "w", newline="") as fh:
            cols = ["label", "strategy", "layout", "replication", "cache_enabled",
                    "reps", "frames", "median_us", "p25_us", "p75_us", "p99_us",
                    "mean_us", "min_us", "max_us"]
            fh.write(",".join(cols) + "\n")
            for row in pooled:
                cells = []
                for c in cols:
                    v = row[c]
                    cells.append(f"{v:.3f}" if isinstance(v, float) else str(v))
                fh.write(",".join(cells) + "\n")
        _write_boxplot(pooled, out / "comparison.png")
    for row in pooled:
        row.pop("_values")
    return pooled


def _write_boxplot(pooled, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    data = [[v / 1000.0 for v in row["_values"]] for row in pooled]
    labels = [row["label"] for row in pooled]
    fig, ax = plt.subplots(figsize=(1.6 + 1.1 * len(pooled), 4))
    ax.boxplot(data, showfliers=False)
    ax.set_xticks(range(1, len(labels) + 1))
    ax.set_xticklabels(labels, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("E2E latency (ms)")
    ax.set_xlabel("layout / placement")
    ax.grid(axis="y", linestyle=":", alpha=0.6)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


# -- regex validation --------------------------------------------------------------

def default_table_path() -> Path:
    return Path(str(importlib.resources.files("affinitysim") / "data" / "table1.csv"))


def validate_regex(table_file) -> list:
    """Check each pool-table row: does the regex extract the listed key?

    Returns one report dict per row with status match / mismatch /
    ungrouped (no regex).
    """
    rows = []
    with open(table_file, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            regex = (row.get("regex") or "").strip()
            expected = (row.get("affinity_key") or "").strip()
            example = (row.get("example_key") or "").strip()
            if not regex:
                status, actual = "ungrouped", ""
            else:
                actual = extract_affinity_key(regex, example) or ""
                status = "match" if actual == expected and actual else "mismatch"
            rows.append({
                "pool": (row.get("pool") or "").strip(),
                "example_key": example,
                "step": (row.get("step") or "").strip(),
                "regex": regex,
                "expected": expected,
                "actual": actual,
                "status": status,
            })
    return rows


# -- config files --------------------------------------------------------------------

_EXPERIMENT_KEYS = {"strategy", "layout", "replication", "cache_enabled",
                    "cache_capacity_bytes", "workers_per_node", "link", "workload"}
_LINK_KEYS = {"latency_us", "bandwidth_bytes_per_us"}


def load_experiment_config(path) -> ExperimentConfig:
    """Parse a YAML experiment file with fixed field names."""
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise BadConfig(f"{path}: top level must be a mapping")
    unknown = set(raw) - _EXPERIMENT_KEYS
    if unknown:
        raise BadConfig(f"{path}: unknown keys {sorted(unknown)}")

    kwargs = {}
    if "strategy" in raw:
        kwargs["strategy"] = raw["strategy"]
    if "layout" in raw:
        layout = raw["layout"]
        if isinstance(layout, str):
            layout = layout.split("/")
        kwargs["layout"] = tuple(int(v) for v in layout)
    if "replication" in raw:
        rep = raw["replication"]
        if isinstance(rep, dict):
            rep = (rep.get("mot", 1), rep.get("pred", 1), rep.get("cd", 1))
        kwargs["replication"] = rep
    for key in ("cache_enabled", "cache_capacity_bytes", "workers_per_node"):
        if key in raw:
            kwargs[key] = raw[key]
    if "link" in raw:
        link = raw["link"] or {}
        unknown = set(link) - _LINK_KEYS
        if unknown:
            raise BadConfig(f"{path}: unknown link keys {sorted(unknown)}")
        kwargs["link"] = LinkModel(**link)
    if "workload" in raw:
        wl_raw = dict(raw["workload"] or {})
        valid = set(WorkloadConfig.__dataclass_fields__)
        unknown = set(wl_raw) - valid
        if unknown:
            raise BadConfig(f"{path}: unknown workload keys {sorted(unknown)}")
        if "clients" in wl_raw:
            wl_raw["clients"] = tuple(wl_raw["clients"])
        kwargs["workload"] = WorkloadConfig(**wl_raw)
    try:
        return ExperimentConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise BadConfig(f"{path}: {exc}") from exc


def experiment_to_dict(config: ExperimentConfig) -> dict:
    return {
        "strategy": config.strategy.value,
        "layout": config.layout_str,
        "replication": {"mot": config.replication[0],
                        "pred": config.replication[1],
                        "cd": config.replication[2]},
        "cache_enabled": config.cache_enabled,
        "workers_per_node": config.workers_per_node,
        "link": {"latency_us": config.link.latency_us,
                 "bandwidth_bytes_per_us": config.link.bandwidth_bytes_per_us},
        "workload": asdict(config.workload),
    }
