"""Trigger dispatch, per-affinity-key ordering, and worker capacity."""

from collections import defaultdict

import pytest

from affinitysim.compute import Handler, PutSpec, StepLabel, TaskState
from affinitysim.errors import DuplicatePrefix
from affinitysim.harness import ExperimentConfig, run_experiment
from affinitysim.netsim import Cluster, ClusterLayout, PoolGroupSpec, build_cluster
from affinitysim.store import PutMode
from affinitysim.workload import WorkloadConfig, generate_trace


class FixedService(Handler):
    step = StepLabel.OTHER

    def __init__(self, service_us):
        self._service = service_us

    def service_us(self, task, fetched):
        return self._service


class Broken(Handler):
    step = StepLabel.OTHER

    def plan(self, task, trigger_obj):
        raise RuntimeError("boom")


def simple_cluster(regex, workers=1, shards=1):
    layout = ClusterLayout(
        groups=[PoolGroupSpec("g", shards, 1, [("/p", regex)])],
        client_names=["src"], workers_per_node=workers)
    return build_cluster(layout)


def run_puts(cluster, keys, spacing_us=0, size=8):
    node = cluster.client_nodes["src"]
    for i, key in enumerate(keys):
        cluster.loop.schedule(i * spacing_us, cluster.store.put, key, size,
                              PutMode.VOLATILE, node)
    cluster.run_until_idle()
    return cluster.runtime.task_log


class TestRegistration:
    def test_duplicate_prefix_rejected(self):
        cluster = simple_cluster(None)
        cluster.register_udl("/p", "h1", FixedService(10))
        with pytest.raises(DuplicatePrefix):
            cluster.register_udl("/p", "h2", FixedService(10))

    def test_prefix_matches_at_segment_boundary_only(self):
        cluster = Cluster()
        cluster.create_object_pool("/pool", 1, 1)
        cluster.create_object_pool("/pools", 1, 1)
        cluster.register_udl("/pool", "h", FixedService(10))
        node = cluster.add_client("src")
        cluster.loop.schedule(0, cluster.store.put, "/pools/x_1", 8,
                              PutMode.VOLATILE, node)
        cluster.run_until_idle()
        assert cluster.runtime.tasks_created == 0

    def test_unregistered_prefix_fires_nothing(self):
        cluster = simple_cluster(None)
        run_puts(cluster, ["/p/x_1"])
        assert cluster.runtime.tasks_created == 0


class TestOrdering:
    def test_same_affinity_key_runs_in_put_order_without_overlap(self):
        cluster = simple_cluster("/[a-z]+_")
        cluster.register_udl("/p", "h", FixedService(10_000))
        # same label "/a_", put 1 us apart: strictly serialized
        log = run_puts(cluster, ["/p/a_1", "/p/a_2", "/p/a_3"], spacing_us=1)
        assert [t.key for t in log] == ["/p/a_1", "/p/a_2", "/p/a_3"]
        for first, second in zip(log, log[1:]):
            assert second.started_at >= first.done_at

    def test_distinct_keys_serialize_on_one_worker(self):
        cluster = simple_cluster(None, workers=1)
        cluster.register_udl("/p", "h", FixedService(10_000))
        log = run_puts(cluster, ["/p/a_1", "/p/b_1"])
        spans = sorted((t.done_at - t.service_time, t.done_at) for t in log)
        assert spans[1][0] >= spans[0][1]

    def test_distinct_keys_overlap_with_two_workers(self):
        cluster = simple_cluster(None, workers=2)
        cluster.register_udl("/p", "h", FixedService(10_000))
        log = run_puts(cluster, ["/p/a_1", "/p/b_1"])
        spans = sorted((t.done_at - t.service_time, t.done_at) for t in log)
        assert spans[1][0] < spans[0][1]

    def test_workers_granted_in_trigger_order(self):
        cluster = simple_cluster(None, workers=1)
        cluster.register_udl("/p", "h", FixedService(5_000))
        log = run_puts(cluster, [f"/p/k{i}_1" for i in range(6)], spacing_us=1)
        done_order = [t.key for t in sorted(log, key=lambda t: t.done_at)]
        fired_order = [t.key for t in sorted(log, key=lambda t: t.fired_seq)]
        assert done_order == fired_order


class TestCrossKeyIndependence:
    def test_removing_one_client_preserves_other_clients_order(self):
        both = WorkloadConfig(clients=("little3", "hyang5"), frames=30,
                              warmup_discard=5, rng_seed=9)
        solo = WorkloadConfig(clients=("little3",), frames=30,
                              warmup_discard=5, rng_seed=9)

        def key_sequences(workload):
            report = run_experiment(ExperimentConfig(
                strategy="affinity", layout=(2, 3, 3), workload=workload))
            per_label = defaultdict(list)
            rows = sorted(report.task_rows, key=lambda r: (r[1], r[0]))
            for row in rows:
                if row[6] and "little3" in row[6]:
                    per_label[row[6]].append(row[5])
            return per_label

        assert key_sequences(both) == key_sequences(solo)


class TestWorkerConservation:
    def test_concurrent_service_never_exceeds_capacity(self):
        workload = WorkloadConfig(clients=("little3", "hyang5"), frames=30,
                                  warmup_discard=5, rng_seed=5)
        report = run_experiment(ExperimentConfig(
            strategy="random", layout=(2, 3, 3), workload=workload))
        per_node = defaultdict(list)
        for row in report.task_rows:
            if row[8] > 0:  # service interval [done - service, done)
                per_node[row[3]].append((row[2] - row[8], 1))
                per_node[row[3]].append((row[2], -1))
        for node, edges in per_node.items():
            edges.sort()
            running = 0
            for _, delta in edges:
                running += delta
                assert running <= 1  # workers_per_node defaults to 1


class TestHandlerFailure:
    def test_handler_error_marks_task_failed_without_crashing(self):
        cluster = simple_cluster(None)
        cluster.register_udl("/p", "broken", Broken())
        log = run_puts(cluster, ["/p/x_1"])
        assert len(log) == 1
        task = log[0]
        assert task.state is TaskState.FAILED
        assert "boom" in task.error
        assert cluster.runtime.failed_tasks == [task]
        assert cluster.store.put_log[-1].key == "/p/x_1"  # no downstream puts


class TestPipelinedPuts:
    def test_task_puts_trigger_downstream_stage(self):
        class StageOne(Handler):
            step = StepLabel.OTHER

            def service_us(self, task, fetched):
                return 1_000

            def outputs(self, task, fetched):
                return [PutSpec("/q/next_1", 16)]

        layout = ClusterLayout(
            groups=[PoolGroupSpec("a", 1, 1, [("/p", None)]),
                    PoolGroupSpec("b", 1, 1, [("/q", None)])],
            client_names=["src"])
        cluster = build_cluster(layout)
        cluster.register_udl("/p", "one", StageOne())
        cluster.register_udl("/q", "two", FixedService(1_000))
        run_puts(cluster, ["/p/x_1"])
        steps = [(t.key, t.done_at) for t in cluster.runtime.task_log]
        assert steps[0][0] == "/p/x_1"
        assert steps[1][0] == "/q/next_1"
        assert steps[1][1] > steps[0][1]
