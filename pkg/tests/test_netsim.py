"""Event engine, link-cost model, and cluster layout behavior."""

import pytest

from affinitysim.errors import DeadlockDetected, InsufficientNodes
from affinitysim.harness import ExperimentConfig, run_experiment
from affinitysim.netsim import (Cluster, ClusterLayout, EventLoop, LinkModel,
                                PoolGroupSpec, build_cluster, transfer_time)
from affinitysim.store import PutMode
from affinitysim.workload import WorkloadConfig, client_source


class TestLinkModel:
    def test_eight_megabyte_example(self):
        assert transfer_time(8_388_608, local=False) == 721

    def test_zero_bytes_costs_latency_floor(self):
        assert transfer_time(0, local=False) == 50

    def test_local_is_free(self):
        assert transfer_time(8_388_608, local=True) == 0
        assert transfer_time(0, local=True) == 0

    def test_decimal_ten_megabytes(self):
        assert transfer_time(10_000_000, local=False) == 850

    def test_custom_link(self):
        link = LinkModel(latency_us=10, bandwidth_bytes_per_us=100)
        assert link.transfer_time(1000, False) == 20

    def test_invalid_parameters(self):
        with pytest.raises(ValueError):
            LinkModel(latency_us=-1)
        with pytest.raises(ValueError):
            LinkModel(bandwidth_bytes_per_us=0)
        with pytest.raises(ValueError):
            LinkModel().transfer_time(-1, False)


class TestEventLoop:
    def test_time_and_sequence_order(self):
        loop = EventLoop()
        seen = []
        loop.schedule(5, seen.append, "b")
        loop.schedule(5, seen.append, "c")
        loop.schedule(1, seen.append, "a")
        assert loop.run() == 5
        assert seen == ["a", "b", "c"]

    def test_causality_enforced(self):
        loop = EventLoop()

        def bad():
            loop.schedule(loop.now - 1, lambda: None)

        loop.schedule(10, bad)
        with pytest.raises(AssertionError):
            loop.run()

    def test_settlement_runs_after_same_instant_events(self):
        loop = EventLoop()
        seen = []
        loop.schedule(3, lambda: loop.request_settle("k", lambda: seen.append("settle")))
        loop.schedule(3, seen.append, "event")
        loop.run()
        assert seen == ["event", "settle"]

    def test_settlement_key_collapses_requests(self):
        loop = EventLoop()
        seen = []
        loop.schedule(1, lambda: loop.request_settle("k", lambda: seen.append("x")))
        loop.schedule(1, lambda: loop.request_settle("k", lambda: seen.append("y")))
        loop.run()
        assert seen == ["x"]


def _layout(groups, clients=(), **kw):
    return ClusterLayout(groups=groups, client_names=list(clients), **kw)


class TestClusterLayout:
    def test_3_5_5_has_thirteen_shard_slots(self):
        layout = _layout([
            PoolGroupSpec("mot", 3, 1, [("/frames", None), ("/states", None)]),
            PoolGroupSpec("pred", 5, 1, [("/positions", None)]),
            PoolGroupSpec("cd", 5, 1, [("/predictions", None), ("/cd", None)]),
        ], clients=("little3", "hyang5", "gates3"))
        assert layout.server_nodes() == 13
        assert layout.total_nodes() == 16
        cluster = build_cluster(layout)
        assert cluster.node_count == 16

    def test_replicated_1_1_1_has_three_nodes_per_shard(self):
        layout = _layout([
            PoolGroupSpec("mot", 1, 3, [("/frames", None)]),
            PoolGroupSpec("pred", 1, 3, [("/positions", None)]),
            PoolGroupSpec("cd", 1, 3, [("/predictions", None)]),
        ])
        cluster = build_cluster(layout)
        for path in ("/frames", "/positions", "/predictions"):
            members = cluster.store.pool_state(path).shards[0].members
            assert len(members) == 3
            assert len(set(members)) == 3

    def test_placement_group_shares_nodes(self):
        cluster = Cluster()
        cluster.create_object_pool("/frames", 3, 1, placement_group="mot")
        cluster.create_object_pool("/states", 3, 1, placement_group="mot")
        frames = cluster.store.pool_state("/frames")
        states = cluster.store.pool_state("/states")
        for a, b in zip(frames.shards, states.shards):
            assert a.members == b.members

    def test_insufficient_nodes(self):
        cluster = Cluster(max_nodes=2)
        cluster.create_object_pool("/a", 2, 1)
        with pytest.raises(InsufficientNodes):
            cluster.create_object_pool("/b", 1, 1)

    def test_group_geometry_mismatch(self):
        cluster = Cluster()
        cluster.create_object_pool("/frames", 3, 1, placement_group="mot")
        with pytest.raises(InsufficientNodes):
            cluster.create_object_pool("/states", 2, 1, placement_group="mot")


class TestRunUntilIdle:
    def test_empty_workload_terminates_at_zero(self):
        cluster = build_cluster(_layout([PoolGroupSpec("g", 1, 1, [("/p", None)])]))
        assert cluster.run_until_idle() == 0

    def test_client_source_schedule(self):
        config = WorkloadConfig(clients=("little3",))
        schedule = client_source("little3", config)
        assert schedule[0] == (0, "/frames/little3_0", config.frame_bytes)
        assert schedule[1][0] == 400_000
        assert schedule[2][0] == 800_000
        assert schedule[42][1] == "/frames/little3_42"
        assert schedule[-1][0] == 279_600_000  # (700 - 1) x 400,000

    def test_blocking_get_on_never_put_key_deadlocks(self):
        from affinitysim.compute import Handler, StepLabel

        class Orphan(Handler):
            step = StepLabel.OTHER

            def plan(self, task, trigger_obj):
                return [("get", "/p/never_made")]

        cluster = build_cluster(_layout([PoolGroupSpec("g", 1, 1, [("/p", None)])]))
        cluster.register_udl("/p", "orphan", Orphan())
        client = cluster.add_client("c0")
        cluster.loop.schedule(0, cluster.store.put, "/p/x_1", 10,
                              PutMode.VOLATILE, client)
        with pytest.raises(DeadlockDetected):
            cluster.run_until_idle()


class TestCostMonotonicity:
    def test_slower_links_never_reduce_frame_latency(self):
        workload = WorkloadConfig(clients=("little3",), frames=24,
                                  warmup_discard=4, rng_seed=11)
        base = ExperimentConfig(strategy="random", layout=(1, 2, 2),
                                workload=workload)
        ref = run_experiment(base)
        ref_lat = {(r.client, r.frame): r.e2e_us for r in ref.records}
        for link in (LinkModel(latency_us=500),
                     LinkModel(bandwidth_bytes_per_us=1250)):
            slow = run_experiment(ExperimentConfig(
                strategy="random", layout=(1, 2, 2), workload=workload, link=link))
            for rec in slow.records:
                assert rec.e2e_us >= ref_lat[(rec.client, rec.frame)]
