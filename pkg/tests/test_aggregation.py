import itertools

import numpy as np
import pytest

from flsim.aggregation import (
    AggregationError,
    Aggregator,
    AggregatorState,
    ClusterBook,
    aggregate_clusters,
    assign_cluster,
    fedavg,
    fedyogi_step,
    merge_partial,
)
from flsim.core import IncongruentError, OptimizerConfig, ParameterSet, UploadEnvelope
from flsim.data import generate_blobs
from flsim.learner import LocalObjective, ModelSpec, evaluate, init_params, local_train
from oracles import brute_weighted_mean, ulp_distance_f32, yogi_scalar

# One step from w=0.5 towards an average of 1.5 with beta1=0.9, beta2=0.99,
# tau=1e-3, server_lr=1 and fresh moments, evaluated by hand.
YOGI_GOLDEN = 1.4900499987500626


def up(cid, n, **arrays):
    p = ParameterSet.from_arrays({k: np.asarray(v, dtype=np.float32) for k, v in arrays.items()})
    return UploadEnvelope(cid, 1, p, n, 0.0)


# ----------------------------------------------------------------- fedavg


def test_fedavg_single_upload_identity():
    u = up(0, 7, w=[0.1, -3.0])
    assert fedavg([u]) == u.parameters


def test_fedavg_weighted_example():
    out = fedavg([up(0, 1, w=[1, 3]), up(1, 3, w=[3, 5])])
    np.testing.assert_array_equal(out.flat("w"), np.array([2.5, 4.5], dtype=np.float32))


def test_fedavg_identical_uploads_fixed_point():
    rng = np.random.default_rng(0)
    vals = rng.normal(size=10)
    out = fedavg([up(i, n, w=vals) for i, n in enumerate([3, 9, 1, 40])])
    assert out.flat("w").tobytes() == np.asarray(vals, dtype=np.float32).tobytes()


def test_fedavg_errors():
    with pytest.raises(AggregationError):
        fedavg([])
    with pytest.raises(AggregationError):
        fedavg([up(0, 0, w=[1.0])])
    with pytest.raises(IncongruentError):
        fedavg([up(0, 1, w=[1.0]), up(1, 1, w=[1.0, 2.0])])


def test_fedavg_matches_brute_force_oracle():
    rng = np.random.default_rng(1)
    for _ in range(200):
        k = int(rng.integers(1, 6))
        size = int(rng.integers(1, 20))
        counts = [int(c) for c in rng.integers(1, 500, size=k)]
        vals = [rng.normal(0, 10, size).astype(np.float32) for _ in range(k)]
        out = fedavg([up(i, c, w=v) for i, (c, v) in enumerate(zip(counts, vals))])
        assert ulp_distance_f32(out.flat("w"), brute_weighted_mean(vals, counts)).max() <= 1


def test_fedavg_permutation_invariant_and_convex():
    rng = np.random.default_rng(2)
    uploads = [up(i, int(rng.integers(1, 50)), a=rng.normal(size=5), b=rng.normal(size=(2, 2)))
               for i in range(4)]
    ref = fedavg(uploads)
    for perm in itertools.permutations(uploads):
        assert fedavg(list(perm)) == ref
    stack = np.stack([u.parameters.vector() for u in uploads])
    v = ref.vector()
    assert np.all(v >= stack.min(axis=0)) and np.all(v <= stack.max(axis=0))


# ----------------------------------------------------------------- fedyogi


def test_yogi_zero_delta_is_fixed_point():
    g = ParameterSet.from_arrays({"w": np.array([0.3, -1.0])})
    state = AggregatorState.init("fedyogi", g)
    out, _ = fedyogi_step(state, g, [UploadEnvelope(0, 1, g, 5, 0.0)])
    assert out == g


def test_yogi_single_element_golden():
    g = ParameterSet.from_arrays({"w": np.array([0.5])})
    state = AggregatorState.init("fedyogi", g, 1.0, 0.9, 0.99, 1e-3)
    out, state = fedyogi_step(state, g, [up(0, 1, w=[1.5])])
    assert out.flat("w")[0] == np.float32(YOGI_GOLDEN)
    assert state.second_moment.flat("w")[0] == np.float32(0.010001)


def test_yogi_matches_scalar_rule_over_steps():
    rng = np.random.default_rng(3)
    g = ParameterSet.from_arrays({"w": np.array([0.0])})
    state = AggregatorState.init("fedyogi", g)
    w, m, v = 0.0, 0.0, 1e-6
    for _ in range(20):
        target = float(np.float32(rng.normal()))
        g, state = fedyogi_step(state, g, [up(0, 1, w=[target])])
        w, m, v = yogi_scalar(w, target, m, v)
        w = float(np.float32(w))
        m = float(np.float32(m))
        v = float(np.float32(v))
        assert g.flat("w")[0] == pytest.approx(w, rel=1e-5, abs=1e-6)


def test_yogi_second_moment_stays_positive():
    rng = np.random.default_rng(4)
    g = ParameterSet.from_arrays({"w": rng.normal(size=8)})
    state = AggregatorState.init("fedyogi", g)
    for step in range(1000):
        target = g.vector() + rng.normal(0, 10 ** rng.uniform(-4, 1), size=8)
        g, state = fedyogi_step(state, g, [up(0, 1, w=target)])
        assert np.all(state.second_moment.vector() > 0), step


def test_yogi_damped_direction_follows_delta_sign():
    g = ParameterSet.from_arrays({"w": np.array([0.0, 1.0, -2.0])})
    state = AggregatorState.init("fedyogi", g, server_lr=1.0, beta1=0.0, tau=100.0)
    target = np.array([0.5, 0.2, -1.0])
    out, _ = fedyogi_step(state, g, [up(0, 1, w=target)])
    np.testing.assert_array_equal(np.sign(out.vector() - g.vector()), np.sign(target - g.vector()))


# ----------------------------------------------------------------- partial merge


def test_merge_partial_full_set_equals_fedavg():
    uploads = [up(0, 2, a=[1.0], b=[2.0]), up(1, 6, a=[3.0], b=[0.0])]
    g = ParameterSet.from_arrays({"a": np.zeros(1), "b": np.zeros(1)})
    assert merge_partial(g, uploads, ["a", "b"]) == fedavg(uploads)


def test_merge_partial_leaves_other_blocks_bit_identical():
    rng = np.random.default_rng(5)
    g = ParameterSet.from_arrays({"body": rng.normal(size=6), "head": rng.normal(size=3)})
    uploads = [up(i, i + 1, body=rng.normal(size=6)) for i in range(3)]
    out = merge_partial(g, uploads, ["body"])
    assert out.flat("head").tobytes() == g.flat("head").tobytes()
    assert out.flat("body").tobytes() == fedavg(uploads).flat("body").tobytes()


def test_merge_partial_rejects_non_listed_blocks():
    g = ParameterSet.from_arrays({"body": np.zeros(2), "head": np.zeros(1)})
    with pytest.raises(AggregationError):
        merge_partial(g, [up(0, 1, body=[1, 1], head=[1])], ["body"])
    with pytest.raises(AggregationError):
        merge_partial(g, [up(0, 1, body=[1, 1])], [])


def test_aggregator_driver_partial_yogi():
    g = ParameterSet.from_arrays({"body": np.zeros(2), "head": np.ones(1)})
    agg = Aggregator("fedyogi", g, partial_blocks=["body"])
    out = agg(g, [up(0, 1, body=[1.0, -1.0])])
    assert out.flat("head").tobytes() == g.flat("head").tobytes()
    assert out.flat("body")[0] > 0 > out.flat("body")[1]


# ----------------------------------------------------------------- clusters


def test_assign_cluster_rules():
    assert assign_cluster([3.0]) == 0
    assert assign_cluster([0.5, 0.2, 0.9]) == 1
    assert assign_cluster([0.2, 0.2]) == 0
    rng = np.random.default_rng(6)
    for _ in range(100):
        losses = rng.uniform(0, 5, size=4)
        assert assign_cluster(losses + rng.normal() * 3) == assign_cluster(losses)
    with pytest.raises(AggregationError):
        assign_cluster([0.1, float("nan")])


def test_aggregate_clusters_keeps_idle_clusters():
    m0 = ParameterSet.from_arrays({"w": np.zeros(2)})
    m1 = ParameterSet.from_arrays({"w": np.ones(2)})
    book = ClusterBook((m0, m1))
    u = UploadEnvelope(4, 1, ParameterSet.from_arrays({"w": np.full(2, 5.0)}), 3, 0.0, cluster_id=0)
    new = aggregate_clusters(book, [u])
    assert new.models[1] == m1
    assert list(new.models[0].flat("w")) == [5.0, 5.0]
    assert new.assignment == {4: 0}
    with pytest.raises(AggregationError):
        aggregate_clusters(book, [UploadEnvelope(4, 1, m0, 3, 0.0, cluster_id=2)])


def _planted_run(seed, rounds=3):
    # two populations with opposite optima: the second flips the binary label
    train, _ = generate_blobs(2, 80, 4, 1, seed)
    rng = np.random.default_rng(seed)
    idx = np.array_split(rng.permutation(len(train)), 8)
    clients = [(train.features[ix], train.labels[ix] if c % 2 == 0 else 1 - train.labels[ix])
               for c, ix in enumerate(idx)]
    spec = ModelSpec.linear(4, 2)
    book = ClusterBook(tuple(init_params(spec, seed * 10 + k) for k in range(2)))
    for r in range(rounds):
        uploads = []
        for c, (x, y) in enumerate(clients):
            k = assign_cluster([evaluate(spec, m, x, y)[1] for m in book.models])
            p, n, loss = local_train(spec, book.models[k], x, y, LocalObjective(), OptimizerConfig(), 5, 32, seed + r)
            uploads.append(UploadEnvelope(c, r, p, n, loss, cluster_id=k))
        book = aggregate_clusters(book, uploads)
    a = book.assignment
    even = {a[c] for c in range(0, 8, 2)}
    odd = {a[c] for c in range(1, 8, 2)}
    return len(even) == 1 and len(odd) == 1 and even != odd


def test_planted_populations_recovered_within_three_rounds():
    hits = sum(_planted_run(seed) for seed in range(20))
    assert hits >= 16
