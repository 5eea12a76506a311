import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedpartial import federation as F
from fedpartial import losses as L
from fedpartial.labelspace import LabelSpace, full_scheme, make_scheme
from fedpartial.segnet import NetSpec, backward, forward, init_params

SPACE = LabelSpace.default(3)
LOSS = L.LossConfig()


def tiny_set(seed, n=4, labeled=None):
    rng = np.random.default_rng(seed)
    scheme = full_scheme(SPACE) if labeled is None else make_scheme(SPACE, labeled)
    x = rng.normal(size=(n, 8, 8, 1)).astype(np.float32)
    t = rng.integers(0, scheme.num_merged, size=(n, 8, 8))
    return F.TrainingSet(x, t, np.zeros(n), [scheme])


def tiny_init(seed=0):
    return init_params(NetSpec(num_classes=3, base_width=2, depth=1, seed=seed))


def scalar_params(value):
    p = tiny_init()
    return p.with_flat(np.full(p.size, value, dtype=np.float32))


def cfg(**kw):
    base = dict(global_rounds=3, client_iterations=2, lr=0.05, warmstart_epochs=0)
    base.update(kw)
    return F.FedConfig(**base)


# ---------------------------------------------------------------- aggregation

def test_aggregate_hand_case():
    ups = [(k, n, scalar_params(v)) for k, n, v in [(0, 1, 3.0), (1, 2, 6.0), (2, 3, 9.0)]]
    out = F.aggregate(ups)
    assert np.all(out.flat == 7.0)


def test_aggregate_two_equal_clients(rng):
    p = tiny_init()
    a = p.with_flat(rng.normal(size=p.size).astype(np.float32))
    b = p.with_flat(rng.normal(size=p.size).astype(np.float32))
    out = F.aggregate([(0, 5, a), (1, 5, b)])
    assert np.allclose(out.flat, (a.flat.astype(np.float64) + b.flat) / 2, atol=1e-7)


@given(st.lists(st.integers(1, 1000), min_size=1, max_size=6))
def test_aggregate_identical_is_identity(counts):
    p = tiny_init(3)
    out = F.aggregate([(k, n, p) for k, n in enumerate(counts)])
    assert np.max(np.abs(out.flat - p.flat)) <= 1e-6 * np.max(np.abs(p.flat))
    w = F.aggregation_weights([(k, n, p) for k, n in enumerate(counts)])
    assert abs(sum(w.values()) - 1.0) <= 1e-12


@given(st.lists(st.integers(1, 50), min_size=2, max_size=5), st.randoms())
@settings(max_examples=30, deadline=None)
def test_aggregate_permutation_invariant(counts, rnd):
    rng = np.random.default_rng(len(counts))
    p = tiny_init()
    ups = [(k, n, p.with_flat(rng.normal(size=p.size).astype(np.float32))) for k, n in enumerate(counts)]
    shuffled = ups[:]
    rnd.shuffle(shuffled)
    assert F.aggregate(ups).flat.tobytes() == F.aggregate(shuffled).flat.tobytes()


def test_aggregate_errors():
    with pytest.raises(ValueError):
        F.aggregate([])
    other = init_params(NetSpec(num_classes=4, base_width=2, depth=1))
    with pytest.raises(ValueError):
        F.aggregate([(0, 1, tiny_init()), (1, 1, other)])
    with pytest.raises(ValueError):
        F.aggregate([(0, 0, tiny_init())])


# ---------------------------------------------------------------- client update

def test_client_update_zero_iterations_and_zero_lr():
    init = tiny_init()
    c = F.make_client("a", tiny_set(1), LOSS, cfg())
    assert F.client_update(c, init, cfg(client_iterations=0)) is init
    c = F.make_client("a", tiny_set(1), LOSS, cfg(lr=0.0))
    out = F.client_update(c, init, cfg(lr=0.0))
    assert out.flat.tobytes() == init.flat.tobytes()


def test_client_update_does_not_mutate_input():
    init = tiny_init()
    before = init.flat.copy()
    c = F.make_client("a", tiny_set(1), LOSS, cfg())
    out = F.client_update(c, init, cfg())
    assert np.array_equal(init.flat, before)
    assert not np.array_equal(out.flat, before)


def test_single_step_matches_scripted_sgd():
    data = tiny_set(2, n=1, labeled={2})
    init = tiny_init(4)
    c1 = cfg(client_iterations=1, batch_size=1, lr=0.07, grad_clip=0.0)
    c = F.make_client("s", data, LOSS, c1)
    out = F.client_update(c, init, c1)
    # the same step written out by hand
    x = data.inputs[0]
    logits = forward(init, x)
    r = L.combined_loss(logits, data.targets[0], data.schemes[0], None, LOSS)
    g = backward(init, x, r.grad)
    assert np.array_equal(out.flat, init.flat - np.float32(0.07) * g)
    assert c.last_mean_loss == r.value


def test_gradient_clipping_bounds_step():
    data = tiny_set(2, n=2)
    init = tiny_init(4)
    c1 = cfg(client_iterations=1, lr=1.0, momentum=0.0, grad_clip=1e-3)
    out = F.client_update(F.make_client("s", data, LOSS, c1), init, c1)
    assert np.linalg.norm(out.flat.astype(np.float64) - init.flat) <= 1e-3 * (1 + 1e-5)


def test_layout_mismatch_rejected():
    c = F.make_client("a", tiny_set(1), LOSS, cfg())
    F.client_update(c, tiny_init(), cfg())
    with pytest.raises(ValueError):
        F.client_update(c, init_params(NetSpec(num_classes=3, base_width=3, depth=1)), cfg())


def test_empty_client_rejected():
    empty = F.TrainingSet(np.zeros((0, 8, 8, 1), np.float32), np.zeros((0, 8, 8), int), [], [full_scheme(SPACE)])
    with pytest.raises(ValueError):
        F.make_client("e", empty, LOSS, cfg())


def test_sampler_covers_every_sample_each_epoch():
    s = F.BatchSampler(5, 2, np.random.default_rng(0))
    for _ in range(3):
        seen, done = [], False
        while not done:
            idx, done = s.next()
            seen += list(idx)
        assert sorted(seen) == list(range(5))


def test_plateau_decay():
    d = F.PlateauDecay(1.0, patience=3, threshold=1e-3, factor=0.5)
    for loss in [1.0, 0.5, 0.4995, 0.4995, 0.4995]:
        d.update(loss)
    assert d.lr == 0.5
    d2 = F.PlateauDecay(1.0, patience=3, enabled=False)
    for _ in range(10):
        d2.update(1.0)
    assert d2.lr == 1.0


# ---------------------------------------------------------------- run loops

def test_single_client_federation_equals_local():
    c = cfg(global_rounds=4, client_iterations=3)
    init = tiny_init()
    fed = F.run_federated([F.make_client("a", tiny_set(5), LOSS, c)], c, init)
    loc = F.run_local(F.make_client("a", tiny_set(5), LOSS, c), c, init)
    assert fed.params.flat.tobytes() == loc.params.flat.tobytes()


def test_single_client_central_equals_federated():
    c = cfg(global_rounds=2, client_iterations=3)
    init = tiny_init()
    fed = F.run_federated([F.make_client("a", tiny_set(5), LOSS, c)], c, init)
    cen = F.run_central([F.make_client("a", tiny_set(5), LOSS, c)], c, init)
    assert fed.params.flat.tobytes() == cen.params.flat.tobytes()


def test_zero_rounds_returns_initial_weights():
    c = cfg(global_rounds=0)
    init = tiny_init()
    res = F.run_federated([F.make_client("a", tiny_set(5), LOSS, c)], c, init)
    assert res.params.flat.tobytes() == init.flat.tobytes()
    assert res.trace == []


def test_warm_start_only_uses_full_client():
    c = cfg(global_rounds=0, warmstart_epochs=2)
    init = tiny_init()
    clients = [F.make_client("p", tiny_set(1, labeled={1}), LOSS, c), F.make_client("f", tiny_set(2), LOSS, c)]
    res = F.run_federated(clients, c, init)
    assert res.warm_params is not None
    assert not np.array_equal(res.params.flat, init.flat)
    assert {row[1] for row in res.trace} == {"warm:f"}
    assert len(res.trace) == 2
    # no fully labeled client: warm start is skipped
    res = F.run_federated(clients[:1], c, init)
    assert res.params.flat.tobytes() == init.flat.tobytes()


def test_federated_trace_and_thread_determinism():
    c = cfg(global_rounds=3, client_iterations=2)
    init = tiny_init()

    def run(threads):
        clients = [F.make_client(k, tiny_set(i, labeled=lab), LOSS, c)
                   for i, (k, lab) in enumerate([("a", None), ("b", {1}), ("c", {2})])]
        return F.run_federated(clients, c, init, threads=threads)

    r1, r3 = run(1), run(3)
    assert r1.params.flat.tobytes() == r3.params.flat.tobytes()
    assert r1.trace == r3.trace
    assert [row[0] for row in r1.trace] == [1, 1, 1, 2, 2, 2, 3, 3, 3]


def test_broadcast_isolation():
    c = cfg(global_rounds=2, client_iterations=2)
    init = tiny_init()
    snapshots = []

    def on_round(r, w):
        snapshots.append(w.flat.copy())

    clients = [F.make_client(k, tiny_set(i), LOSS, c) for i, k in enumerate("ab")]
    res = F.run_federated(clients, c, init, on_round=on_round)
    # vandalise the clients' private copies; server weights stay as aggregated
    for cl in clients:
        cl.weights.flat[:] = 123.0
    assert np.array_equal(res.params.flat, snapshots[-1])
    assert not np.any(res.params.flat == 123.0)


def test_schedule_identity_total_steps():
    init = tiny_init()
    for rounds, iters in [(1, 6), (2, 3), (3, 2), (6, 1)]:
        c = cfg(global_rounds=rounds, client_iterations=iters)
        cl = F.make_client("a", tiny_set(5), LOSS, c)
        F.run_federated([cl], c, init)
        assert cl.sampler.epoch * 2 == 6


def test_central_loss_decreases():
    rng = np.random.default_rng(0)
    # learnable: class given by thresholding the image
    x = rng.normal(size=(8, 8, 8, 1)).astype(np.float32)
    t = (x[..., 0] > 0).astype(int) + (x[..., 0] > 1).astype(int)
    data = F.TrainingSet(x, t, np.zeros(8), [full_scheme(SPACE)])
    c = cfg(global_rounds=1, client_iterations=1, central_iterations=200, lr=0.1)
    init = init_params(NetSpec(num_classes=3, base_width=8, depth=1))
    res = F.run_central([F.make_client("a", data, LOSS, c)], c, init)
    losses = [row[2] for row in res.trace]
    assert losses[-1] < 0.5 * losses[0]


def test_fed_config_validation():
    with pytest.raises(ValueError):
        F.FedConfig(global_rounds=-1)
    with pytest.raises(ValueError):
        F.FedConfig(batch_size=0)
    with pytest.raises(ValueError):
        F.FedConfig(momentum=1.0)
    assert F.FedConfig(global_rounds=5, client_iterations=4).total_iterations == 20
