"""Unrolled graph-network estimator: configs, conv, init, training."""

import numpy as np
import pytest

from gridse import measurement, solvers, unrolled
from gridse.autodiff import Tape, Tensor
from gridse.errors import ConfigError, DimensionError, InitError, NumericsError
from gridse.case_io import Dataset
from gridse.measurement import MeasurementSelection, build_measurement_model
from gridse.solvers import SolverOptions
from gridse.unrolled import (
    FnnModel, GnnConfig, UnrolledModel, evaluate_loss, gnn_forward, graph_conv,
    init_gnn_params, init_unrolled, param_count, train, unrolled_forward,
)

import oracles


def ring_shift(n, seed=None):
    """Symmetric normalized ring graph, spectrum inside [-1, 1]."""
    W = np.zeros((n, n))
    for i in range(n):
        W[i, (i + 1) % n] = W[(i + 1) % n, i] = 0.5
    return W


def tensor_thetas(raw):
    return [[Tensor(h) for h in layer] for layer in raw]


@pytest.fixture()
def mm14(mm14_default):
    return mm14_default


# ---------------------------------------------------------------------------
# configuration

def test_gnn_config_defaults_and_validation():
    cfg = GnnConfig(widths=(2, 8, 2), hops=(2, 2))
    assert cfg.n_layers == 2
    assert cfg.activations == ("relu", "linear")
    with pytest.raises(ConfigError):
        GnnConfig(widths=(2,), hops=())
    with pytest.raises(ConfigError):
        GnnConfig(widths=(2, 8, 2), hops=(2,))
    with pytest.raises(ConfigError):
        GnnConfig(widths=(2, 0, 2), hops=(2, 2))
    with pytest.raises(ConfigError):
        GnnConfig(widths=(2, 8, 2), hops=(2, 0))
    with pytest.raises(ConfigError):
        GnnConfig(widths=(2, 8, 2), hops=(2, 2), activations=("relu", "softmax"))


def test_param_count_worked_example():
    # 2->8 and 8->2, two taps per layer: 2*(2*8) + 2*(8*2) = 64
    assert param_count(GnnConfig(widths=(2, 8, 2), hops=(2, 2))) == 64


def test_param_count_matches_initialized_arrays():
    rng = np.random.default_rng(0)
    for _ in range(10):
        L = rng.integers(1, 4)
        widths = tuple(int(w) for w in rng.integers(1, 7, size=L + 1))
        hops = tuple(int(k) for k in rng.integers(1, 5, size=L))
        cfg = GnnConfig(widths=widths, hops=hops)
        raw = init_gnn_params(cfg, np.random.default_rng(1))
        total = sum(h.size for layer in raw for h in layer)
        assert total == param_count(cfg)
        assert all(raw[l][k].shape == (widths[l], widths[l + 1])
                   for l in range(L) for k in range(hops[l]))


# ---------------------------------------------------------------------------
# graph convolution

def test_conv_with_zero_shift_keeps_only_first_tap():
    rng = np.random.default_rng(2)
    X = rng.standard_normal((1, 5, 3))
    hs = [Tensor(rng.standard_normal((3, 4))) for _ in range(3)]
    tape = Tape()
    out = graph_conv(tape, tape.tensor(X), np.zeros((5, 5)), hs)
    assert np.allclose(out.data, X @ hs[0].data, atol=1e-14)


def test_conv_single_tap_identity_filter_is_identity():
    rng = np.random.default_rng(3)
    X = rng.standard_normal((2, 6, 3))
    tape = Tape()
    out = graph_conv(tape, tape.tensor(X), ring_shift(6), [Tensor(np.eye(3))])
    assert np.array_equal(out.data, X)


def test_conv_matches_explicit_power_oracle():
    rng = np.random.default_rng(4)
    for trial in range(5):
        n, fin, fout, K = rng.integers(3, 8), rng.integers(1, 4), \
            rng.integers(1, 4), rng.integers(1, 5)
        W = rng.standard_normal((n, n))
        W = 0.5 * (W + W.T) / n
        X = rng.standard_normal((2, n, fin))
        hs = [Tensor(rng.standard_normal((fin, fout))) for _ in range(K)]
        tape = Tape()
        out = graph_conv(tape, tape.tensor(X), W, hs)
        ref = oracles.explicit_graph_conv(W, X, [h.data for h in hs])
        assert np.max(np.abs(out.data - ref)) <= 1e-12


def test_conv_gradients_flow_to_filters_and_input():
    rng = np.random.default_rng(5)
    X0 = rng.standard_normal((1, 4, 2))
    W = ring_shift(4)
    hs = [Tensor(rng.standard_normal((2, 2))) for _ in range(2)]

    def f_x(t, x):
        return t.sumsq(graph_conv(t, x, W, hs))

    tape = Tape()
    x = tape.tensor(X0)
    tape.backward(f_x(tape, x))
    def f(xf):
        t = Tape()
        return float(f_x(t, t.tensor(xf)).data)
    assert oracles.rel_err(x.grad, oracles.fd_gradient(f, X0)) <= 1e-6
    assert all(h.grad is not None for h in hs)


def test_gnn_forward_zero_filters_give_zero_output(mm14):
    cfg = GnnConfig(widths=(2, 8, 2), hops=(2, 2))
    thetas = tensor_thetas([[np.zeros((2, 8)), np.zeros((2, 8))],
                            [np.zeros((8, 2)), np.zeros((8, 2))]])
    tape = Tape()
    X = tape.tensor(np.random.default_rng(6).standard_normal((3, 14, 2)))
    out = gnn_forward(tape, X, ring_shift(14), thetas, cfg)
    assert np.array_equal(out.data, np.zeros((3, 14, 2)))


def test_gnn_forward_locality():
    # zeroing inputs beyond sum(K_l - 1) hops of a node leaves its row bit-equal
    rng = np.random.default_rng(7)
    n = 9
    W = np.zeros((n, n))
    for i in range(n - 1):           # path graph: hop distance = index distance
        W[i, i + 1] = W[i + 1, i] = 1.0 / 3.0
    cfg = GnnConfig(widths=(2, 3, 2), hops=(3, 2))
    thetas = tensor_thetas(init_gnn_params(cfg, rng))
    radius = sum(k - 1 for k in cfg.hops)   # = 3
    node = 0
    X = rng.standard_normal((1, n, 2))
    X_far = X.copy()
    X_far[0, radius + 1:, :] = 0.0           # untouched: nodes 0..3
    tape = Tape()
    full = gnn_forward(tape, tape.tensor(X), W, thetas, cfg).data
    tape = Tape()
    masked = gnn_forward(tape, tape.tensor(X_far), W, thetas, cfg).data
    assert np.array_equal(full[0, node], masked[0, node])
    # and a node inside the zeroed zone does change
    assert not np.array_equal(full[0, n - 1], masked[0, n - 1])


# ---------------------------------------------------------------------------
# model assembly

def test_model_shape_validation(mm14):
    cfg = GnnConfig(widths=(2, 4, 2), hops=(2, 2))
    model = init_unrolled(ring_shift(14), cfg, mm14, unroll=1)
    with pytest.raises(ConfigError):
        UnrolledModel(W=ring_shift(14), cfg=GnnConfig(widths=(2, 4, 3), hops=(2, 2)),
                      n_meter=mm14.n_meter, blocks=model.blocks)
    with pytest.raises(DimensionError):
        UnrolledModel(W=ring_shift(13), cfg=cfg, n_meter=mm14.n_meter,
                      blocks=model.blocks)
    bad = init_unrolled(ring_shift(14), cfg, mm14, unroll=1)
    bad.blocks[1].thetas[0][0].data = np.zeros((3, 4))
    with pytest.raises(DimensionError, match="block 1"):
        UnrolledModel(W=ring_shift(14), cfg=cfg, n_meter=mm14.n_meter,
                      blocks=bad.blocks)


def test_init_validation(mm14):
    cfg = GnnConfig(widths=(2, 4, 2), hops=(2, 2))
    with pytest.raises(ConfigError, match="strategy"):
        init_unrolled(ring_shift(14), cfg, mm14, strategy="zeros")
    with pytest.raises(ConfigError, match="unroll"):
        init_unrolled(ring_shift(14), cfg, mm14, unroll=-1)
    with pytest.raises(DimensionError):
        init_unrolled(ring_shift(12), cfg, mm14)
    with pytest.raises(InitError, match="warm initialization failed"):
        init_unrolled(ring_shift(14), cfg, mm14, lam=0.0)


def test_warm_init_blocks_share_coefficients(mm14):
    cfg = GnnConfig(widths=(2, 4, 2), hops=(2, 2))
    model = init_unrolled(ring_shift(14), cfg, mm14, lam=1.0, unroll=3, seed=5)
    assert len(model.blocks) == 4
    first = model.blocks[0]
    for blk in model.blocks[1:]:
        assert np.array_equal(blk.A.data, first.A.data)
        assert np.array_equal(blk.B.data, first.B.data)
        assert np.array_equal(blk.b.data, first.b.data)
        assert blk.A is not first.A          # copies, not shared objects
        assert not np.array_equal(blk.thetas[0][0].data,
                                  first.thetas[0][0].data)
    # warm coefficients are the flat-start closed form
    v0 = measurement.flat_state(14)
    A, B, b = solvers.regularized_coefficients(
        mm14.jacobian(v0), mm14.evaluate(v0), v0, 1.0)
    assert np.array_equal(first.A.data, A)
    assert np.array_equal(first.B.data, B)
    assert np.array_equal(first.b.data, b)


def test_random_init_is_seed_reproducible(mm14):
    cfg = GnnConfig(widths=(2, 4, 2), hops=(2, 2))
    a = init_unrolled(ring_shift(14), cfg, mm14, strategy="random", seed=9, unroll=2)
    b = init_unrolled(ring_shift(14), cfg, mm14, strategy="random", seed=9, unroll=2)
    c = init_unrolled(ring_shift(14), cfg, mm14, strategy="random", seed=10, unroll=2)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert np.array_equal(pa.data, pb.data)
    assert any(not np.array_equal(pa.data, pc.data)
               for pa, pc in zip(a.parameters(), c.parameters()))
    assert np.array_equal(a.blocks[0].b.data, np.zeros(28))


def test_tied_blocks_share_filter_tensors(mm14):
    cfg = GnnConfig(widths=(2, 4, 2), hops=(2, 2))
    model = init_unrolled(ring_shift(14), cfg, mm14, unroll=3, tied=True)
    t0 = model.blocks[0].thetas
    for blk in model.blocks[1:]:
        for la, lb in zip(t0, blk.thetas):
            for ha, hb in zip(la, lb):
                assert ha is hb
    # parameters() deduplicates the shared tensors
    n_params = len(list(model.parameters()))
    untied = init_unrolled(ring_shift(14), cfg, mm14, unroll=3, tied=False)
    assert n_params == len(list(untied.parameters())) - 3 * 4  # 4 filters/block


def test_smoother_eigenvalues_in_unit_interval(mm14):
    cfg = GnnConfig(widths=(2, 4, 2), hops=(2, 2))
    model = init_unrolled(ring_shift(14), cfg, mm14, lam=1.0)
    eigs = np.linalg.eigvalsh(0.5 * (model.blocks[0].B.data
                                     + model.blocks[0].B.data.T))
    assert eigs.min() > 0.0 and eigs.max() <= 1.0 + 1e-12


# ---------------------------------------------------------------------------
# forward pass

def test_all_zero_model_predicts_zero(mm14):
    cfg = GnnConfig(widths=(2, 4, 2), hops=(2, 2))
    model = init_unrolled(ring_shift(14), cfg, mm14, strategy="random", unroll=2)
    for blk in model.blocks:
        blk.A.data[:] = 0.0
        blk.B.data[:] = 0.0
        blk.b.data[:] = 0.0
        for layer in blk.thetas:
            for h in layer:
                h.data[:] = 0.0
    Z = np.ones((3, mm14.n_meter))
    assert np.array_equal(model.predict(Z), np.zeros((3, 28)))


def test_single_block_is_affine_readout(mm14):
    cfg = GnnConfig(widths=(2, 4, 2), hops=(2, 2))
    model = init_unrolled(ring_shift(14), cfg, mm14, strategy="random",
                          unroll=0, seed=3)
    blk = model.blocks[0]
    for layer in blk.thetas:
        for h in layer:
            h.data[:] = 0.0
    rng = np.random.default_rng(4)
    Z = rng.standard_normal((5, mm14.n_meter))
    # v_0 = 0 and zero filters: prediction = Z A^T + b
    ref = Z @ blk.A.data.T + blk.b.data
    assert np.allclose(model.predict(Z), ref, atol=1e-14)


def test_warm_model_with_zero_filters_reproduces_one_solver_step(mm14):
    cfg = GnnConfig(widths=(2, 8, 2), hops=(2, 2))
    model = init_unrolled(ring_shift(14), cfg, mm14, lam=1.0, unroll=2, seed=0)
    for blk in model.blocks:
        for layer in blk.thetas:
            for h in layer:
                h.data[:] = 0.0
    v_star = oracles.random_states(14, 1, seed=5)[0]
    z = mm14.evaluate(v_star)
    # block 1 maps v_1 = A z + B u + b with u = GNN(v_0 = 0) = 0: exactly one
    # regularized step from the flat linearization point with zero prior
    _, vs, us = unrolled_forward(model, z)
    assert np.array_equal(us[0], np.zeros((1, 28)))
    v0 = measurement.flat_state(14)
    rep = solvers.altmin_regularized(
        z, mm14, prior=lambda v: np.zeros_like(v), v0=v0,
        opts=SolverOptions(max_iter=1, tol=1e-30, lam=1.0))
    assert np.max(np.abs(vs[1][0] - rep.v)) <= 1e-10


def test_skip_connection_passes_measurement_gradient(mm14):
    cfg = GnnConfig(widths=(2, 4, 2), hops=(2, 2))
    model = init_unrolled(ring_shift(14), cfg, mm14, lam=1.0, unroll=2)
    for blk in model.blocks:
        for layer in blk.thetas:
            for h in layer:
                h.data[:] = 0.0
    tape = Tape()
    z = tape.tensor(np.ones((1, mm14.n_meter)))
    v = model.forward(tape, z)
    tape.backward(tape.sumsq(v))
    assert z.grad is not None
    assert np.linalg.norm(z.grad) > 1e-6


def test_forward_rejects_wrong_width(mm14):
    cfg = GnnConfig(widths=(2, 4, 2), hops=(2, 2))
    model = init_unrolled(ring_shift(14), cfg, mm14)
    with pytest.raises(DimensionError):
        model.predict(np.zeros((2, mm14.n_meter + 1)))


def test_predict_matches_unrolled_forward(mm14):
    cfg = GnnConfig(widths=(2, 4, 2), hops=(2, 2))
    model = init_unrolled(ring_shift(14), cfg, mm14, seed=8)
    Z = np.random.default_rng(9).standard_normal((4, mm14.n_meter))
    v, vs, us = unrolled_forward(model, Z)
    assert np.array_equal(model.predict(Z), v)
    assert len(vs) == len(model.blocks) + 1
    assert len(us) == len(model.blocks)
    assert np.array_equal(vs[0], np.zeros((4, 28)))


# ---------------------------------------------------------------------------
# training

def toy_dataset(mm14, count=12, seed=0, test=4):
    V = oracles.random_states(14, count, seed=seed)
    Z = mm14.evaluate_batch(V)
    split = ["train"] * (count - test) + ["test"] * test
    return Dataset(Z=Z, V=V, split=split,
                   selection=mm14.selection.to_dict(), meta={})


def test_zero_epochs_leaves_model_bit_identical(mm14):
    cfg = GnnConfig(widths=(2, 4, 2), hops=(2, 2))
    model = init_unrolled(ring_shift(14), cfg, mm14, seed=1)
    before = [p.data.copy() for p in model.parameters()]
    _, history = train(model, toy_dataset(mm14), epochs=0)
    for p, ref in zip(model.parameters(), before):
        assert np.array_equal(p.data, ref)
    assert len(history) == 1 and history[0][0] == 0


def test_training_is_seed_deterministic(mm14):
    cfg = GnnConfig(widths=(2, 4, 2), hops=(2, 2))
    ds = toy_dataset(mm14)

    def run():
        model = init_unrolled(ring_shift(14), cfg, mm14, seed=2, unroll=1)
        return train(model, ds, epochs=3, batch=4, seed=7)

    ma, ha = run()
    mb, hb = run()
    assert ha == hb
    for pa, pb in zip(ma.parameters(), mb.parameters()):
        assert np.array_equal(pa.data, pb.data)


def test_training_memorizes_single_sample(mm14):
    cfg = GnnConfig(widths=(2, 8, 2), hops=(2, 2))
    model = init_unrolled(ring_shift(14), cfg, mm14, lam=1.0, unroll=1, seed=0)
    ds = toy_dataset(mm14, count=1, test=0)
    _, history = train(model, ds, epochs=200, batch=1, lr=1e-2)
    assert history[-1][1] < 0.01 * history[0][1]


def test_history_tracks_train_and_test_losses(mm14):
    cfg = GnnConfig(widths=(2, 4, 2), hops=(2, 2))
    model = init_unrolled(ring_shift(14), cfg, mm14, seed=3, unroll=1)
    ds = toy_dataset(mm14)
    _, history = train(model, ds, epochs=4, batch=4, lr=1e-3)
    assert [row[0] for row in history] == [0, 1, 2, 3, 4]
    assert all(len(row) == 3 for row in history)
    tr0 = evaluate_loss(model, ds.Z[ds.indices("train")], ds.V[ds.indices("train")])
    assert np.isclose(history[-1][1], tr0, atol=1e-12)
    assert history[-1][1] < history[0][1]


def test_training_validation_errors(mm14):
    cfg = GnnConfig(widths=(2, 4, 2), hops=(2, 2))
    model = init_unrolled(ring_shift(14), cfg, mm14)
    ds = toy_dataset(mm14)
    with pytest.raises(ConfigError):
        train(model, ds, epochs=-1)
    with pytest.raises(ConfigError):
        train(model, ds, epochs=1, batch=0)
    empty = Dataset(Z=ds.Z, V=ds.V, split=["test"] * ds.count,
                    selection=ds.selection, meta={})
    with pytest.raises(ConfigError, match="train"):
        train(model, empty, epochs=1)


@pytest.mark.filterwarnings("ignore:overflow", "ignore:invalid value")
def test_training_reports_non_finite_batches(mm14):
    cfg = GnnConfig(widths=(2, 4, 2), hops=(2, 2))
    model = init_unrolled(ring_shift(14), cfg, mm14, strategy="random", seed=0)
    model.blocks[-1].A.data[:] = 1e308    # final readout overflows to inf
    ds = toy_dataset(mm14, count=3, test=0)
    with pytest.raises(NumericsError, match="samples"):
        train(model, ds, epochs=1, batch=3)


def test_evaluate_loss_empty_split_is_nan(mm14):
    cfg = GnnConfig(widths=(2, 4, 2), hops=(2, 2))
    model = init_unrolled(ring_shift(14), cfg, mm14)
    assert np.isnan(evaluate_loss(model, np.zeros((0, mm14.n_meter)),
                                  np.zeros((0, 28))))


# ---------------------------------------------------------------------------
# dense baseline

def test_fnn_model_shapes_and_training(mm14):
    ds = toy_dataset(mm14)
    model = FnnModel(widths=(mm14.n_meter, 16, 28), seed=0)
    pred = model.predict(ds.Z)
    assert pred.shape == (12, 28)
    _, history = train(model, ds, epochs=30, batch=4, lr=1e-3)
    assert history[-1][1] < history[0][1]


def test_fnn_final_layer_is_linear():
    model = FnnModel(widths=(3, 5, 2), seed=1)
    Z = np.random.default_rng(2).standard_normal((40, 3))
    out = model.predict(Z)
    assert (out < 0).any()       # relu-only stacks cannot go negative
