import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from skelpaint.autodiff_net import (
    NetConfig,
    Tensor,
    TooFewPoints,
    chamfer_loss,
    decode,
    edge_conv,
    encode,
    folding_grid,
    forward_repaint,
    init_model,
    knn_graph,
    load_checkpoint,
    save_checkpoint,
)
from skelpaint.autodiff_net import tensor as ad
from skelpaint.autodiff_net.checkpoint import CheckpointError

from gradcheck import TOY, numeric_grad, pipeline_grad_error, rel_err

GOLDEN = Path(__file__).with_name("golden_f8.json")


def _check_op(build, *shapes, seed=0, positive=False):
    """Compare backward() against central differences for ``sum(w * build(*inputs))``."""
    rng = np.random.default_rng(seed)
    arrays = [rng.normal(size=s) for s in shapes]
    if positive:
        arrays = [np.abs(a) + 0.5 for a in arrays]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    probe = rng.normal(size=build(*leaves).shape)

    def f():
        return float(np.sum(probe * build(*[Tensor(a) for a in arrays]).data))

    out = ad.sum(ad.mul(build(*leaves), probe))
    out.backward()
    for leaf, arr in zip(leaves, arrays):
        assert rel_err(leaf.grad, numeric_grad(f, arr)) < 1e-4


OPS = {
    "add": (lambda a, b: a + b, [(3, 4), (4,)]),
    "sub": (lambda a, b: a - b, [(3, 4), (3, 1)]),
    "mul": (lambda a, b: a * b, [(2, 3), (2, 3)]),
    "relu": (lambda a: ad.relu(a), [(5, 4)]),
    "leaky": (lambda a: ad.leaky_relu(a, 0.2), [(5, 4)]),
    "matmul": (lambda a, b: a @ b, [(2, 3, 4), (4, 5)]),
    "linear": (lambda a, w, b: ad.linear(a, w, b), [(6, 4), (4, 3), (3,)]),
    "reshape": (lambda a: ad.reshape(a, (6, 2)), [(3, 4)]),
    "broadcast": (lambda a: ad.broadcast_to(a, (3, 2, 4)), [(2, 1)]),
    "concat": (lambda a, b: ad.concat([a, b], axis=0), [(2, 3), (4, 3)]),
    "index": (lambda a: a[np.array([0, 2, 2]), 1:], [(3, 4)]),
    "sum": (lambda a: ad.sum(a, axis=1), [(3, 4)]),
    "mean": (lambda a: ad.mean(a, axis=0, keepdims=True), [(3, 4)]),
    "max": (lambda a: ad.max(a, axis=1), [(4, 5)]),
    "log_softmax": (lambda a: ad.log_softmax(a), [(3, 5)]),
    "cross_entropy": (lambda a: ad.cross_entropy(a, [0, 2, 1]), [(3, 4)]),
    "batch_standardize": (lambda a: ad.batch_standardize(a, 1e-5), [(5, 3)]),
    "gather": (lambda a: ad.gather_neighbors(a, np.array([[[1, 2], [0, 0], [2, 1]]])), [(1, 3, 2)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
@pytest.mark.parametrize("seed", range(20))
def test_op_gradients(name, seed):
    build, shapes = OPS[name]
    _check_op(build, *shapes, seed=seed)


@pytest.mark.parametrize("seed", range(5))
def test_three_layer_mlp(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(7, 5))
    ws = [rng.normal(size=s) for s in ((5, 8), (8, 8), (8, 3))]
    bs = [rng.normal(size=s[1]) for s in ((5, 8), (8, 8), (8, 3))]

    def net(params):
        h = Tensor(x)
        for i, (w, b) in enumerate(params):
            h = ad.linear(h, w, b)
            if i < 2:
                h = ad.relu(h)
        return ad.sum(ad.mul(h, h))

    leaves = [(Tensor(w, requires_grad=True), Tensor(b, requires_grad=True)) for w, b in zip(ws, bs)]
    net(leaves).backward()
    for (tw, tb), w, b in zip(leaves, ws, bs):
        f = lambda: float(net([(Tensor(a), Tensor(c)) for a, c in zip(ws, bs)]).data)  # noqa: E731
        assert rel_err(tw.grad, numeric_grad(f, w)) < 1e-4
        assert rel_err(tb.grad, numeric_grad(f, b)) < 1e-4


def test_batch_standardize_values():
    x = np.random.default_rng(0).normal(size=(6, 3))
    y = ad.batch_standardize(Tensor(x), eps=0.0).data
    np.testing.assert_allclose(y.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.std(axis=0), 1.0, atol=1e-12)


def test_linear_map_gradient_is_outer_product():
    x = np.array([1.0, 2.0, 3.0])
    W = Tensor(np.zeros((3, 2)), requires_grad=True)
    ad.sum(Tensor(x) @ W).backward()
    np.testing.assert_array_equal(W.grad, np.outer(x, np.ones(2)))


def test_unused_parameter_has_no_gradient():
    a = Tensor(np.ones(3), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=True)
    ad.sum(a * 2.0).backward()
    assert b.grad is None
    assert a.grad.shape == a.shape


def test_gradients_accumulate_over_reuse():
    a = Tensor(np.array([2.0]), requires_grad=True)
    ad.sum(a * a + a).backward()
    np.testing.assert_allclose(a.grad, [5.0])


def test_non_scalar_loss():
    with pytest.raises(ad.NonScalarLoss):
        (Tensor(np.ones(3), requires_grad=True) * 2.0).backward()


def test_nan_detected():
    with pytest.raises(ad.NaNDetected):
        Tensor(np.ones(2), requires_grad=True) * np.array([1.0, np.nan])


def test_matmul_shape_mismatch():
    with pytest.raises(ad.ShapeMismatch):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((4, 2)))


def test_knn_collinear():
    pts = np.array([[0.0], [1.0], [3.0]])
    assert knn_graph(pts, 1)[:, 0].tolist() == [1, 0, 1]


def test_knn_full_and_duplicates():
    pts = np.random.default_rng(0).normal(size=(5, 3))
    g = knn_graph(pts, 4)
    for i, row in enumerate(g):
        assert sorted(row.tolist()) == [j for j in range(5) if j != i]
    dup = np.array([[0.0, 0.0], [0.0, 0.0], [5.0, 5.0]])
    assert knn_graph(dup, 1)[:, 0].tolist() == [1, 0, 0]


def test_knn_too_few_points():
    with pytest.raises(TooFewPoints):
        knn_graph(np.zeros((3, 2)), 3)


def test_edge_conv_identity_mlp():
    x = np.random.default_rng(1).normal(size=(1, 4, 2))
    graph = np.array([[[1], [2], [3], [0]]])
    out = edge_conv(Tensor(x), graph, Tensor(np.eye(4)), Tensor(np.zeros(4)), slope=1.0)
    expect = np.concatenate([x[0], x[0][[1, 2, 3, 0]] - x[0]], axis=1)
    np.testing.assert_allclose(out.data[0], expect, atol=1e-15)


def test_edge_conv_identical_points():
    x = np.ones((1, 5, 3))
    rng = np.random.default_rng(2)
    w, b = Tensor(rng.normal(size=(6, 4))), Tensor(rng.normal(size=4))
    out = edge_conv(Tensor(x), knn_graph(x[0], 2)[None], w, b)
    np.testing.assert_allclose(out.data, np.broadcast_to(out.data[0, 0], out.shape))


def test_edge_conv_shape_mismatch():
    with pytest.raises(ad.ShapeMismatch):
        edge_conv(Tensor(np.ones((1, 3, 2))), np.zeros((1, 3, 1), int), Tensor(np.ones((5, 2))), Tensor(np.ones(2)))


@given(st.integers(0, 10_000))
@settings(max_examples=20, deadline=None)
def test_edge_conv_equivariance(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(10, 4))
    w, b = Tensor(rng.normal(size=(8, 5))), Tensor(rng.normal(size=5))
    g = knn_graph(x, 3)
    perm = rng.permutation(10)
    inv = np.argsort(perm)
    out = edge_conv(Tensor(x[None]), g[None], w, b).data[0]
    out_p = edge_conv(Tensor(x[perm][None]), inv[g[perm]][None], w, b).data[0]
    np.testing.assert_allclose(out_p, out[perm], atol=1e-9, rtol=0)


@given(st.integers(0, 10_000))
@settings(max_examples=10, deadline=None)
def test_encode_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    model = init_model(TOY, seed)
    cloud = rng.normal(size=(20, 6))
    f = encode(model, cloud).data
    f_p = encode(model, cloud[rng.permutation(20)]).data
    assert np.max(np.abs(f - f_p)) <= 1e-9


def test_encode_batch_matches_single():
    rng = np.random.default_rng(0)
    model = init_model(TOY, 0)
    clouds = rng.normal(size=(3, 12, 6))
    batch = encode(model, clouds).data
    for i in range(3):
        np.testing.assert_array_equal(batch[i], encode(model, clouds[i]).data)


def test_encode_too_few_points():
    with pytest.raises(TooFewPoints):
        encode(init_model(TOY), np.zeros((TOY.k, 6)))


def test_encode_rejects_three_channels():
    with pytest.raises(ad.ShapeMismatch):
        encode(init_model(TOY), np.zeros((10, 3)))


def test_decode_counts_and_zero_model():
    cfg = NetConfig(k=2, widths=(4,), feat_dim=5, grid_size=2, decoder_hidden=3)
    model = init_model(cfg)
    assert decode(model, np.ones(5)).shape == (4, 6)
    for p in model.params.values():
        p.data[...] = 0.0
    assert np.all(decode(model, np.zeros(5)).data == 0.0)


def test_grid_extent():
    g = folding_grid(4)
    assert g.shape == (16, 2)
    assert g.min() == -0.3 and g.max() == 0.3


def test_forward_count_independent_of_input():
    model = init_model(TOY)
    rng = np.random.default_rng(0)
    for n in (8, 16, 40):
        assert forward_repaint(model, rng.normal(size=(n, 6))).shape == (16, 6)


def test_streams_do_not_share_parameters():
    a, b = init_model(TOY, 0, "temporal"), init_model(TOY, 0, "spatial")
    assert all(a.params[k] is not b.params[k] for k in a.params)
    assert all(a.params[k].data is not b.params[k].data for k in a.params)


def test_init_bounds_and_determinism():
    m1, m2 = init_model(TOY, 5), init_model(TOY, 5)
    for k, p in m1.params.items():
        fan_in = p.shape[0] if k.endswith(".w") else m1.params[k[:-2] + ".w"].shape[0]
        assert np.all(np.abs(p.data) <= 1 / np.sqrt(fan_in))
        np.testing.assert_array_equal(p.data, m2.params[k].data)


def test_forward_deterministic():
    cloud = np.random.default_rng(4).normal(size=(16, 6))
    a = forward_repaint(init_model(TOY, 1), cloud).data
    b = forward_repaint(init_model(TOY, 1), cloud).data
    assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("seed", range(3))
def test_pipeline_gradient(seed):
    assert pipeline_grad_error(seed) < 1e-3


def test_batched_chamfer_loss_is_mean():
    rng = np.random.default_rng(0)
    pred = Tensor(rng.normal(size=(2, 5, 6)), requires_grad=True)
    tg = [rng.normal(size=(7, 6)), rng.normal(size=(4, 6))]
    loss = chamfer_loss(pred, tg)
    single = [float(chamfer_loss(Tensor(pred.data[i]), tg[i]).data) for i in range(2)]
    assert float(loss.data) == pytest.approx(np.mean(single), abs=1e-15)
    loss.backward()
    f = lambda: float(chamfer_loss(Tensor(arr), tg).data)  # noqa: E731
    arr = pred.data.copy()
    assert rel_err(pred.grad, numeric_grad(f, arr)) < 1e-4


def _golden_case():
    rng = np.random.default_rng(1234)
    model = init_model(TOY, 7)
    cloud = rng.normal(size=(16, 6))
    feat = encode(model, cloud).data
    return feat, decode(model, feat).data


def test_golden_regression():
    ref = json.loads(GOLDEN.read_text())
    feat, out = _golden_case()
    np.testing.assert_allclose(feat, ref["feature"], rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(out, ref["decoded"], rtol=1e-12, atol=1e-14)


def test_checkpoint_roundtrip(tmp_path):
    m = init_model(TOY, 3, "spatial", "hint", 0.25)
    save_checkpoint(tmp_path / "m.skpt", {"spatial": m}, extra={"note": "x"}, arrays={"v": np.arange(3.0)})
    models, extra, arrays = load_checkpoint(tmp_path / "m.skpt")
    back = models["spatial"]
    assert back.config == m.config
    assert (back.scheme, back.input_mode, back.hint_ratio) == ("spatial", "hint", 0.25)
    for k, p in m.params.items():
        assert back.params[k].data.tobytes() == p.data.tobytes()
    assert extra["note"] == "x"
    np.testing.assert_array_equal(arrays["v"], np.arange(3.0))


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "bad.skpt").write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.skpt")
    good = tmp_path / "g.skpt"
    save_checkpoint(good, init_model(TOY))
    (tmp_path / "t.skpt").write_bytes(good.read_bytes()[:-10])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "t.skpt")
