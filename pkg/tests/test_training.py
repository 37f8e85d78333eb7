import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from skelpaint.autodiff_net import NetConfig, init_model
from skelpaint.colorize import build_cloud
from skelpaint.evalbench import SyntheticSpec, generate_sequences
from skelpaint.skeleton_data import SkeletonSequence
from skelpaint.training import (
    AdamState,
    ClassifierConfig,
    EmptyClass,
    PretrainConfig,
    adam_step,
    baseline_model,
    config_from_mapping,
    cosine_lr,
    encoder_digest,
    extract_features,
    finetune,
    fuse_features,
    labeled_count,
    linear_probe,
    nesterov_sgd_step,
    pretrain_stream,
    read_config,
    sample_labeled_subset,
    sort_streams,
    stream_input,
)
from skelpaint.autodiff_net.tensor import ShapeMismatch

NET = NetConfig(k=3, widths=(4, 4), feat_dim=6, grid_size=4, decoder_hidden=8)


class PoisonMeta:
    """Metadata stand-in that fails loudly if anything reads it."""

    def __getattr__(self, name):
        raise AssertionError(f"label metadata was read ({name})")


def tiny_data(n_classes=2, per_class=4, seed=0):
    spec = SyntheticSpec(n_classes=n_classes, per_class=per_class, n_joints=5, n_frames=8, seed=seed)
    seqs = generate_sequences(spec)
    labels = np.array([s.meta.label for s in seqs])
    return seqs, [build_cloud(s) for s in seqs], labels


def test_cosine_endpoints():
    assert cosine_lr(0, 10, 1e-5, 1e-7) == 1e-5
    assert cosine_lr(10, 10, 1e-5, 1e-7) == 1e-7
    assert cosine_lr(5, 10, 1e-5, 1e-7) == pytest.approx((1e-5 + 1e-7) / 2, rel=1e-12)


@given(st.integers(1, 500), st.floats(1e-8, 1.0))
def test_cosine_monotone(total, lr_max):
    lrs = [cosine_lr(e, total, lr_max, lr_max / 100) for e in range(total + 1)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_adam_zero_gradient_is_noop():
    p = {"w": np.array([1.0, -2.0])}
    new, state = adam_step(p, {"w": np.zeros(2)}, AdamState(), 0.1)
    np.testing.assert_array_equal(new["w"], p["w"])
    assert state.step == 1


def test_adam_first_step_sign_like():
    g = np.array([0.5, -3.0, 1e-3])
    new, _ = adam_step({"w": np.zeros(3)}, {"w": g}, AdamState(), 0.01, eps=1e-8)
    np.testing.assert_allclose(new["w"], -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12)


def test_adam_two_steps_by_hand():
    b1, b2, lr, eps = 0.9, 0.999, 0.1, 1e-8
    g1, g2 = 1.0, -2.0
    m1, v1 = (1 - b1) * g1, (1 - b2) * g1**2
    p1 = -lr * (m1 / (1 - b1)) / (math.sqrt(v1 / (1 - b2)) + eps)
    m2, v2 = b1 * m1 + (1 - b1) * g2, b2 * v1 + (1 - b2) * g2**2
    p2 = p1 - lr * (m2 / (1 - b1**2)) / (math.sqrt(v2 / (1 - b2**2)) + eps)
    p, s = adam_step({"w": np.zeros(1)}, {"w": np.array([g1])}, AdamState(), lr)
    p, s = adam_step(p, {"w": np.array([g2])}, s, lr)
    assert p["w"][0] == pytest.approx(p2, rel=1e-12)


def test_adam_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState(), 0.1)


def test_nesterov_without_momentum_is_sgd():
    g = np.array([1.0, -2.0])
    new, _ = nesterov_sgd_step({"w": np.ones(2)}, {"w": g}, {}, 0.1, momentum=0.0)
    np.testing.assert_allclose(new["w"], 1.0 - 0.1 * g)


def test_nesterov_by_hand():
    mu, lr = 0.9, 0.1
    g1, g2 = 1.0, 3.0
    v1 = g1
    p1 = -lr * (g1 + mu * v1)
    v2 = mu * v1 + g2
    p2 = p1 - lr * (g2 + mu * v2)
    p, v = nesterov_sgd_step({"w": np.zeros(1)}, {"w": np.array([g1])}, {}, lr, mu)
    p, v = nesterov_sgd_step(p, {"w": np.array([g2])}, v, lr, mu)
    assert p["w"][0] == pytest.approx(p2, rel=1e-12)


def test_config_validation():
    with pytest.raises(ValueError):
        PretrainConfig(lr_max=1e-7, lr_min=1e-5)
    with pytest.raises(ValueError):
        PretrainConfig(input_mode="depth")
    with pytest.raises(ValueError):
        ClassifierConfig(fraction=0.0)
    with pytest.raises(ValueError):
        ClassifierConfig(protocol="weak")


def test_published_defaults():
    p, c = PretrainConfig(), ClassifierConfig()
    assert (p.epochs, p.batch_size, p.lr_max, p.lr_min) == (150, 24, 1e-5, 1e-7)
    assert (p.beta1, p.beta2, p.eps) == (0.9, 0.999, 1e-8)
    assert (c.epochs, c.batch_size, c.lr_max, c.lr_min, c.momentum) == (100, 32, 1e-3, 1e-5, 0.9)


def test_read_config(tmp_path):
    path = tmp_path / "toy.cfg"
    path.write_text("# toy\nepochs = 3\nlr_max = 0.001  # faster\n[extra]\nscheme = spatial\n")
    values = read_config(path)
    cfg = config_from_mapping(PretrainConfig, values, seed=4)
    assert (cfg.epochs, cfg.lr_max, cfg.scheme, cfg.seed) == (3, 1e-3, "spatial", 4)
    assert config_from_mapping(ClassifierConfig, {"standardize": "no"}).standardize is False


def test_stream_input_modes():
    _, clouds, _ = tiny_data(2, 1)
    raw = stream_input(clouds[0], "temporal", "raw")
    assert raw.shape == (40, 6) and np.all(raw[:, 3:] == 0)
    hint = stream_input(clouds[0], "temporal", "hint", 0.5)
    odd = clouds[0].provenance[:, 0] % 2 == 1
    assert np.all(hint[~odd, 3:] == 0) and np.all(hint[odd, 3:].sum(axis=1) > 0)


def test_pretrain_reduces_loss_and_is_deterministic():
    seqs, _, _ = tiny_data()
    cfg = PretrainConfig(epochs=4, batch_size=4, lr_max=1e-2, lr_min=1e-3, seed=1)
    a = pretrain_stream(seqs, cfg, NET)
    b = pretrain_stream(seqs, cfg, NET)
    assert len(a.losses) == 4 and all(np.isfinite(a.losses))
    assert a.losses[-1] < a.losses[0]
    assert a.losses == b.losses
    assert encoder_digest([a.model]) == encoder_digest([b.model])


def test_pretrain_never_reads_labels():
    seqs, _, _ = tiny_data()
    poisoned = [SkeletonSequence(s.joints, s.person_ids, PoisonMeta()) for s in seqs]
    res = pretrain_stream(poisoned, PretrainConfig(epochs=1, batch_size=4, seed=0), NET)
    assert np.isfinite(res.losses[0])


def test_pretrain_streams_differ_by_scheme():
    seqs, _, _ = tiny_data()
    cfg = dict(epochs=1, batch_size=8, lr_max=1e-2, lr_min=1e-2)
    t = pretrain_stream(seqs, PretrainConfig(scheme="temporal", **cfg), NET).model
    s = pretrain_stream(seqs, PretrainConfig(scheme="spatial", **cfg), NET).model
    assert encoder_digest([t]) != encoder_digest([s])


def test_sort_and_fuse():
    models = [init_model(NET, 0, "spatial"), init_model(NET, 0, "temporal")]
    assert [m.scheme for m in sort_streams(models)] == ["temporal", "spatial"]
    fused = fuse_features([np.ones((2, 3)), np.zeros((2, 4))])
    assert fused.shape == (2, 7)
    with pytest.raises(ValueError):
        fuse_features([])


def test_feature_shapes():
    _, clouds, _ = tiny_data()
    feats = extract_features([init_model(NET, 0, "temporal"), init_model(NET, 1, "spatial")], clouds)
    assert [f.shape for f in feats] == [(8, 6), (8, 6)]


@pytest.mark.parametrize("fusion", ["concat", "score"])
def test_linear_probe_freezes_encoder(fusion):
    _, clouds, labels = tiny_data()
    models = [init_model(NET, 0, "temporal"), init_model(NET, 1, "spatial")]
    before = encoder_digest(models)
    res = linear_probe(models, clouds, labels, clouds, labels,
                       ClassifierConfig(epochs=3, batch_size=4, fusion=fusion, seed=2))
    assert encoder_digest(models) == before
    assert 0.0 <= res.accuracy <= 1.0
    w = res.classifier.heads[0][0]
    assert w.shape == ((12 if fusion == "concat" else 6), 2)


def test_finetune_updates_copy_only():
    _, clouds, labels = tiny_data()
    model = init_model(NET, 0, "temporal")
    before = encoder_digest([model])
    res = finetune([model], clouds, labels, clouds, labels,
                   ClassifierConfig(epochs=2, batch_size=4, lr_max=0.05, lr_min=0.01, protocol="supervised"))
    assert encoder_digest([model]) == before
    assert encoder_digest(res.models) != before
    assert all(np.isfinite(h["loss"]) for h in res.history if h["split"] == "train")


def test_semi_supervised_uses_subset():
    _, clouds, labels = tiny_data(per_class=10)
    res = finetune([init_model(NET, 0, "temporal")], clouds, labels, clouds, labels,
                   ClassifierConfig(epochs=1, batch_size=4, protocol="semi", fraction=0.2, seed=3))
    assert 0.0 <= res.accuracy <= 1.0


def test_baseline_model_is_raw():
    m = baseline_model(NET, 0)
    assert m.input_mode == "raw"


def test_labeled_count_anchors():
    assert labeled_count(0.05, 660) == 33
    assert labeled_count(0.01, 40) == 1
    assert labeled_count(0.1, 660) == 66
    assert labeled_count(0.01, 660) == 6


def test_subset_counts_and_nesting():
    labels = np.repeat(np.arange(3), 660)
    prev = None
    for frac in (0.01, 0.05, 0.1, 0.2, 0.4, 1.0):
        sub = sample_labeled_subset(labels, frac, seed=11)
        assert sub.counts() == {c: labeled_count(frac, 660) for c in range(3)}
        for c, ids in sub.per_class.items():
            assert np.all(labels[ids] == c)
            if prev is not None:
                assert set(prev.per_class[c].tolist()) <= set(ids.tolist())
        prev = sub


@given(st.integers(0, 1000), st.lists(st.integers(1, 50), min_size=1, max_size=5), st.floats(0.001, 1.0))
@settings(max_examples=50)
def test_subset_property(seed, sizes, frac):
    labels = np.concatenate([np.full(n, c) for c, n in enumerate(sizes)])
    sub = sample_labeled_subset(labels, frac, seed)
    for c, n in enumerate(sizes):
        assert len(sub.per_class[c]) == max(1, math.floor(frac * n + 1e-9))
    again = sample_labeled_subset(labels, frac, seed)
    np.testing.assert_array_equal(sub.all_ids, again.all_ids)


def test_subset_empty_class():
    with pytest.raises(EmptyClass):
        sample_labeled_subset(np.array([0, 0, 2]), 0.5, 0)
