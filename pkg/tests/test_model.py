import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from adlda import tensor as T
from adlda.model import (
    CheckpointError,
    ModelSpec,
    adlda_loss,
    attention_scores,
    build_model,
    checkpoint_bytes,
    domain_sample_weights,
    domain_weights,
    load_checkpoint,
    save_checkpoint,
    strip_domain_head,
)
from adlda.oracles import TOY_BATCH, toy_model
from adlda.tensor import ShapeError, Tensor

CONV = ModelSpec(input_shape=(1, 8, 8), class_count=3, domain_count=4, conv_filters=(4, 8), domain_hidden=(16,))


def images(n=6, seed=0, shape=(1, 8, 8)):
    return np.random.default_rng(seed).random((n,) + shape).astype(np.float32)


def test_default_architecture():
    spec = ModelSpec(input_shape=(3, 32, 32), class_count=10)
    m = build_model(spec, 0)
    out = m.forward(images(2, shape=(3, 32, 32)), np.array([0, 4]))
    assert out.class_logits.shape == (2, 10)
    assert out.domain_logits.shape == (2, 5)
    assert out.attention.shape == (2, 2, 64, 64)  # 8x8 grid tokens, 2 heads
    assert m.domain_head.attention.width == 32
    assert [m.domain_head.mlp.layers[0].out_features, m.domain_head.mlp.layers[1].out_features] == [64, 5]


def test_zero_label_head_gives_uniform():
    m = build_model(CONV, 0)
    for _, p in m.group("label"):
        p.data[:] = 0
    logits = m.forward_class(images()).data
    assert not logits.any()
    np.testing.assert_allclose(T.softmax(Tensor(logits), axis=-1).data, 1 / 3, rtol=1e-6)


def test_identical_images_identical_rows():
    m = build_model(CONV, 1)
    x = np.repeat(images(1), 4, axis=0)
    logits = m.forward_class(x).data
    assert all(row.tobytes() == logits[0].tobytes() for row in logits)


def test_single_linear_model_matches_hand_computation():
    spec = ModelSpec(input_shape=(1, 2, 3), class_count=2, extractor="mlp", mlp_hidden=(), tokens=2, attn_heads=1,
                     domain_count=2)
    m = build_model(spec, 0)
    x = images(5, shape=(1, 2, 3))
    w, b = m.label_head.linear.weight.data, m.label_head.linear.bias.data
    b[:] = [0.25, -0.5]
    np.testing.assert_allclose(m.forward_class(x).data, x.reshape(5, -1) @ w + b, atol=1e-6)


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        build_model(CONV, 0).forward_class(images(shape=(1, 6, 6)))


def test_uniform_weights_all_ones():
    out = build_model(CONV, 0).forward(images(), np.array([0, 1, 2, 3, 0, 1]))
    assert out.domain_weights.tolist() == [1.0] * 4


def test_domain_forward_independent_of_lambda():
    m = build_model(CONV, 2)
    d = np.array([0, 1, 2, 3, 0, 1])
    m.set_lambda(0.0)
    a, _ = m.forward_domain(images(), d)
    m.set_lambda(0.8)
    b, _ = m.forward_domain(images(), d)
    assert a.data.tobytes() == b.data.tobytes()


def test_forward_class_identical_with_and_without_domain_head():
    with_head = build_model(CONV, 3)
    spec = ModelSpec(**{**CONV.to_dict(), "domain_head": False})
    without = build_model(spec, 3)
    assert with_head.forward_class(images()).data.tobytes() == without.forward_class(images()).data.tobytes()


def test_attention_weights_symmetric_monte_carlo():
    """K=2, domains drawn from the same distribution: a is centred on [1, 1]."""
    spec = ModelSpec(input_shape=(1, 8, 8), class_count=2, domain_count=2, conv_filters=(4,), weighting="attention",
                     domain_hidden=(8,))
    draws = []
    for seed in range(200):
        m = build_model(spec, seed)
        d = np.random.default_rng(seed).integers(0, 2, size=16)
        d[:2] = [0, 1]
        draws.append(m.forward(images(16, seed), d).domain_weights[0])
    draws = np.array(draws)
    se = draws.std(ddof=1) / math.sqrt(len(draws))
    assert abs(draws.mean() - 1.0) < 5 * se + 1e-12


@given(st.integers(2, 6), st.integers(1, 20), st.integers(0, 2**16))
def test_domain_weights_sum_to_k(k, n, seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, k, size=n)
    attn = rng.random((n, 2, 3, 3))
    attn /= attn.sum(axis=-1, keepdims=True)
    for mode in ("uniform", "attention"):
        a = domain_weights(mode, labels, k, attn)
        assert np.all(a >= 0)
        assert a.sum() == pytest.approx(k, abs=1e-6)
        if mode == "attention":
            assert np.all(a[np.bincount(labels, minlength=k) == 0] == 0)


def test_attention_scores_range():
    attn = np.full((3, 2, 4, 4), 0.25)
    np.testing.assert_allclose(attention_scores(attn), 0.25)


def test_lambda_zero_domain_loss_gives_no_extractor_gradient(f64):
    x, y, d = TOY_BATCH
    m = toy_model()
    m.set_lambda(0.0)
    total, ly, _ = adlda_loss(m.forward(x, d), y, d, 2)
    T.backward(total)
    g_total = {n: p.grad.copy() for n, p in m.named_parameters()}
    ref = toy_model()
    _, ly_ref, _ = adlda_loss(ref.forward(x, d), y, d, 2)
    T.backward(ly_ref)
    for n, p in ref.group("feature"):
        assert g_total[n].tobytes() == p.grad.tobytes()
    assert any(np.any(g_total[n] != 0) for n, _ in m.group("domain"))


def test_uniform_domain_logits_give_log_k(f64):
    m = build_model(CONV, 0)
    last = m.domain_head.mlp.layers[-1]
    last.weight.data[:] = 0
    last.bias.data[:] = 0
    d = np.array([0, 1, 2, 3, 1, 1])
    _, _, ld = adlda_loss(m.forward(images(), d), np.zeros(6, dtype=int), d, 4)
    # present domains {0,1,2,3}: (1/K) sum_d mean CE = ln K
    assert float(ld.data) == pytest.approx(math.log(4), abs=1e-6)


def test_two_domain_weighted_loss_by_hand(f64):
    x, y, d = TOY_BATCH
    m = toy_model()
    out = m.forward(x, d)
    _, _, ld = adlda_loss(out, y, d, 2)
    z = out.domain_logits.data
    nll = -(z[np.arange(len(d)), d] - np.log(np.exp(z).sum(axis=1)))
    expected = 0.5 * (nll[d == 0].mean() + nll[d == 1].mean())
    assert float(ld.data) == pytest.approx(expected, abs=1e-6)


def test_sample_weights():
    w = domain_sample_weights(np.array([0, 0, 1, 2, 2, 2]), np.array([1.0, 2.0, 0.5]), 3)
    np.testing.assert_allclose(w, [1 / 6, 1 / 6, 2 / 3, 0.5 / 9, 0.5 / 9, 0.5 / 9])


def test_head_separation(f64):
    x, y, d = TOY_BATCH

    def grads(which):
        m = toy_model()
        m.set_lambda(0.6)
        total, ly, ld = adlda_loss(m.forward(x, d), y, d, 2)
        T.backward({"total": total, "ly": ly, "ld": ld}[which])
        return {n: (p.grad if p.grad is not None else np.zeros_like(p.data)) for n, p in m.named_parameters()}

    g_total, g_ly, g_ld = grads("total"), grads("ly"), grads("ld")
    for n in g_total:
        if n.startswith("label_head."):
            np.testing.assert_array_equal(g_total[n], g_ly[n])
            assert not g_ld[n].any()
        if n.startswith("domain_head."):
            np.testing.assert_array_equal(g_total[n], g_ld[n])
            assert not g_ly[n].any()


def test_grl_path_equals_manual_minus_lambda_gradient(f64):
    """Extractor gradient through the GRL vs -lambda * dL_D'/dtheta_f by finite differences."""
    x, y, d = TOY_BATCH
    lam = 0.7
    m = toy_model()
    m.set_lambda(lam)
    _, _, ld = adlda_loss(m.forward(x, d), y, d, 2)
    T.backward(ld)
    (name, w), = m.group("feature")

    def ld_at(value):
        probe = toy_model()
        dict(probe.named_parameters())[name].data = np.array([[value]])
        with T.no_grad():
            return float(adlda_loss(probe.forward(x, d), y, d, 2)[2].data)

    w0, h = float(w.data.ravel()[0]), 1e-6
    manual = (ld_at(w0 + h) - ld_at(w0 - h)) / (2 * h)
    assert float(w.grad.ravel()[0]) == pytest.approx(-lam * manual, rel=1e-7)


def test_invalid_domain_labels():
    m = build_model(CONV, 0)
    out = m.forward(images(), np.zeros(6, dtype=int))
    with pytest.raises(ValueError):
        adlda_loss(out, np.zeros(6, dtype=int), np.array([0, 1, 2, 3, 4, 0]), 4)


def test_checkpoint_byte_stable_and_round_trip(tmp_path):
    m = build_model(CONV, 5)
    m.set_lambda(0.3)
    assert checkpoint_bytes(m, {"seed": 5}) == checkpoint_bytes(m, {"seed": 5})
    save_checkpoint(tmp_path / "a.adlda", m, {"seed": 5, "epoch": 2})
    save_checkpoint(tmp_path / "b.adlda", m, {"seed": 5, "epoch": 2})
    assert (tmp_path / "a.adlda").read_bytes() == (tmp_path / "b.adlda").read_bytes()
    loaded, manifest = load_checkpoint(tmp_path / "a.adlda")
    assert manifest["epoch"] == 2 and manifest["domain_count"] == 4 and manifest["lambda"] == pytest.approx(0.3)
    assert loaded.grl_lambda == pytest.approx(0.3)
    for (n, p), (_, q) in zip(m.named_parameters(), loaded.named_parameters()):
        assert p.data.astype("<f4").tobytes() == q.data.tobytes(), n
    assert loaded.forward_class(images()).data.tobytes() == m.forward_class(images()).data.tobytes()


def test_checkpoint_missing_domain_arrays(tmp_path):
    import zipfile

    save_checkpoint(tmp_path / "a.adlda", build_model(CONV, 0))
    with zipfile.ZipFile(tmp_path / "a.adlda") as zin, zipfile.ZipFile(tmp_path / "b.adlda", "w") as zout:
        for name in zin.namelist():
            if not name.startswith("params/domain_head."):
                zout.writestr(name, zin.read(name))
    with pytest.raises(CheckpointError, match="missing parameter"):
        load_checkpoint(tmp_path / "b.adlda")
    assert load_checkpoint(tmp_path / "b.adlda", class_path_only=True)[0].domain_head is None


def test_checkpoint_truncated(tmp_path):
    save_checkpoint(tmp_path / "a.adlda", build_model(CONV, 0))
    raw = (tmp_path / "a.adlda").read_bytes()
    for cut in (10, len(raw) // 2, len(raw) - 5):
        (tmp_path / "t.adlda").write_bytes(raw[:cut])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "t.adlda")


def test_strip_domain_head(tmp_path):
    m = build_model(CONV, 0)
    save_checkpoint(tmp_path / "a.adlda", m)
    strip_domain_head(tmp_path / "a.adlda", tmp_path / "s.adlda")
    stripped, manifest = load_checkpoint(tmp_path / "s.adlda")
    assert stripped.domain_head is None and manifest["model"]["domain_head"] is False
    assert stripped.forward_class(images()).data.tobytes() == m.forward_class(images()).data.tobytes()


def test_spec_validation():
    with pytest.raises(ValueError):
        ModelSpec(input_shape=(1, 8, 8), class_count=2, domain_count=1)
    with pytest.raises(ValueError):
        ModelSpec(input_shape=(1, 8, 8), class_count=2, weighting="per-sample")
    with pytest.raises(ValueError):
        build_model(ModelSpec(input_shape=(1, 2, 2), class_count=2, conv_filters=(4, 8)), 0)
