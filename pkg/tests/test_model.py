import dataclasses

import numpy as np
import pytest

from painattn.autograd import grad_check
from painattn.gradsuite import composite_cases, mini_model_case
from painattn.errors import ConfigError, DimensionError, FormatError
from painattn.layers import Conv1dSpec, LayerNorm, softmax
from painattn.model import (ClassifierHead, EncoderBlock, EncoderConfig, ModelConfig,
                            MultiHeadAttention, PainAttnNet, SeResBlock, SeResNetConfig,
                            checkpoint_bytes, classify, parse_checkpoint, validate_config)
from painattn.train import TASKS


@pytest.fixture(scope="module")
def reference_model():
    return PainAttnNet(ModelConfig(num_classes=5), seed=3)


def set_identity_tcn(mha):
    """Kernel-size-1 TCNs that copy every token into each head block."""
    h, c = mha.cfg.heads, mha.tokens
    eye = np.concatenate([np.eye(c)] * h, axis=0)[:, :, None]
    for conv in (mha.tcn_q, mha.tcn_k, mha.tcn_v):
        conv.params["weight"][...] = eye
        conv.params["bias"][...] = 0.0


# -- configuration and shapes -------------------------------------------------

def test_reference_length_trace():
    trace = validate_config(ModelConfig())
    assert trace == {"large": [57, 27, 27, 27, 25], "small": [470, 58, 58, 58, 50]}


def test_stage_shapes(reference_model):
    x = np.random.default_rng(0).standard_normal((8, 1, 2816))
    a, b, c = reference_model.features(x)
    assert a.shape == (8, 128, 75)
    assert b.shape == (8, 30, 75)
    assert c.shape == (8, 30, 75)


@pytest.mark.parametrize("task", list(TASKS))
def test_logit_shape_for_every_task(task):
    k = TASKS[task].num_classes
    model = PainAttnNet(ModelConfig.mini(k), seed=0)
    assert model.forward(np.zeros((3, 1, 2816))).shape == (3, k)


def test_bad_length_config_fails_at_build():
    cfg = ModelConfig()
    bad = dataclasses.replace(cfg.mscn.large, pool2=dataclasses.replace(cfg.mscn.large.pool2, kernel_size=2))
    with pytest.raises(ConfigError, match="75"):
        PainAttnNet(dataclasses.replace(cfg, mscn=dataclasses.replace(cfg.mscn, large=bad)))


def test_other_config_errors():
    with pytest.raises(ConfigError):
        validate_config(dataclasses.replace(ModelConfig(), se=SeResNetConfig(128, 30, 7)))
    with pytest.raises(ConfigError):
        validate_config(dataclasses.replace(ModelConfig(), se=SeResNetConfig(64, 30, 5)))
    with pytest.raises(ConfigError):
        validate_config(dataclasses.replace(ModelConfig(), encoder=EncoderConfig(width=80)))
    with pytest.raises(ConfigError):
        validate_config(ModelConfig(num_classes=1))


def test_wrong_input_length_is_dimension_error(reference_model):
    with pytest.raises(DimensionError):
        reference_model.forward(np.zeros((1, 1, 2000)))


def test_zero_input_is_deterministic():
    a = PainAttnNet(ModelConfig.mini(), seed=5).eval()
    b = PainAttnNet(ModelConfig.mini(), seed=5).eval()
    za = a.mscn.forward(np.zeros((2, 1, 2816)))
    zb = b.mscn.forward(np.zeros((2, 1, 2816)))
    assert np.array_equal(za, zb)
    assert za.shape == (2, 16, 75)


def test_first_sample_is_not_dead(reference_model):
    x = np.random.default_rng(1).standard_normal((2, 1, 2816))
    y = x.copy()
    y[:, :, 0] += 1.0
    reference_model.eval()
    try:
        assert not np.array_equal(reference_model.mscn.forward(x), reference_model.mscn.forward(y))
    finally:
        reference_model.train()


def test_training_forward_is_reproducible():
    m = PainAttnNet(ModelConfig.mini(), seed=2)
    x = np.random.default_rng(3).standard_normal((4, 1, 2816))
    m.reseed(11)
    y1 = m.forward(x)
    m.reseed(11)
    assert np.array_equal(y1, m.forward(x))


# -- squeeze and excitation ---------------------------------------------------

def test_se_zero_excitation_halves(rng):
    se = SeResBlock(SeResNetConfig(6, 4, 2), rng)
    for lin in ("fc1", "fc2"):
        se.excite.children[lin].params["weight"][...] = 0.0
    x = rng.standard_normal((2, 6, 75))
    out = se.forward(x)
    np.testing.assert_array_equal(se.alpha, 0.5)
    v = se.body.forward(x)
    np.testing.assert_allclose(out - se.residual.forward(x), 0.5 * v, rtol=1e-12, atol=1e-15)


def test_se_squeeze_is_channel_mean():
    se = SeResBlock(SeResNetConfig(1, 1, 1, downsample=False), np.random.default_rng(0))
    for conv in ("conv1", "conv2"):
        se.body.children[conv].params["weight"][...] = 1.0
        se.body.children[conv].params["bias"][...] = 0.0
    w1, w2 = 0.7, -1.3
    se.excite.children["fc1"].params["weight"][...] = w1
    se.excite.children["fc2"].params["weight"][...] = w2
    out = se.forward(np.array([[[1.0, 2.0, 3.0]]]))
    z = 2.0
    alpha = 1.0 / (1.0 + np.exp(-w2 * max(w1 * z, 0.0)))
    np.testing.assert_allclose(se.alpha, [[alpha]], rtol=1e-14)
    np.testing.assert_allclose(out, [[[1 + alpha * 1, 2 + alpha * 2, 3 + alpha * 3]]], rtol=1e-14)


def test_se_scaling_example():
    alpha, v = 0.5, np.array([2.0, 4.0])
    np.testing.assert_array_equal(alpha * v, [1.0, 2.0])


def test_se_alpha_strictly_inside_unit_interval(rng):
    se = SeResBlock(SeResNetConfig(8, 6, 3), rng)
    for lin in ("fc1", "fc2"):
        se.excite.children[lin].params["weight"][...] *= 500.0
    for _ in range(5):
        se.forward(rng.standard_normal((4, 8, 75)) * 50)
        assert np.all(se.alpha > 0) and np.all(se.alpha < 1)


# -- attention ----------------------------------------------------------------

def test_zero_query_gives_uniform_attention(rng):
    mha = MultiHeadAttention(EncoderConfig(heads=1), 6, rng)
    mha.tcn_q.params["weight"][...] = 0.0
    mha.tcn_q.params["bias"][...] = 0.0
    mha.proj.params["weight"][...] = np.eye(75)
    x = rng.standard_normal((2, 6, 75))
    out = mha.forward(x)
    np.testing.assert_allclose(mha.attention, 1.0 / 6, rtol=1e-14)
    _, _, v = mha.project_inputs(x)
    np.testing.assert_allclose(out, np.broadcast_to(v[:, 0].mean(axis=1, keepdims=True), out.shape), rtol=1e-12)


def test_single_head_matches_plain_attention(rng):
    mha = MultiHeadAttention(EncoderConfig(heads=1), 5, rng)
    mha.proj.params["weight"][...] = np.eye(75)
    x = rng.standard_normal((3, 5, 75))
    q, k, v = (t[:, 0] for t in mha.project_inputs(x))
    expected = np.empty_like(q)
    for n in range(3):
        e = q[n] @ k[n].T / np.sqrt(75)
        a = np.exp(e - e.max(axis=1, keepdims=True))
        a /= a.sum(axis=1, keepdims=True)
        expected[n] = a @ v[n]
    np.testing.assert_allclose(mha.forward(x), expected, rtol=1e-12, atol=1e-12)


def test_hand_set_energies():
    mha = MultiHeadAttention(EncoderConfig(heads=1, tcn_kernel=1), 2, np.random.default_rng(0))
    set_identity_tcn(mha)
    x = np.zeros((1, 2, 75))
    x[0, 0, 0] = np.sqrt(0.7071 * np.sqrt(75.0))
    x[0, 1, 1] = 1.0
    mha.forward(x)
    e = np.exp(0.7071)
    np.testing.assert_allclose(mha.attention[0, 0, 0], [e / (e + 1), 1 / (e + 1)], rtol=1e-12)
    np.testing.assert_allclose(mha.attention[0, 0, 0], [0.6698, 0.3302], atol=1e-4)


def test_attention_rows_sum_to_one(rng):
    mha = MultiHeadAttention(EncoderConfig(), 30, rng)
    mha.forward(rng.standard_normal((4, 30, 75)) * 3)
    np.testing.assert_allclose(mha.attention.sum(axis=-1), 1.0, atol=1e-9)
    assert np.all(mha.attention > 0)


def test_attention_permutation_equivariant_without_tcn(rng):
    mha = MultiHeadAttention(EncoderConfig(heads=3, tcn_kernel=1), 7, rng)
    set_identity_tcn(mha)
    x = rng.standard_normal((2, 7, 75))
    perm = rng.permutation(7)
    np.testing.assert_allclose(mha.forward(x[:, perm]), mha.forward(x)[:, perm], rtol=1e-12, atol=1e-12)


def test_encoder_tcn_causality(rng):
    mha = MultiHeadAttention(EncoderConfig(), 30, rng)
    x = rng.standard_normal((2, 30, 75))
    base = mha.project_inputs(x)
    for _ in range(100):
        t = int(rng.integers(1, 75))
        xp = x.copy()
        xp[:, :, t:] += rng.standard_normal(xp[:, :, t:].shape)
        for b, p in zip(base, mha.project_inputs(xp)):
            assert np.array_equal(b[..., :t], p[..., :t])


# -- encoder block and head ---------------------------------------------------

def test_encoder_identity_path(rng):
    block = EncoderBlock(EncoderConfig(), 30, rng)
    for lin in ("fc1", "fc2"):
        for p in block.ffn.children[lin].params.values():
            p[...] = 0.0
    for p in block.mha.tcn_v.params.values():
        p[...] = 0.0
    x = rng.standard_normal((2, 30, 75))
    q, _, _ = block.mha.project_inputs(x)
    ln = LayerNorm(75)
    expected = ln.forward(ln.forward(q.mean(axis=1)))
    np.testing.assert_allclose(block.forward(x), expected, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("blocks", [1, 2, 3])
def test_encoder_shape_preserved(blocks):
    m = PainAttnNet(ModelConfig.mini().with_overrides(blocks=blocks), seed=0)
    x = np.random.default_rng(0).standard_normal((2, 4, 75))
    assert m.encoder.forward(x).shape == x.shape


def test_zero_head_is_uniform(rng):
    head = ClassifierHead(30 * 75, 16, 4, rng)
    for _, p, _ in head.named_parameters():
        p[...] = 0.0
    probs = softmax(head.forward(rng.standard_normal((3, 30, 75))))
    np.testing.assert_array_equal(probs, 0.25)


def test_classify_rows_and_argmax(rng):
    m = PainAttnNet(ModelConfig.mini(5), seed=4).eval()
    x = rng.standard_normal((6, 1, 2816))
    probs = classify(m, x)
    logits = m.forward(x)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_array_equal(probs.argmax(axis=1), logits.argmax(axis=1))


# -- gradients ----------------------------------------------------------------

@pytest.mark.parametrize("seed", [0, 1, 2])
def test_composite_grad_checks(seed):
    for name, layer, x in composite_cases(seed):
        report = grad_check(layer, x, seed=seed, max_coords=25, name=name)
        assert report.passed, report.line()


def test_mini_model_grad_check():
    name, model, x = mini_model_case(0)
    report = grad_check(model, x, seed=0, max_coords=6, name=name)
    assert report.passed, report.line()


# -- checkpoints --------------------------------------------------------------

def test_checkpoint_round_trip():
    m = PainAttnNet(ModelConfig.mini(3), seed=8)
    m.forward(np.random.default_rng(0).standard_normal((2, 1, 2816)))  # move running stats
    blob = checkpoint_bytes(m, {"task": "x"})
    loaded, meta = parse_checkpoint(blob)
    assert meta == {"task": "x"}
    assert loaded.cfg == m.cfg
    assert checkpoint_bytes(loaded, meta) == blob
    for (n1, a), (n2, b) in zip(m.state_tensors().items(), loaded.state_tensors().items()):
        assert n1 == n2 and np.array_equal(a, b)


@pytest.mark.parametrize("mutate", [
    lambda b: b[:-10],
    lambda b: b[:5],
    lambda b: b"XXXXXXXX" + b[8:],
    lambda b: b[:200] + bytes([b[200] ^ 0xFF]) + b[201:],
    lambda b: b"",
])
def test_corrupt_checkpoint_is_format_error(mutate):
    blob = checkpoint_bytes(PainAttnNet(ModelConfig.mini(), seed=1))
    with pytest.raises(FormatError):
        parse_checkpoint(mutate(blob))
