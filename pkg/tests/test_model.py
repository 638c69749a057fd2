import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tmloss.autodiff import Tensor, functional as F, grad_check, no_grad, precision
from tmloss.backbone import Backbone, ResidualBlock, init_backbone
from tmloss.config import BackboneConfig, EncoderConfig, ExperimentConfig, HeadConfig, conv_out
from tmloss.errors import ConfigurationError, DimensionError
from tmloss.model import TransformerMetricModel, embed_images, init_params
from tmloss.nn import Conv2d, Linear, count_parameters
from tmloss.transformer import (EncoderLayer, MultiHeadAttention, TransformerEncoder, TransformerHead,
                                from_sequence, mean_pool, to_sequence)

from conftest import small_config


# ---------------------------------------------------------------- backbone

def test_desk_geometry_final_map():
    cfg = BackboneConfig(input_size=(3, 32, 32), stage_channels=[32, 64, 128])
    assert cfg.final_map == (4, 4, 128)
    assert cfg.sequence_length == 16


def test_full_size_geometry_final_map():
    cfg = BackboneConfig(input_size=(3, 112, 112), stage_channels=[64, 128, 256, 512],
                         blocks_per_stage=[1, 1, 1, 1], embedding_dim=512)
    assert cfg.final_map == (7, 7, 512)
    assert cfg.sequence_length == 49


def test_split_rule_enforced():
    with pytest.raises(ConfigurationError):
        BackboneConfig(input_size=(3, 16, 16), stage_channels=[8, 8, 8, 8], blocks_per_stage=[1] * 4).validate()


@settings(max_examples=10)
@given(size=st.sampled_from([12, 16, 20]), stages=st.integers(1, 2), emb=st.integers(1, 9), seed=st.integers(0, 99))
def test_forward_shapes_match_static_derivation(size, stages, emb, seed):
    cfg = BackboneConfig(input_size=(3, size, size), stage_channels=[4, 6][:stages],
                         blocks_per_stage=[1] * stages, embedding_dim=emb)
    h = size
    for _ in range(stages):
        h = conv_out(h, stride=2)
    bb = init_backbone(cfg, seed)
    with no_grad():
        fmap, e = bb(Tensor(np.zeros((2, 3, size, size), np.float32)))
    assert fmap.shape == (2, 6 if stages == 2 else 4, h, h) and cfg.final_map == (h, h, fmap.shape[1])
    assert e.shape == (2, emb)


def test_input_size_mismatch():
    bb = init_backbone(small_config().backbone, 0)
    with pytest.raises(DimensionError):
        bb(Tensor(np.zeros((1, 3, 20, 20), np.float32)))


def test_identical_images_identical_embeddings(rng):
    bb = init_backbone(small_config().backbone, 0)
    img = rng.normal(size=(1, 3, 16, 16)).astype(np.float32)
    bb.train()
    with no_grad():
        bb(Tensor(rng.normal(size=(4, 3, 16, 16)).astype(np.float32)))
    bb.eval()
    with no_grad():
        e = bb(Tensor(np.concatenate([img, img])))[1].data
    assert e[0].tobytes() == e[1].tobytes()


def test_init_deterministic_and_seed_sensitive():
    cfg = small_config().backbone
    a, b, c = init_backbone(cfg, 1).state_dict(), init_backbone(cfg, 1).state_dict(), init_backbone(cfg, 2).state_dict()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    assert any(a[k].tobytes() != c[k].tobytes() for k in a if k.endswith("weight"))


def test_fan_in_bound():
    conv = Conv2d(1, 50, 3, np.random.default_rng(0))
    assert np.abs(conv.weight.data).max() <= 1 / 3
    assert np.abs(conv.weight.data).max() > 0.3


def test_batchnorm_init_and_prelu_slope():
    bb = init_backbone(small_config().backbone, 0)
    assert np.all(bb.stem_bn.gain.data == 1) and np.all(bb.stem_bn.bias.data == 0)
    assert np.all(bb.stem_act.slope.data == np.float32(0.25))


def test_zeroed_block_is_identity(rng):
    block = ResidualBlock(4, 4, 1, rng)
    for conv in (block.conv1, block.conv2):
        conv.weight.data[...] = 0
    block.eval()
    x = rng.normal(size=(2, 4, 5, 5)).astype(np.float32)
    with no_grad():
        np.testing.assert_allclose(block(Tensor(x)).data, x, atol=1e-6)


def test_embedding_is_single_affine_map_of_flattened_map(rng):
    bb = init_backbone(small_config().backbone, 0)
    bb.eval()
    with no_grad():
        fmap, emb = bb(Tensor(rng.normal(size=(2, 3, 16, 16)).astype(np.float32)))
    flat = fmap.data.reshape(2, -1)
    ref = flat @ bb.embedding.weight.data.T + bb.embedding.bias.data
    np.testing.assert_allclose(emb.data, ref, rtol=1e-5, atol=1e-5)


def test_embedding_bn_toggle():
    cfg = small_config().backbone
    cfg.embedding_bn = True
    assert init_backbone(cfg, 0).embedding_bn is not None


# ---------------------------------------------------------------- sequence ops

def test_to_sequence_layout():
    fmap = np.arange(2 * 3 * 2 * 4, dtype=np.float32).reshape(2, 3, 2, 4)
    seq = to_sequence(Tensor(fmap)).data
    assert seq.shape == (2, 8, 3)
    h, w = 1, 2
    np.testing.assert_array_equal(seq[:, h * 4 + w, :], fmap[:, :, h, w])


def test_full_size_and_desk_sequence_lengths():
    assert to_sequence(Tensor(np.zeros((1, 512, 7, 7)))).shape == (1, 49, 512)
    assert to_sequence(Tensor(np.zeros((1, 128, 4, 4)))).shape == (1, 16, 128)


def test_to_sequence_round_trip(rng):
    fmap = rng.normal(size=(2, 5, 3, 4)).astype(np.float32)
    assert from_sequence(to_sequence(Tensor(fmap)), 3, 4).data.tobytes() == fmap.tobytes()


def test_to_sequence_rejects_1x1():
    with pytest.raises(ValueError):
        to_sequence(Tensor(np.zeros((1, 8, 1, 1))))


def test_mean_pool_values_and_gradient():
    seq = Tensor(np.array([[[1.0, 3.0], [3.0, 1.0]]]), requires_grad=True)
    out = mean_pool(seq)
    np.testing.assert_array_equal(out.data, [[2.0, 2.0]])
    F.sum(out).backward()
    np.testing.assert_array_equal(seq.grad, np.full((1, 2, 2), 0.5))
    v = np.array([0.3, -1.2])
    np.testing.assert_array_equal(mean_pool(Tensor(np.tile(v, (1, 5, 1)))).data, [v])


# ---------------------------------------------------------------- encoder

def test_attention_rows_sum_to_one(rng):
    mha = MultiHeadAttention(8, 2, rng)
    mha(Tensor(rng.normal(size=(3, 6, 8)).astype(np.float32)))
    np.testing.assert_allclose(mha.last_weights.sum(axis=-1), 1.0, atol=1e-6)


def test_single_position_attention_weight_is_one(rng):
    mha = MultiHeadAttention(4, 2, rng)
    mha(Tensor(rng.normal(size=(2, 1, 4))))
    assert np.all(mha.last_weights == 1.0)


def test_zero_output_projections_give_layernorm_cascade(rng):
    layer = EncoderLayer(6, 2, 24, 0.0, rng)
    for lin in (layer.attention.out, layer.ff_out):
        lin.weight.data[...] = 0
        lin.bias.data[...] = 0
    x = rng.normal(size=(2, 5, 6))
    out = layer(Tensor(x)).data
    ln = (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + 1e-5)
    ln2 = (ln - ln.mean(-1, keepdims=True)) / np.sqrt(ln.var(-1, keepdims=True) + 1e-5)
    np.testing.assert_allclose(out, ln2, atol=1e-5)


def test_encoder_preserves_shape_and_checks_width(rng):
    enc = TransformerEncoder(EncoderConfig(num_layers=2, num_heads=2).resolved(8), rng)
    assert enc(Tensor(rng.normal(size=(2, 4, 8)))).shape == (2, 4, 8)
    with pytest.raises(ConfigurationError):
        enc(Tensor(rng.normal(size=(2, 4, 6))))


def test_heads_must_divide_model_dim():
    with pytest.raises(ConfigurationError):
        EncoderConfig(num_heads=3).resolved(8).validate()


def test_feedforward_default_is_four_times_depth():
    assert EncoderConfig().resolved(32).feedforward_dim == 128


def test_transformer_head_shapes_and_linear_ignores_labels(rng):
    head = TransformerHead(EncoderConfig(num_layers=1, num_heads=4), (4, 4, 128), 10, "linear", None, rng)
    fmap = Tensor(rng.normal(size=(3, 128, 4, 4)).astype(np.float32))
    a = head(fmap).data
    b = head(fmap, labels=np.array([1, 2, 3])).data
    assert a.shape == (3, 10) and a.tobytes() == b.tobytes()


def test_linear_head_zero_weights_zero_logits(rng):
    head = TransformerHead(EncoderConfig(num_layers=1, num_heads=2), (2, 2, 4), 3, "linear", None, rng)
    head.classifier.weight.data[...] = 0
    head.classifier.bias.data[...] = 0
    assert np.all(head(Tensor(rng.normal(size=(2, 4, 2, 2)))).data == 0)


def test_linear_head_identity_passes_pooled_vector(rng):
    lin = Linear(4, 4, rng)
    lin.weight.data = np.eye(4, dtype=np.float32)
    lin.bias.data[...] = 0
    v = rng.normal(size=(2, 4)).astype(np.float32)
    np.testing.assert_array_equal(lin(Tensor(v)).data, v)


def test_metric_variant_needs_labels_and_zero_margin_is_scaled_cosine(rng):
    hc = HeadConfig(kind="arcface", margin=0.0, scale=64.0)
    head = TransformerHead(EncoderConfig(num_layers=1, num_heads=2), (2, 2, 4), 3, "metric", hc, rng)
    fmap = Tensor(rng.normal(size=(2, 4, 2, 2)))
    with pytest.raises(ValueError):
        head(fmap)
    logits = head(fmap, np.array([0, 1])).data
    pooled = mean_pool(head.encode(fmap)).data
    cos = (pooled / np.linalg.norm(pooled, axis=1, keepdims=True)) @ (
        head.classifier.class_weights.data / np.linalg.norm(head.classifier.class_weights.data, axis=1,
                                                            keepdims=True)).T
    np.testing.assert_allclose(logits, 64 * cos, atol=1e-4)


def test_linear_head_gradcheck():
    rng = np.random.default_rng(3)
    with precision(np.float64):
        head = TransformerHead(EncoderConfig(num_layers=1, num_heads=2), (2, 2, 4), 3, "linear", None, rng)
    pooled = Tensor(rng.uniform(-2, 2, (2, 4)), requires_grad=True)
    w, b = head.classifier.weight, head.classifier.bias
    assert grad_check(lambda p, w, b: F.cross_entropy(head.classifier(p), [0, 2]), [pooled, w, b]) < 1e-5


def test_metric_head_full_path_gradcheck():
    rng = np.random.default_rng(4)
    with precision(np.float64):
        head = TransformerHead(EncoderConfig(num_layers=1, num_heads=2), (2, 2, 4), 3, "metric",
                               HeadConfig(kind="arcface"), rng)
    fmap = Tensor(rng.uniform(-2, 2, (2, 4, 2, 2)), requires_grad=True)
    y = np.array([0, 2])
    assert grad_check(lambda x, *_: F.cross_entropy(head(x, y), y), [fmap] + head.parameters()) < 1e-4


@settings(max_examples=25)
@given(seed=st.integers(0, 2**16))
def test_permutation_invariance_without_positional_encoding(seed):
    rng = np.random.default_rng(seed)
    head = TransformerHead(EncoderConfig(num_layers=2, num_heads=2), (4, 4, 16), 5, "linear", None, rng)
    fmap = rng.normal(size=(2, 16, 4, 4)).astype(np.float32)
    perm = rng.permutation(16)
    shuffled = fmap.reshape(2, 16, 16)[:, :, perm].reshape(2, 16, 4, 4)
    with no_grad():
        a, b = head(Tensor(fmap)).data, head(Tensor(shuffled)).data
    assert np.abs(a - b).max() < 1e-5


def test_learned_positional_encoding_breaks_invariance(rng):
    head = TransformerHead(EncoderConfig(num_layers=1, num_heads=2, positional_encoding="learned"),
                           (4, 4, 8), 5, "linear", None, rng)
    fmap = rng.normal(size=(1, 8, 4, 4)).astype(np.float32)
    shuffled = fmap.reshape(1, 8, 16)[:, :, rng.permutation(16)].reshape(1, 8, 4, 4)
    with no_grad():
        assert np.abs(head(Tensor(fmap)).data - head(Tensor(shuffled)).data).max() > 1e-4


# ---------------------------------------------------------------- full model

def test_model_forward_shapes(rng):
    cfg = small_config()
    model = init_params(cfg, 4, seed=0)
    out = model(Tensor(rng.normal(size=(3, 3, 16, 16)).astype(np.float32)), np.array([0, 1, 3]))
    assert out.feature_map.shape == (3, 16, 4, 4)
    assert out.embedding.shape == (3, 12)
    assert out.metric_logits.shape == out.transformer_logits.shape == (3, 4)
    assert count_parameters(model) > 0


def test_parameter_groups_cover_expected_names():
    model = TransformerMetricModel(small_config(), 4, seed=0)
    groups = model.parameter_groups()
    assert groups["embedding_linear"] == ["backbone.embedding.weight", "backbone.embedding.bias"]
    assert groups["metric_head"] == ["metric_head.class_weights"]
    assert groups["final_conv"] == ["backbone.blocks.1.conv2.weight"]
    assert all(n.startswith("transformer_head.") for n in groups["transformer"])


def test_embed_images_eval_mode_is_stable(rng):
    model = TransformerMetricModel(small_config(), 4, seed=0)
    x = rng.normal(size=(5, 3, 16, 16)).astype(np.float32)
    a, b = embed_images(model, x, batch_size=2), embed_images(model, x, batch_size=5)
    assert a.tobytes() == embed_images(model, x, batch_size=2).tobytes()
    np.testing.assert_allclose(a, b, atol=1e-5)
    assert model.training


def test_state_dict_round_trip():
    a = TransformerMetricModel(small_config(), 4, seed=0)
    b = TransformerMetricModel(small_config(), 4, seed=9)
    b.load_state_dict(a.state_dict())
    sa, sb = a.state_dict(), b.state_dict()
    assert all(sa[k].tobytes() == sb[k].tobytes() for k in sa)


def test_load_state_dict_shape_mismatch():
    a = TransformerMetricModel(small_config(), 4, seed=0)
    state = a.state_dict()
    state["metric_head.class_weights"] = np.zeros((5, 12))
    with pytest.raises(ValueError):
        a.load_state_dict(state)


def test_experiment_config_rejects_bad_model_dim():
    cfg = ExperimentConfig(backbone=BackboneConfig(input_size=(3, 16, 16), stage_channels=[6, 6],
                                                   blocks_per_stage=[1, 1]),
                           encoder=EncoderConfig(num_heads=4))
    with pytest.raises(ConfigurationError):
        cfg.validate()


def test_backbone_is_a_module_with_parameters():
    bb = Backbone(small_config().backbone, np.random.default_rng(0))
    names = [n for n, _ in bb.named_parameters()]
    assert "stem_conv.weight" in names and "embedding.weight" in names
