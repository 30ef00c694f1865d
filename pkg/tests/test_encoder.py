import numpy as np
import pytest

import oracles
from duat.encoder import EncoderConfig, PatchEmbed, PyramidEncoder, SRAttention
from duat.tensor import ShapeError, Tensor

TINY = EncoderConfig(depths=(1, 1, 1, 1), dims=(8, 8, 16, 16), heads=(1, 2, 2, 4),
                     reductions=(4, 2, 1, 1), mlp_ratios=(2, 2, 2, 2))


@pytest.mark.parametrize("size", [64, 96, 128])
def test_pyramid_shape_law(size):
    enc = PyramidEncoder(TINY, rng=0)
    feats = enc(Tensor(np.random.default_rng(0).random((1, 3, size, size))))
    for i, (f, stride) in enumerate(zip(feats, (4, 8, 16, 32))):
        assert f.shape == (1, TINY.dims[i], size // stride, size // stride)


def test_non_divisible_input_rejected():
    with pytest.raises(ShapeError):
        PyramidEncoder(TINY, rng=0)(Tensor(np.zeros((1, 3, 48, 40))))


def test_patch_embed_geometry():
    emb = PatchEmbed(3, 8, 4, rng=np.random.default_rng(0))
    assert emb.proj.kernel == 7 and emb.proj.padding == 3
    assert emb(Tensor(np.zeros((1, 3, 16, 16)))).shape == (1, 8, 4, 4)


def test_reduction_one_equals_dense_attention():
    rng = np.random.default_rng(11)
    for trial in range(10):
        heads = (1, 2)[trial % 2]
        layer = SRAttention(4, heads, 1, rng=rng)
        for p in layer.parameters():  # non-trivial norm parameters too
            p.data = p.data + 0.1 * rng.standard_normal(p.shape)
        x = rng.standard_normal((2, 4, 3, 2))
        np.testing.assert_allclose(layer(Tensor(x)).data, oracles.sr_attention_dense(layer, x), rtol=0, atol=1e-10)


def test_attention_rows_sum_to_one():
    layer = SRAttention(8, 2, 2, rng=np.random.default_rng(0))
    attn, v = layer.attention_weights(Tensor(np.random.default_rng(1).standard_normal((2, 8, 4, 4))))
    assert attn.shape == (2, 2, 16, 4)  # keys come from the 2x2-reduced grid
    assert v.shape == (2, 2, 4, 4)
    np.testing.assert_allclose(attn.data.sum(axis=-1), 1.0, atol=1e-12)


def test_attention_rejects_indivisible_grid():
    layer = SRAttention(8, 2, 4, rng=np.random.default_rng(0))
    with pytest.raises(ShapeError):
        layer(Tensor(np.zeros((1, 8, 6, 6))))


def test_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(dims=(32, 64, 96, 130))
    with pytest.raises(ValueError):
        EncoderConfig(reductions=(8, 3, 2, 1))
    with pytest.raises(ValueError):
        EncoderConfig(depths=(2, 2, 2))


def test_toy_default_parameter_count_is_stable():
    # frozen value: catches unintended architecture changes
    assert PyramidEncoder(EncoderConfig(), rng=0).num_parameters() == 1298848


def test_same_seed_same_weights():
    a = PyramidEncoder(TINY, rng=5).state_dict()
    b = PyramidEncoder(TINY, rng=5).state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)
