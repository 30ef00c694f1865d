import numpy as np
import pytest

import oracles
from duat import ops
from duat.glsa import ARRANGEMENTS, GLSA, GlobalSpatialAttention, LocalSpatialAttention
from duat.sba import RAU, SBA, SemanticFusion
from duat.tensor import ShapeError, Tensor


def randn(rng, *shape):
    return Tensor(rng.standard_normal(shape))


# ---------------------------------------------------------------- GSA

def test_gsa_context_matches_loops():
    rng = np.random.default_rng(21)
    for _ in range(10):
        gsa = GlobalSpatialAttention(4, rng=rng)
        gsa.mask.bias.data[...] = rng.standard_normal()
        x = rng.standard_normal((2, 4, 3, 5))
        ref = oracles.gsa_context(x, gsa.mask.weight.data, gsa.mask.bias.data.item())
        np.testing.assert_allclose(gsa.context(Tensor(x)).data[:, :, 0, 0], ref, rtol=0, atol=1e-10)


def test_gsa_attention_is_distribution():
    gsa = GlobalSpatialAttention(8, rng=0)
    a = gsa.spatial_attention(randn(np.random.default_rng(0), 2, 8, 4, 4)).data
    assert a.shape == (2, 1, 16, 1)
    np.testing.assert_allclose(a.sum(axis=2), 1.0, atol=1e-12)


def test_gsa_zero_initialized_mlp_is_identity():
    gsa = GlobalSpatialAttention(8, rng=0, zero_init_mlp=True)
    x = randn(np.random.default_rng(1), 2, 8, 4, 4)
    assert np.array_equal(gsa(x).data, x.data)


def test_gsa_output_is_spatially_constant_shift():
    gsa = GlobalSpatialAttention(8, rng=0)
    x = randn(np.random.default_rng(2), 1, 8, 3, 3)
    delta = gsa(x).data - x.data
    np.testing.assert_allclose(delta, delta[:, :, :1, :1] * np.ones_like(delta), atol=1e-12)


def test_gsa_channel_check():
    with pytest.raises(ShapeError):
        GlobalSpatialAttention(8, rng=0)(Tensor(np.zeros((1, 4, 2, 2))))


# ---------------------------------------------------------------- LSA

def test_lsa_gate_in_open_interval_and_residual_form():
    lsa = LocalSpatialAttention(32, rng=0)
    x = randn(np.random.default_rng(3), 2, 32, 6, 6)
    gate = lsa.attention(x).data
    assert ((gate > 0) & (gate < 1)).all()
    np.testing.assert_allclose(lsa(x).data, gate * x.data + x.data, atol=1e-12)


def test_lsa_is_local():
    # a perturbation far away must not reach a pixel beyond the receptive field
    lsa = LocalSpatialAttention(4, rng=0)
    rng = np.random.default_rng(4)
    x = rng.standard_normal((1, 4, 12, 12))
    y0 = lsa(Tensor(x)).data
    x2 = x.copy()
    x2[:, :, 11, 11] += 5.0
    y1 = lsa(Tensor(x2)).data
    # three 3x3 depthwise layers see at most 3 pixels away
    assert np.array_equal(y0[:, :, :8, :8], y1[:, :, :8, :8])
    assert not np.array_equal(y0[:, :, 11, 11], y1[:, :, 11, 11])


# ---------------------------------------------------------------- GLSA

@pytest.mark.parametrize("arrangement", ARRANGEMENTS)
def test_glsa_arrangement_shapes(arrangement):
    block = GLSA(64, 32, arrangement, rng=0)
    assert block(randn(np.random.default_rng(5), 2, 64, 4, 4)).shape == (2, 32, 4, 4)


def test_glsa_parallel_splits_channels():
    block = GLSA(8, 4, "parallel", rng=0)
    rng = np.random.default_rng(6)
    x = rng.standard_normal((1, 8, 3, 3))
    lo, hi = Tensor(x[:, :4]), Tensor(x[:, 4:])
    manual = block.fuse(ops.concat_channels([block.gsa(lo), block.lsa(hi)])).data
    np.testing.assert_allclose(block(Tensor(x)).data, manual, atol=1e-12)
    assert block.gsa.channels == 4 and block.lsa.channels == 4


def test_glsa_rejects_bad_arguments():
    with pytest.raises(ValueError):
        GLSA(64, 32, "diagonal")
    with pytest.raises(ShapeError):
        GLSA(63, 32)
    with pytest.raises(ShapeError):
        GLSA(64, 32, rng=0)(Tensor(np.zeros((1, 32, 2, 2))))


# ---------------------------------------------------------------- RAU and SBA

def test_rau_two_evaluation_orders_agree():
    rng = np.random.default_rng(7)
    for _ in range(10):
        rau = RAU(6, rng=rng)
        t1, t2 = randn(rng, 2, 6, 4, 4), randn(rng, 2, 6, 4, 4)
        out = rau(t1, t2).data
        g1, g2 = (g.data for g in rau.gates(t1, t2))
        # algebraically equal alternative: t1*(1+g1) + g2*t2 - g1*g2*t2
        alt = t1.data * (1 + g1) + g2 * t2.data - g1 * g2 * t2.data
        assert np.abs(out - alt).max() <= 1e-12


def test_rau_gates_and_complement():
    rau = RAU(4, rng=0)
    rng = np.random.default_rng(8)
    t1, t2 = randn(rng, 1, 4, 3, 3), randn(rng, 1, 4, 3, 3)
    g1, g2 = rau.gates(t1, t2)
    for g in (g1, g2):
        assert ((g.data > 0) & (g.data < 1)).all()
    assert np.array_equal(ops.reverse(g1).data, 1.0 - g1.data)


def test_rau_shape_mismatch():
    with pytest.raises(ShapeError):
        RAU(4, rng=0)(Tensor(np.zeros((1, 4, 2, 2))), Tensor(np.zeros((1, 4, 4, 4))))


def test_semantic_fusion_resolution():
    fuse = SemanticFusion(8, rng=0)
    rng = np.random.default_rng(9)
    out = fuse(randn(rng, 2, 8, 4, 4), randn(rng, 2, 8, 2, 2))
    assert out.shape == (2, 8, 8, 8)
    with pytest.raises(ShapeError):
        fuse(randn(rng, 2, 8, 4, 4), randn(rng, 2, 8, 4, 4))
    with pytest.raises(ShapeError):
        fuse(randn(rng, 2, 8, 4, 4), randn(rng, 2, 8, 2, 2), randn(rng, 2, 8, 8, 8))


def test_semantic_fusion_with_f2():
    fuse = SemanticFusion(8, rng=0, with_f2=True)
    rng = np.random.default_rng(10)
    assert fuse(randn(rng, 1, 8, 4, 4), randn(rng, 1, 8, 2, 2), randn(rng, 1, 8, 8, 8)).shape == (1, 8, 8, 8)


def test_sba_shapes_and_nonnegativity():
    sba = SBA(8, rng=0)
    rng = np.random.default_rng(11)
    z = sba(randn(rng, 2, 8, 4, 4), randn(rng, 2, 8, 8, 8))
    assert z.shape == (2, 8, 8, 8)
    assert (z.data >= 0).all()  # ends in ReLU
    with pytest.raises(ShapeError):
        sba(randn(rng, 2, 8, 8, 8), randn(rng, 2, 8, 8, 8))
