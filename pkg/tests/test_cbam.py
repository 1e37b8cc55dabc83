"""Attention-block tests: gate ranges, the gating decomposition identity,
order dependence, the shared-MLP structure, and a full-block gradient check."""

import numpy as np
import pytest

from nodulenas import tensor as T
from nodulenas.cbam import (ORDERS, CbamBlock, cbam_apply, channel_attention,
                            spatial_attention)
from nodulenas.tensor import Tensor, TensorError


def make_input(B=2, C=4, D=5, seed=0):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((B, C, D, D, D))


def test_channel_gate_shape_and_range():
    x = make_input()
    block = CbamBlock(4, rng=np.random.default_rng(1))
    gate = channel_attention(Tensor(x), block)
    assert gate.data.shape == (2, 4, 1, 1, 1)
    assert np.all(gate.data > 0) and np.all(gate.data < 1)


def test_spatial_gate_shape_and_range():
    x = make_input()
    block = CbamBlock(4, rng=np.random.default_rng(2))
    gate = spatial_attention(Tensor(x), block)
    assert gate.data.shape == (2, 1, 5, 5, 5)
    assert np.all(gate.data > 0) and np.all(gate.data < 1)
    # the forward captures the map for later export
    np.testing.assert_array_equal(block.last_spatial_map, gate.data)


@pytest.mark.parametrize("order", ORDERS)
def test_apply_is_elementwise_gating(order):
    """cbam_apply must equal F gated by the channel gate, then by the spatial
    gate computed on the intermediate (or the mirror for spatial-first)."""
    x = make_input(seed=3)
    block = CbamBlock(4, order=order, rng=np.random.default_rng(3))
    out = cbam_apply(Tensor(x), block)
    if order == "channel-first":
        mc = channel_attention(Tensor(x), block).data
        f1 = x * mc
        ms = spatial_attention(Tensor(f1), block).data
        expected = f1 * ms
    else:
        ms = spatial_attention(Tensor(x), block).data
        f1 = x * ms
        mc = channel_attention(Tensor(f1), block).data
        expected = f1 * mc
    np.testing.assert_allclose(out.data, expected, atol=1e-12)


def test_orders_differ():
    x = make_input(seed=4)
    rng_a, rng_b = np.random.default_rng(9), np.random.default_rng(9)
    a = cbam_apply(Tensor(x), CbamBlock(4, order="channel-first", rng=rng_a))
    b = cbam_apply(Tensor(x), CbamBlock(4, order="spatial-first", rng=rng_b))
    assert not np.allclose(a.data, b.data)


def test_channel_gate_ignores_spatial_permutation():
    """Global avg/max pooling makes the channel gate invariant to any
    permutation of spatial positions."""
    x = make_input(seed=5)
    block = CbamBlock(4, rng=np.random.default_rng(5))
    base = channel_attention(Tensor(x), block).data
    rng = np.random.default_rng(6)
    flat = x.reshape(2, 4, -1)
    perm = rng.permutation(flat.shape[-1])
    shuffled = flat[:, :, perm].reshape(x.shape)
    np.testing.assert_allclose(
        channel_attention(Tensor(shuffled), block).data, base, atol=1e-12)


def test_mlp_is_shared_between_avg_and_max_paths():
    # when every voxel in a channel is identical, avg and max pools agree,
    # so the pre-sigmoid logit is exactly 2 * mlp(pooled)
    block = CbamBlock(4, rng=np.random.default_rng(7))
    v = np.array([[0.3, -1.2, 0.8, 0.0]])
    x = np.broadcast_to(v[:, :, None, None, None], (1, 4, 3, 3, 3)).copy()
    gate = channel_attention(Tensor(x), block)
    logits = block._mlp(Tensor(v)).data
    np.testing.assert_allclose(gate.data.reshape(1, 4),
                               1 / (1 + np.exp(-2 * logits)), atol=1e-12)


def test_hidden_width_floor():
    block = CbamBlock(2, reduction=4)  # 2 // 4 would floor to zero
    assert block.mlp_w1.data.shape == (1, 2)
    block8 = CbamBlock(8, reduction=4)
    assert block8.mlp_w1.data.shape == (2, 8)


def test_invalid_construction():
    with pytest.raises(TensorError):
        CbamBlock(4, order="diagonal-first")
    with pytest.raises(TensorError):
        CbamBlock(0)


def test_channel_mismatch_rejected():
    block = CbamBlock(4)
    with pytest.raises(TensorError):
        channel_attention(Tensor(np.zeros((1, 8, 3, 3, 3))), block)


def test_parameter_count():
    # C=4, r=4 -> hidden 1: (1*4 + 1) + (4*1 + 4) + 7^3 kernel on 2 channels + bias
    block = CbamBlock(4)
    n = sum(p.data.size for p in block.parameters())
    assert n == (4 + 1) + (4 + 4) + 2 * 343 + 1 == 700


def test_full_block_gradient():
    from test_tensor import EPS, TOL, central_diff

    x = make_input(B=1, C=4, D=4, seed=8)
    block = CbamBlock(4, rng=np.random.default_rng(8))
    xt = Tensor(x, True)
    out = cbam_apply(xt, block)
    rng = np.random.default_rng(9)
    g = rng.standard_normal(out.data.shape)
    T.mean(T.mul(out, Tensor(g * out.data.size))).backward()
    params = [x] + [p.data for p in block.parameters()]
    grads = [xt.grad] + [p.grad for p in block.parameters()]

    def fwd():
        return cbam_apply(Tensor(x), block).data

    worst = central_diff(fwd, params, grads, g, n_probes=4, rng=rng)
    assert worst < TOL
