"""Channel and spatial attention gates, composable in either order.

The channel gate squeezes each feature map to per-channel avg/max statistics
and pushes both through one shared two-layer MLP; the spatial gate convolves
the 2-channel concat of channel-wise avg/max maps with a single 7x7x7 kernel.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor, TensorError

ORDERS = ("channel-first", "spatial-first")


class CbamBlock:
    """One attention block: shared-MLP channel gate plus 7^3-conv spatial gate."""

    def __init__(self, channels: int, reduction: int = 4, spatial_kernel: int = 7,
                 order: str = "channel-first", rng: np.random.Generator | None = None):
        if order not in ORDERS:
            raise TensorError(f"unknown CBAM order: {order!r}")
        if channels < 1:
            raise TensorError("channels must be >= 1")
        rng = rng if rng is not None else np.random.default_rng(0)
        hidden = max(-(-channels // reduction), 1)
        self.channels = channels
        self.order = order
        self.spatial_padding = spatial_kernel // 2
        k = spatial_kernel
        self.mlp_w1 = Parameter(rng.normal(0, np.sqrt(2.0 / channels), (hidden, channels)))
        self.mlp_b1 = Parameter(np.zeros(hidden))
        self.mlp_w2 = Parameter(rng.normal(0, np.sqrt(2.0 / hidden), (channels, hidden)))
        self.mlp_b2 = Parameter(np.zeros(channels))
        self.spatial_w = Parameter(rng.normal(0, np.sqrt(2.0 / (2 * k ** 3)), (1, 2, k, k, k)))
        self.spatial_b = Parameter(np.zeros(1))
        # captured on every forward; used for attention-map export
        self.last_spatial_map: np.ndarray | None = None

    def parameters(self) -> list[Parameter]:
        return [self.mlp_w1, self.mlp_b1, self.mlp_w2, self.mlp_b2,
                self.spatial_w, self.spatial_b]

    def _mlp(self, v: Tensor) -> Tensor:
        h = T.relu(T.dense(v, self.mlp_w1, self.mlp_b1))
        return T.dense(h, self.mlp_w2, self.mlp_b2)


def channel_attention(F: Tensor, block: CbamBlock) -> Tensor:
    """Per-channel gate in (0,1), shape (B, C, 1, 1, 1)."""
    B, C = F.data.shape[0], F.data.shape[1]
    if C != block.channels:
        raise TensorError(f"channel mismatch: input has {C}, block expects {block.channels}")
    avg = T.reshape(T.pool3d(F, "avg", "global"), (B, C))
    mx = T.reshape(T.pool3d(F, "max", "global"), (B, C))
    gate = T.sigmoid(T.add(block._mlp(avg), block._mlp(mx)))
    return T.reshape(gate, (B, C, 1, 1, 1))


def spatial_attention(F: Tensor, block: CbamBlock) -> Tensor:
    """Per-position gate in (0,1), shape (B, 1, D, H, W)."""
    pooled = T.concat([T.channel_pool(F, "avg"), T.channel_pool(F, "max")], axis=1)
    logits = T.conv3d(pooled, block.spatial_w, block.spatial_b,
                      stride=1, padding=block.spatial_padding)
    gate = T.sigmoid(logits)
    block.last_spatial_map = gate.data.copy()
    return gate


def cbam_apply(F: Tensor, block: CbamBlock) -> Tensor:
    """Gate the feature map by both attentions, in the block's configured order."""
    if block.order == "channel-first":
        f1 = T.mul(channel_attention(F, block), F)
        return T.mul(spatial_attention(f1, block), f1)
    f1 = T.mul(spatial_attention(F, block), F)
    return T.mul(channel_attention(f1, block), f1)
