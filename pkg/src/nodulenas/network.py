"""Residual 3D network construction, parameter counting, and checkpoint IO.

Networks follow a fixed skeleton: two 4-channel stem convolutions, three
stages of residual blocks whose depths/widths come from an ArchSpec (first
block of each stage downsamples by 2), optional attention blocks after
stages 2-5, global average pooling, and a 2-way classifier head.

Checkpoint format ("NLW1", little-endian):
    magic "NLW1" | u32 spec-text length | spec text (UTF-8)
    | u32 digest length | config digest (ASCII hex)
    | u64 trainable count | u64 extra count
    | trainable float64 stream (construction order)
    | extra float64 stream (batchnorm running mean/var, construction order)
The first `trainable count` floats equal the flattened trainable parameters.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .archspace import ArchSpec, format_spec, parse_spec, validate_spec
from .cbam import CbamBlock, cbam_apply
from .losses import AngularHead, plain_logits
from .tensor import no_grad, BatchNormState, Parameter, Tensor, TensorError

LOSS_KINDS = ("softmax", "asoftmax")


class CheckpointError(ValueError):
    """Bad magic, truncated payload, or config/arch mismatch on load."""


@dataclass(frozen=True)
class NetConfig:
    """Fixed (non-searched) structure and head configuration."""

    input_size: int = 32
    stem_channels: int = 4
    cbam_enabled: bool = True
    cbam_order: str = "channel-first"
    cbam_reduction: int = 4
    loss_kind: str = "asoftmax"
    margin: int = 4
    lam0: float = 1000.0
    lam_min: float = 5.0
    lam_decay: float = 0.12
    stage_strides: tuple[int, int, int] = (2, 2, 2)
    bn_momentum: float = 0.1

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _he_conv(rng, cout, cin, k):
    fan_in = cin * k ** 3
    return Parameter(rng.normal(0, np.sqrt(2.0 / fan_in), (cout, cin, k, k, k)))


class ConvBnRelu:
    def __init__(self, cin, cout, k, stride, padding, rng, momentum):
        self.w = _he_conv(rng, cout, cin, k)
        self.gamma = Parameter(np.ones(cout))
        self.beta = Parameter(np.zeros(cout))
        self.bn = BatchNormState(cout, momentum)
        self.stride = stride
        self.padding = padding

    def parameters(self):
        return [self.w, self.gamma, self.beta]

    def bn_states(self):
        return [self.bn]

    def __call__(self, x, train):
        y = T.conv3d(x, self.w, stride=self.stride, padding=self.padding)
        return T.relu(T.batchnorm3d(y, self.gamma, self.beta, self.bn, train=train))


class ResidualBlock:
    """Two 3^3 convolutions with a shortcut; 1^3 projection on shape change."""

    def __init__(self, cin, cout, stride, rng, momentum):
        self.conv1 = ConvBnRelu(cin, cout, 3, stride, 1, rng, momentum)
        self.w2 = _he_conv(rng, cout, cout, 3)
        self.gamma2 = Parameter(np.ones(cout))
        self.beta2 = Parameter(np.zeros(cout))
        self.bn2 = BatchNormState(cout, momentum)
        if stride != 1 or cin != cout:
            self.proj = ConvBnRelu(cin, cout, 1, stride, 0, rng, momentum)
        else:
            self.proj = None

    def parameters(self):
        ps = self.conv1.parameters() + [self.w2, self.gamma2, self.beta2]
        if self.proj is not None:
            ps += self.proj.parameters()
        return ps

    def bn_states(self):
        states = self.conv1.bn_states() + [self.bn2]
        if self.proj is not None:
            states += self.proj.bn_states()
        return states

    def __call__(self, x, train):
        h = self.conv1(x, train)
        h = T.batchnorm3d(T.conv3d(h, self.w2, stride=1, padding=1),
                          self.gamma2, self.beta2, self.bn2, train=train)
        sc = x if self.proj is None else self.proj(x, train)
        return T.relu(T.add(h, sc))


class Network:
    """A built candidate: stems, residual stages, optional attention, head."""

    def __init__(self, spec: ArchSpec, cfg: NetConfig, seed: int = 0):
        validate_spec(spec)
        self.spec = spec
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        mom = cfg.bn_momentum
        sc = cfg.stem_channels
        self.stem1 = ConvBnRelu(1, sc, 3, 1, 1, rng, mom)
        self.stem2 = ConvBnRelu(sc, sc, 3, 1, 1, rng, mom)
        self.cbams: dict[int, CbamBlock] = {}
        if cfg.cbam_enabled:
            self.cbams[2] = CbamBlock(sc, cfg.cbam_reduction, order=cfg.cbam_order, rng=rng)
        self.stages: list[list[ResidualBlock]] = []
        cin = sc
        for stage_idx, (widths, stride) in enumerate(zip(spec.stages, cfg.stage_strides)):
            blocks = []
            for i, w in enumerate(widths):
                blocks.append(ResidualBlock(cin, w, stride if i == 0 else 1, rng, mom))
                cin = w
            self.stages.append(blocks)
            if cfg.cbam_enabled:
                self.cbams[3 + stage_idx] = CbamBlock(
                    cin, cfg.cbam_reduction, order=cfg.cbam_order, rng=rng)
        self.feature_dim = cin
        if cfg.loss_kind == "softmax":
            self.fc_w = Parameter(rng.normal(0, np.sqrt(1.0 / cin), (2, cin)))
            self.fc_b = Parameter(np.zeros(2))
            self.head = None
        else:
            self.head = AngularHead(cin, 2, margin=cfg.margin, lam0=cfg.lam0,
                                    lam_min=cfg.lam_min, decay=cfg.lam_decay, rng=rng)
            self.fc_w = None
            self.fc_b = None

    def parameters(self) -> list[Parameter]:
        ps = self.stem1.parameters() + self.stem2.parameters()
        if 2 in self.cbams:
            ps += self.cbams[2].parameters()
        for stage_idx, blocks in enumerate(self.stages):
            for b in blocks:
                ps += b.parameters()
            if 3 + stage_idx in self.cbams:
                ps += self.cbams[3 + stage_idx].parameters()
        if self.head is not None:
            ps += self.head.parameters()
        else:
            ps += [self.fc_w, self.fc_b]
        return ps

    def bn_states(self) -> list[BatchNormState]:
        states = self.stem1.bn_states() + self.stem2.bn_states()
        for blocks in self.stages:
            for b in blocks:
                states += b.bn_states()
        return states

    def forward_features(self, x: Tensor, train: bool = True) -> Tensor:
        h = self.stem1(x, train)
        h = self.stem2(h, train)
        if 2 in self.cbams:
            h = cbam_apply(h, self.cbams[2])
        for stage_idx, blocks in enumerate(self.stages):
            for b in blocks:
                h = b(h, train)
            if 3 + stage_idx in self.cbams:
                h = cbam_apply(h, self.cbams[3 + stage_idx])
        pooled = T.pool3d(h, "avg", "global")
        return T.reshape(pooled, (x.data.shape[0], self.feature_dim))

    def forward(self, x: Tensor, train: bool = True) -> Tensor:
        """2-way logits; for the angular head these are the unmargined logits."""
        feats = self.forward_features(x, train)
        if self.head is not None:
            return Tensor(plain_logits(feats.data, self.head))
        return T.dense(feats, self.fc_w, self.fc_b)

    def predict_proba(self, volume: np.ndarray) -> float:
        """Probability that one 32^3 volume is positive (class 1)."""
        x = Tensor(volume.reshape((1, 1) + volume.shape))
        with no_grad():
            logits = self.forward(x, train=False).data[0]
        shifted = logits - logits.max()
        e = np.exp(shifted)
        return float(e[1] / e.sum())


def build_network(spec: ArchSpec, cfg: NetConfig, seed: int = 0) -> Network:
    return Network(spec, cfg, seed)


def count_params(network: Network) -> int:
    return sum(p.data.size for p in network.parameters())


def flatten_params(network: Network) -> np.ndarray:
    return np.concatenate([p.data.reshape(-1) for p in network.parameters()])


def _flatten_bn(network: Network) -> np.ndarray:
    parts = []
    for st in network.bn_states():
        parts.append(st.running_mean)
        parts.append(st.running_var)
    return np.concatenate(parts) if parts else np.zeros(0)


MAGIC = b"NLW1"


def save_checkpoint(network: Network, path):
    trainable = flatten_params(network)
    extra = _flatten_bn(network)
    spec_text = format_spec(network.spec).encode()
    digest = network.cfg.digest().encode("ascii")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(spec_text)))
        fh.write(spec_text)
        fh.write(struct.pack("<I", len(digest)))
        fh.write(digest)
        fh.write(struct.pack("<QQ", trainable.size, extra.size))
        fh.write(trainable.astype("<f8").tobytes())
        fh.write(extra.astype("<f8").tobytes())


def read_checkpoint_header(path) -> tuple[str, str]:
    """Return (spec text, config digest) without loading weights."""
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise CheckpointError(f"bad checkpoint magic in {path}")
        n = struct.unpack("<I", fh.read(4))[0]
        spec_text = fh.read(n).decode()
        n = struct.unpack("<I", fh.read(4))[0]
        digest = fh.read(n).decode("ascii")
    return spec_text, digest


def load_checkpoint(path, cfg: NetConfig) -> Network:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"bad checkpoint magic in {path}")
    off = 4
    try:
        n = struct.unpack_from("<I", blob, off)[0]
        off += 4
        spec_text = blob[off:off + n].decode()
        off += n
        n = struct.unpack_from("<I", blob, off)[0]
        off += 4
        digest = blob[off:off + n].decode("ascii")
        off += n
        n_train, n_extra = struct.unpack_from("<QQ", blob, off)
        off += 16
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError(f"truncated checkpoint header in {path}") from exc
    if digest != cfg.digest():
        raise CheckpointError(f"checkpoint config digest {digest} does not match "
                              f"the supplied config ({cfg.digest()})")
    expected = off + 8 * (n_train + n_extra)
    if len(blob) < expected:
        raise CheckpointError(f"truncated checkpoint payload in {path}: "
                              f"{len(blob)} bytes, expected {expected}")
    network = build_network(parse_spec(spec_text), cfg, seed=0)
    flat = np.frombuffer(blob, dtype="<f8", count=n_train, offset=off)
    if flat.size != count_params(network):
        raise CheckpointError("checkpoint weight count does not match the architecture")
    pos = 0
    for p in network.parameters():
        p.data = flat[pos:pos + p.data.size].reshape(p.data.shape).astype(np.float64)
        pos += p.data.size
    extra = np.frombuffer(blob, dtype="<f8", count=n_extra, offset=off + 8 * n_train)
    pos = 0
    for st in network.bn_states():
        c = st.running_mean.size
        st.running_mean = extra[pos:pos + c].astype(np.float64)
        pos += c
        st.running_var = extra[pos:pos + c].astype(np.float64)
        pos += c
    return network
