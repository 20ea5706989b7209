"""PainAttnNet: multiscale CNN, SE residual block, causal-TCN attention encoder."""
from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .autograd import Layer
from .errors import ConfigError, DimensionError, FormatError
from .layers import (GELU, BatchNorm1d, Conv1d, Conv1dSpec, Dropout, LayerNorm, Linear,
                     MaxPool1d, PoolSpec, ReLU, Sequential, Sigmoid, softmax)

FEATURE_LENGTH = 75
INPUT_LENGTH = 2816
CHECKPOINT_MAGIC = b"PANCKPT1"


# -- configuration -----------------------------------------------------------

@dataclass(frozen=True)
class BranchConfig:
    conv1: Conv1dSpec
    pool1: PoolSpec
    dropout: float
    conv2: Conv1dSpec
    conv3: Conv1dSpec
    pool2: PoolSpec


def _large_branch(c1=64, c2=128):
    return BranchConfig(
        conv1=Conv1dSpec(1, c1, 400, stride=50, left_pad=192, right_pad=192),
        pool1=PoolSpec(4, 2),
        dropout=0.5,
        conv2=Conv1dSpec(c1, c2, 7, left_pad=3, right_pad=3),
        conv3=Conv1dSpec(c2, c2, 7, left_pad=3, right_pad=3),
        pool2=PoolSpec(3, 1),
    )


def _small_branch(c1=64, c2=128):
    return BranchConfig(
        conv1=Conv1dSpec(1, c1, 50, stride=6, left_pad=24, right_pad=24),
        pool1=PoolSpec(8, 8),
        dropout=0.5,
        conv2=Conv1dSpec(c1, c2, 9, left_pad=4, right_pad=4),
        conv3=Conv1dSpec(c2, c2, 9, left_pad=4, right_pad=4),
        pool2=PoolSpec(9, 1),
    )


@dataclass(frozen=True)
class MscnConfig:
    large: BranchConfig = field(default_factory=_large_branch)
    small: BranchConfig = field(default_factory=_small_branch)
    input_length: int = INPUT_LENGTH

    @property
    def out_channels(self) -> int:
        return self.large.conv3.out_channels


@dataclass(frozen=True)
class SeResNetConfig:
    in_channels: int = 128
    mid_channels: int = 30
    reduction: int = 5
    downsample: bool = True

    @property
    def bottleneck(self) -> int:
        return self.mid_channels // self.reduction


@dataclass(frozen=True)
class EncoderConfig:
    heads: int = 5
    width: int = FEATURE_LENGTH
    tcn_kernel: int = 7
    ffn_hidden: int = 120
    dropout: float = 0.1
    blocks: int = 1


@dataclass(frozen=True)
class ModelConfig:
    mscn: MscnConfig = field(default_factory=MscnConfig)
    se: SeResNetConfig = field(default_factory=SeResNetConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    classifier_hidden: int = 64
    num_classes: int = 2

    @classmethod
    def mini(cls, num_classes: int = 2) -> "ModelConfig":
        """Reference layout with every width divided by 8 (lengths unchanged)."""
        return cls(
            mscn=MscnConfig(_large_branch(8, 16), _small_branch(8, 16)),
            se=SeResNetConfig(16, 4, 2),
            encoder=EncoderConfig(ffn_hidden=15),
            classifier_hidden=8,
            num_classes=num_classes,
        )

    def with_overrides(self, *, heads=None, blocks=None, num_classes=None) -> "ModelConfig":
        enc = self.encoder
        if heads is not None:
            enc = replace(enc, heads=heads)
        if blocks is not None:
            enc = replace(enc, blocks=blocks)
        return replace(self, encoder=enc,
                       num_classes=self.num_classes if num_classes is None else num_classes)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        def branch(b):
            return BranchConfig(
                conv1=Conv1dSpec(**b["conv1"]), pool1=PoolSpec(**b["pool1"]), dropout=b["dropout"],
                conv2=Conv1dSpec(**b["conv2"]), conv3=Conv1dSpec(**b["conv3"]), pool2=PoolSpec(**b["pool2"]))
        m = d["mscn"]
        return cls(
            mscn=MscnConfig(branch(m["large"]), branch(m["small"]), m["input_length"]),
            se=SeResNetConfig(**d["se"]),
            encoder=EncoderConfig(**d["encoder"]),
            classifier_hidden=d["classifier_hidden"],
            num_classes=d["num_classes"],
        )

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def branch_lengths(branch: BranchConfig, input_length: int) -> list[int]:
    """Time length after each length-changing stage: conv1, pool1, conv2, conv3, pool2."""
    lengths = []
    n = input_length
    for stage in (branch.conv1, branch.pool1, branch.conv2, branch.conv3, branch.pool2):
        n = stage.output_length(n)
        lengths.append(n)
    return lengths


def validate_config(cfg: ModelConfig) -> dict:
    """Check every shape contract; return the per-branch length trace.

    Raises ConfigError before any parameter is allocated.
    """
    trace = {}
    for name, b in (("large", cfg.mscn.large), ("small", cfg.mscn.small)):
        if b.conv1.in_channels != 1:
            raise ConfigError(f"{name} branch: conv1 must take 1 input channel")
        if b.conv2.in_channels != b.conv1.out_channels or b.conv3.in_channels != b.conv2.out_channels:
            raise ConfigError(f"{name} branch: channel chain conv1->conv2->conv3 is inconsistent")
        if not 0.0 <= b.dropout < 1.0:
            raise ConfigError(f"{name} branch: dropout must lie in [0, 1)")
        try:
            trace[name] = branch_lengths(b, cfg.mscn.input_length)
        except DimensionError as exc:
            raise ConfigError(f"{name} branch: {exc}") from exc
    if cfg.mscn.large.conv3.out_channels != cfg.mscn.small.conv3.out_channels:
        raise ConfigError("MSCN branches must end with the same channel count to concatenate on time")
    total = trace["large"][-1] + trace["small"][-1]
    if total != FEATURE_LENGTH:
        raise ConfigError(
            f"MSCN concatenated length is {total} "
            f"({trace['large'][-1]} + {trace['small'][-1]}); the encoder needs {FEATURE_LENGTH}")
    se = cfg.se
    if se.in_channels != cfg.mscn.out_channels:
        raise ConfigError(f"SE block expects {se.in_channels} channels, MSCN yields {cfg.mscn.out_channels}")
    if se.reduction < 1 or se.mid_channels % se.reduction or se.bottleneck < 1:
        raise ConfigError(f"SE mid_channels {se.mid_channels} not divisible into a bottleneck by r={se.reduction}")
    if not se.downsample and se.in_channels != se.mid_channels:
        raise ConfigError("SE residual without projection needs in_channels == mid_channels")
    enc = cfg.encoder
    if enc.width != FEATURE_LENGTH:
        raise ConfigError(f"encoder width must be {FEATURE_LENGTH}, got {enc.width}")
    if min(enc.heads, enc.tcn_kernel, enc.ffn_hidden, enc.blocks) < 1:
        raise ConfigError("encoder heads, tcn_kernel, ffn_hidden and blocks must be positive")
    if not 0.0 <= enc.dropout < 1.0:
        raise ConfigError("encoder dropout must lie in [0, 1)")
    if cfg.classifier_hidden < 1 or cfg.num_classes < 2:
        raise ConfigError("classifier needs hidden >= 1 and at least two classes")
    return trace


# -- network pieces ----------------------------------------------------------

class MscnBranch(Sequential):
    def __init__(self, cfg: BranchConfig, rng):
        super().__init__(
            ("conv1", Conv1d(cfg.conv1, rng, input_grad=False)),
            ("bn1", BatchNorm1d(cfg.conv1.out_channels)),
            ("gelu1", GELU()),
            ("pool1", MaxPool1d(cfg.pool1.kernel_size, cfg.pool1.stride)),
            ("drop", Dropout(cfg.dropout)),
            ("conv2", Conv1d(cfg.conv2, rng)),
            ("bn2", BatchNorm1d(cfg.conv2.out_channels)),
            ("gelu2", GELU()),
            ("conv3", Conv1d(cfg.conv3, rng)),
            ("bn3", BatchNorm1d(cfg.conv3.out_channels)),
            ("gelu3", GELU()),
            ("pool2", MaxPool1d(cfg.pool2.kernel_size, cfg.pool2.stride)),
        )


class Mscn(Layer):
    """Two convolution branches with large/small first kernels, joined on time."""

    def __init__(self, cfg: MscnConfig, rng, input_grad: bool = False):
        super().__init__()
        self.cfg = cfg
        self.large = self.add_child("large", MscnBranch(cfg.large, rng))
        self.small = self.add_child("small", MscnBranch(cfg.small, rng))
        self.set_input_grad(input_grad)

    def set_input_grad(self, flag: bool):
        self.large.children["conv1"].input_grad = flag
        self.small.children["conv1"].input_grad = flag

    def forward(self, x):
        if x.ndim != 3 or x.shape[1] != 1 or x.shape[2] != self.cfg.input_length:
            raise DimensionError(f"MSCN expects (N, 1, {self.cfg.input_length}), got {x.shape}")
        a = self.large.forward(x)
        b = self.small.forward(x)
        self._cache = a.shape[2]
        return np.concatenate([a, b], axis=2)

    def backward(self, upstream):
        split = self._saved()
        da = self.large.backward(upstream[:, :, :split])
        db = self.small.backward(upstream[:, :, split:])
        return None if da is None else da + db


class SeResBlock(Layer):
    """Squeeze-and-excitation with a residual path.

    ``v = conv2(relu(conv1(x)))`` (1x1 kernels); ``z`` is the per-sample time
    average of ``v``; ``alpha = sigmoid(W2 relu(W1 z))``; the block returns
    ``proj(x) + alpha * v`` where ``proj`` is a 1x1 convolution when the
    channel counts differ.
    """

    def __init__(self, cfg: SeResNetConfig, rng):
        super().__init__()
        self.cfg = cfg
        c_in, c_mid = cfg.in_channels, cfg.mid_channels
        self.body = self.add_child("body", Sequential(
            ("conv1", Conv1d(Conv1dSpec(c_in, c_mid, 1), rng)),
            ("relu", ReLU()),
            ("conv2", Conv1d(Conv1dSpec(c_mid, c_mid, 1), rng)),
        ))
        self.excite = self.add_child("excite", Sequential(
            ("fc1", Linear(c_mid, cfg.bottleneck, rng, bias=False)),
            ("relu", ReLU()),
            ("fc2", Linear(cfg.bottleneck, c_mid, rng, bias=False)),
            ("sigmoid", Sigmoid()),
        ))
        self.residual = None
        if cfg.downsample and c_in != c_mid:
            self.residual = self.add_child("residual", Conv1d(Conv1dSpec(c_in, c_mid, 1), rng))

    def forward(self, x):
        v = self.body.forward(x)
        z = v.mean(axis=2)
        alpha = self.excite.forward(z)
        self.alpha = alpha
        res = x if self.residual is None else self.residual.forward(x)
        self._cache = (v, alpha)
        return res + alpha[:, :, None] * v

    def backward(self, upstream):
        v, alpha = self._saved()
        dalpha = (upstream * v).sum(axis=2)
        dz = self.excite.backward(dalpha)
        dv = upstream * alpha[:, :, None] + dz[:, :, None] / v.shape[2]
        dx = self.body.backward(dv)
        dres = upstream if self.residual is None else self.residual.backward(upstream)
        return dx + dres


class MultiHeadAttention(Layer):
    """Attention over channel tokens of full width, fed by causal convolutions.

    Each of the query/key/value TCNs is one causal convolution along the
    width axis mapping ``C`` tokens to ``H*C`` channels; block ``h`` of its
    output is head ``h``'s input. Head outputs (each of width ``L``) are
    concatenated to ``H*L`` and projected back to ``L`` without bias.
    The residual stream is the head-averaged query.
    """

    def __init__(self, cfg: EncoderConfig, tokens: int, rng):
        super().__init__()
        self.cfg, self.tokens = cfg, tokens
        h, c = cfg.heads, tokens
        spec = Conv1dSpec.make_causal(c, h * c, cfg.tcn_kernel)
        self.tcn_q = self.add_child("tcn_q", Conv1d(spec, rng))
        self.tcn_k = self.add_child("tcn_k", Conv1d(spec, rng))
        self.tcn_v = self.add_child("tcn_v", Conv1d(spec, rng))
        self.proj = self.add_child("proj", Linear(h * cfg.width, cfg.width, rng, bias=False))
        self.attention = None

    def _heads(self, t):
        n, _, width = t.shape
        return t.reshape(n, self.cfg.heads, self.tokens, width)

    def project_inputs(self, x):
        """Return the query, key and value tensors, each ``(N, H, C, L)``."""
        return (self._heads(self.tcn_q.forward(x)), self._heads(self.tcn_k.forward(x)),
                self._heads(self.tcn_v.forward(x)))

    def forward_with_residual(self, x):
        if x.ndim != 3 or x.shape[1] != self.tokens or x.shape[2] != self.cfg.width:
            raise DimensionError(f"attention expects (N, {self.tokens}, {self.cfg.width}), got {x.shape}")
        q, k, v = self.project_inputs(x)
        scale = 1.0 / np.sqrt(self.cfg.width)
        attn = softmax((q @ k.transpose(0, 1, 3, 2)) * scale)
        z = attn @ v
        n = x.shape[0]
        merged = z.transpose(0, 2, 1, 3).reshape(n, self.tokens, self.cfg.heads * self.cfg.width)
        out = self.proj.forward(merged)
        self.attention = attn
        self._cache = (q, k, v, attn, scale)
        return out, q.mean(axis=1)

    def forward(self, x):
        return self.forward_with_residual(x)[0]

    def backward(self, upstream, residual_grad=None):
        q, k, v, attn, scale = self._saved()
        n, h, c, width = q.shape
        dmerged = self.proj.backward(upstream)
        dz = dmerged.reshape(n, c, h, width).transpose(0, 2, 1, 3)
        dattn = dz @ v.transpose(0, 1, 3, 2)
        dv = attn.transpose(0, 1, 3, 2) @ dz
        de = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True)) * scale
        dq = de @ k
        dk = de.transpose(0, 1, 3, 2) @ q
        if residual_grad is not None:
            dq = dq + residual_grad[:, None] / h
        shape = (n, h * c, width)
        return (self.tcn_q.backward(dq.reshape(shape)) + self.tcn_k.backward(dk.reshape(shape))
                + self.tcn_v.backward(dv.reshape(shape)))


class EncoderBlock(Layer):
    """``h1 = LN(x~ + MHA(x))``, ``out = LN(h1 + FFN(h1))``."""

    def __init__(self, cfg: EncoderConfig, tokens: int, rng):
        super().__init__()
        self.mha = self.add_child("mha", MultiHeadAttention(cfg, tokens, rng))
        self.ln1 = self.add_child("ln1", LayerNorm(cfg.width))
        self.ffn = self.add_child("ffn", Sequential(
            ("fc1", Linear(cfg.width, cfg.ffn_hidden, rng)),
            ("relu", ReLU()),
            ("drop", Dropout(cfg.dropout)),
            ("fc2", Linear(cfg.ffn_hidden, cfg.width, rng)),
        ))
        self.ln2 = self.add_child("ln2", LayerNorm(cfg.width))

    def forward(self, x):
        att, xt = self.mha.forward_with_residual(x)
        h1 = self.ln1.forward(xt + att)
        out = self.ln2.forward(h1 + self.ffn.forward(h1))
        self._cache = True
        return out

    def backward(self, upstream):
        self._saved()
        g = self.ln2.backward(upstream)
        dh1 = g + self.ffn.backward(g)
        ds = self.ln1.backward(dh1)
        return self.mha.backward(ds, residual_grad=ds)


class ClassifierHead(Layer):
    """Flatten, linear, ReLU, linear. Returns logits; see :func:`classify`."""

    def __init__(self, in_features: int, hidden: int, num_classes: int, rng):
        super().__init__()
        self.mlp = self.add_child("mlp", Sequential(
            ("fc1", Linear(in_features, hidden, rng)),
            ("relu", ReLU()),
            ("fc2", Linear(hidden, num_classes, rng)),
        ))

    def forward(self, x):
        self._cache = x.shape
        return self.mlp.forward(x.reshape(x.shape[0], -1))

    def backward(self, upstream):
        shape = self._saved()
        return self.mlp.backward(upstream).reshape(shape)


class PainAttnNet(Layer):
    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0):
        super().__init__()
        cfg = cfg or ModelConfig()
        validate_config(cfg)
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.mscn = self.add_child("mscn", Mscn(cfg.mscn, rng))
        self.se = self.add_child("se", SeResBlock(cfg.se, rng))
        self.encoder = self.add_child("encoder", Sequential(*[
            (f"block{i}", EncoderBlock(cfg.encoder, cfg.se.mid_channels, rng))
            for i in range(cfg.encoder.blocks)]))
        self.head = self.add_child("head", ClassifierHead(
            cfg.se.mid_channels * cfg.encoder.width, cfg.classifier_hidden, cfg.num_classes, rng))
        self.reseed(seed)

    def features(self, x):
        """Stage outputs ``(mscn, se, encoder)`` for inspection; not cached for backward."""
        a = self.mscn.forward(x)
        b = self.se.forward(a)
        return a, b, self.encoder.forward(b)

    def forward(self, x):
        """Map ``(N, 1, input_length)`` windows to ``(N, num_classes)`` logits."""
        x = np.asarray(x, dtype=np.float64)
        _, _, enc = self.features(x)
        self._cache = True
        return self.head.forward(enc)

    def backward(self, upstream):
        self._saved()
        g = self.head.backward(upstream)
        g = self.encoder.backward(g)
        g = self.se.backward(g)
        return self.mscn.backward(g)

    def predict_proba(self, x, batch_size: int = 256):
        was_training = self.training
        self.eval()
        try:
            out = [classify(self, x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
        finally:
            self.train(was_training)
        return np.concatenate(out, axis=0)


def classify(model: PainAttnNet, x) -> np.ndarray:
    """Class probabilities (rows sum to one)."""
    return softmax(model.forward(x))


# -- checkpoints -------------------------------------------------------------

def _header_json(model: PainAttnNet, meta: dict | None) -> bytes:
    doc = {"model": model.cfg.to_dict(), "meta": meta or {}}
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()


def checkpoint_bytes(model: PainAttnNet, meta: dict | None = None) -> bytes:
    """Serialise config and all parameters/buffers.

    Layout: magic ``PANCKPT1`` | u32 header length | header JSON | 32-byte
    SHA-256 of the header | u32 tensor count | per tensor (u16 name length,
    name, u8 rank, u32 dims, float64 LE data) | u32 CRC32 of everything
    after the magic.
    """
    header = _header_json(model, meta)
    body = bytearray()
    body += struct.pack("<I", len(header)) + header + hashlib.sha256(header).digest()
    tensors = model.state_tensors()
    body += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        raw = name.encode()
        body += struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
        body += struct.pack(f"<{arr.ndim}I", *arr.shape)
        body += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    return CHECKPOINT_MAGIC + bytes(body) + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(model: PainAttnNet, path, meta: dict | None = None):
    Path(path).write_bytes(checkpoint_bytes(model, meta))


class _Reader:
    def __init__(self, data: bytes, start: int):
        self.data, self.pos = data, start

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"checkpoint truncated while reading {what}", self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def parse_checkpoint(data: bytes) -> tuple[PainAttnNet, dict]:
    if len(data) < len(CHECKPOINT_MAGIC) or data[:8] != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint: bad magic", 0)
    if len(data) < 12:
        raise FormatError("checkpoint truncated", len(data))
    body, (crc,) = data[8:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError("checkpoint checksum mismatch", len(data) - 4)
    r = _Reader(data[:-4], 8)
    (hlen,) = r.unpack("<I", "header length")
    header_at = r.pos
    header = r.take(hlen, "header")
    if r.take(32, "config digest") != hashlib.sha256(header).digest():
        raise FormatError("checkpoint config digest mismatch", header_at)
    try:
        doc = json.loads(header)
        cfg = ModelConfig.from_dict(doc["model"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"checkpoint header unreadable: {exc}", header_at) from exc
    try:
        model = PainAttnNet(cfg)
    except ConfigError as exc:
        raise FormatError(f"checkpoint config invalid: {exc}", header_at) from exc
    expected = model.state_tensors()
    (count,) = r.unpack("<I", "tensor count")
    if count != len(expected):
        raise FormatError(f"checkpoint holds {count} tensors, model has {len(expected)}", r.pos - 4)
    for _ in range(count):
        at = r.pos
        (nlen,) = r.unpack("<H", "name length")
        name = r.take(nlen, "tensor name").decode("utf-8", errors="replace")
        (ndim,) = r.unpack("<B", "rank")
        shape = r.unpack(f"<{ndim}I", "shape")
        if name not in expected or expected[name].shape != tuple(shape):
            raise FormatError(f"unexpected tensor {name!r} with shape {shape}", at)
        size = int(np.prod(shape)) * 8
        expected[name][...] = np.frombuffer(r.take(size, name), dtype="<f8").reshape(shape)
    if r.pos != len(r.data):
        raise FormatError("trailing bytes after last tensor", r.pos)
    return model, doc.get("meta", {})


def load_checkpoint(path) -> tuple[PainAttnNet, dict]:
    return parse_checkpoint(Path(path).read_bytes())
