"""Two-stream segmentation network with residual fusion modules.

Both streams are small encoder-decoders with ``len(widths)`` levels (one 3x3
conv + ReLU per level, 2x max pooling between levels, nearest upsampling and
skip concatenation in the decoder). The LiDAR stream fuses the camera
features of the first ``fusion_levels`` encoder levels through
:class:`RFModule` and runs ASPP at the bottleneck.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ConfigError(ValueError):
    pass


@dataclass
class NetworkConfig:
    num_classes: int = 4
    camera_channels: int = 3
    lidar_channels: int = 5
    camera_widths: tuple = (8, 16, 32)
    lidar_widths: tuple = (8, 16, 32)
    fusion_levels: int = 3
    aspp_dilations: tuple = (1, 2, 4)
    fusion_kernel: int = 3
    attention_kernel: int = 1
    # per-channel multipliers applied to (d, x, y, z, r) before the LiDAR stream
    lidar_input_scale: tuple = (0.05, 0.05, 0.05, 0.5, 1.0)

    def __post_init__(self):
        self.camera_widths = tuple(int(w) for w in self.camera_widths)
        self.lidar_widths = tuple(int(w) for w in self.lidar_widths)
        self.aspp_dilations = tuple(int(d) for d in self.aspp_dilations)
        self.lidar_input_scale = tuple(float(s) for s in self.lidar_input_scale)
        self.validate()

    @property
    def levels(self):
        return len(self.lidar_widths)

    def validate(self):
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        if len(self.camera_widths) != len(self.lidar_widths) or not self.lidar_widths:
            raise ConfigError("camera and lidar streams need the same number of levels")
        if not 1 <= self.fusion_levels <= self.levels:
            raise ConfigError(f"fusion_levels must be in 1..{self.levels}")
        if not self.aspp_dilations:
            raise ConfigError("aspp_dilations must be non-empty")
        if self.fusion_kernel % 2 == 0 or self.attention_kernel % 2 == 0:
            raise ConfigError("fusion kernels must have odd size")
        if len(self.lidar_input_scale) != self.lidar_channels:
            raise ConfigError("lidar_input_scale needs one entry per LiDAR channel")

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


class Conv:
    def __init__(self, cin, cout, k, rng, dilation=1, std=None):
        fan_in = cin * k * k
        std = np.sqrt(2.0 / fan_in) if std is None else std
        self.weight = Tensor(rng.normal(0.0, std, size=(cout, cin, k, k)), requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True)
        self.dilation = dilation
        self.padding = dilation * (k // 2)

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.bias, 1, self.padding, self.dilation)

    def params(self, prefix):
        return [(prefix + ".weight", self.weight), (prefix + ".bias", self.bias)]


class RFModule:
    """Residual fusion: ``F_lidar + sigmoid(g(F_fuse)) * F_fuse``."""

    def __init__(self, camera_ch, lidar_ch, rng, fusion_kernel=3, attention_kernel=1):
        self.f = Conv(lidar_ch + camera_ch, lidar_ch, fusion_kernel, rng)
        self.g = Conv(lidar_ch, lidar_ch, attention_kernel, rng)
        self.camera_ch = camera_ch
        self.lidar_ch = lidar_ch

    def __call__(self, lidar_feat, camera_feat):
        return rf_fuse(lidar_feat, camera_feat, self)

    def params(self, prefix):
        return self.f.params(prefix + ".f") + self.g.params(prefix + ".g")


def rf_fuse(lidar_feat, camera_feat, module):
    if lidar_feat.shape[2:] != camera_feat.shape[2:] or lidar_feat.shape[0] != camera_feat.shape[0]:
        raise T.ShapeError(f"rf_fuse: {lidar_feat.shape} vs {camera_feat.shape}")
    if lidar_feat.shape[1] != module.lidar_ch or camera_feat.shape[1] != module.camera_ch:
        raise T.ShapeError("rf_fuse: channel counts do not match the module")
    fused = module.f(T.concat_channel(lidar_feat, camera_feat))
    gate = T.sigmoid(module.g(fused))
    return T.add(lidar_feat, T.mul(gate, fused))


class ASPP:
    def __init__(self, ch, dilations, rng):
        if not dilations:
            raise ConfigError("ASPP needs at least one dilation")
        self.branches = [Conv(ch, ch, 3, rng, dilation=d) for d in dilations]
        self.project = Conv(ch, ch, 1, rng)
        self.dilations = tuple(dilations)

    def __call__(self, x):
        return aspp_forward(x, self)

    def params(self, prefix):
        out = []
        for d, b in zip(self.dilations, self.branches):
            out += b.params(f"{prefix}.branch_d{d}")
        return out + self.project.params(prefix + ".project")


def aspp_forward(x, aspp):
    """Sum of dilated 3x3 branches followed by a 1x1 projection."""
    total = None
    for branch in aspp.branches:
        y = branch(x)
        if y.shape != x.shape[:1] + (branch.weight.shape[0],) + x.shape[2:]:
            raise T.ShapeError("ASPP branch changed the spatial size")
        total = y if total is None else T.add(total, y)
    return aspp.project(total)


class Stream:
    """Encoder-decoder trunk shared by both streams."""

    def __init__(self, in_ch, widths, num_classes, rng):
        self.widths = tuple(widths)
        self.enc = []
        prev = in_ch
        for w in widths:
            self.enc.append(Conv(prev, w, 3, rng))
            prev = w
        self.dec = []
        for lvl in range(len(widths) - 2, -1, -1):
            self.dec.append(Conv(prev + widths[lvl], widths[lvl], 3, rng))
            prev = widths[lvl]
        self.head = Conv(prev, num_classes, 1, rng, std=0.1)

    def decode(self, feats):
        x = feats[-1]
        for conv, skip in zip(self.dec, reversed(feats[:-1])):
            x = T.relu(conv(T.concat_channel(T.upsample2(x), skip)))
        return self.head(x)

    def params(self, prefix):
        out = []
        for i, c in enumerate(self.enc, 1):
            out += c.params(f"{prefix}.enc{i}")
        for i, c in enumerate(self.dec, 1):
            out += c.params(f"{prefix}.dec{i}")
        return out + self.head.params(prefix + ".head")


@dataclass
class TSNetOutput:
    O: Tensor
    O_lidar: Tensor
    camera_features: list = field(default_factory=list)
    fused_features: list = field(default_factory=list)


def _check_spatial(x, levels, what):
    H, W = x.shape[2:]
    m = 2 ** (levels - 1)
    if H % m or W % m:
        raise T.ShapeError(f"{what}: spatial size {H}x{W} not divisible by {m}")


class TSNet:
    def __init__(self, cfg=None, seed=0):
        self.cfg = cfg or NetworkConfig()
        cfg = self.cfg
        rng = np.random.default_rng(seed)
        self.camera = Stream(cfg.camera_channels, cfg.camera_widths, cfg.num_classes, rng)
        self.lidar = Stream(cfg.lidar_channels, cfg.lidar_widths, cfg.num_classes, rng)
        self.rf = [RFModule(cfg.camera_widths[l], cfg.lidar_widths[l], rng,
                            cfg.fusion_kernel, cfg.attention_kernel)
                   for l in range(cfg.fusion_levels)]
        self.aspp = ASPP(cfg.lidar_widths[-1], cfg.aspp_dilations, rng)

    # parameters ---------------------------------------------------------------

    def camera_params(self):
        return self.camera.params("camera")

    def lidar_params(self):
        out = self.lidar.params("lidar")
        for i, m in enumerate(self.rf, 1):
            out += m.params(f"lidar.rf{i}")
        return out + self.aspp.params("lidar.aspp")

    def named_parameters(self):
        return self.camera_params() + self.lidar_params()

    def parameter_count(self):
        return sum(t.size for _, t in self.named_parameters())

    def zero_grad(self):
        for _, t in self.named_parameters():
            t.grad = None

    def state_dict(self):
        return {name: t.data.copy() for name, t in self.named_parameters()}

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        if set(params) != set(state):
            missing = sorted(set(params) ^ set(state))
            raise ConfigError(f"checkpoint parameters do not match the model: {missing[:5]}")
        for name, t in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise ConfigError(f"{name}: shape {arr.shape} != {t.shape}")
            t.data = arr.copy()

    # forward ------------------------------------------------------------------

    def forward(self, image, lidar_input, fusion_enabled=True):
        O, cam_feats = camera_forward(image, self)
        O_lidar, fused = lidar_forward(lidar_input, cam_feats, self, fusion_enabled)
        return TSNetOutput(O, O_lidar, cam_feats, fused)

    __call__ = forward


def camera_forward(image, net):
    """Camera stream: returns (probabilities, per-level encoder features)."""
    cfg = net.cfg
    if image.shape[1] != cfg.camera_channels:
        raise T.ShapeError(f"camera input needs {cfg.camera_channels} channels")
    _check_spatial(image, cfg.levels, "camera_forward")
    feats = []
    x = image
    for lvl, conv in enumerate(net.camera.enc):
        if lvl:
            x = T.maxpool2(x)
        x = T.relu(conv(x))
        feats.append(x)
    return T.softmax_channel(net.camera.decode(feats)), feats


def lidar_forward(lidar_input, camera_features, net, fusion_enabled=True):
    """LiDAR stream: returns (probabilities, per-level encoder outputs)."""
    cfg = net.cfg
    if lidar_input.shape[1] != cfg.lidar_channels:
        raise T.ShapeError(f"lidar input needs {cfg.lidar_channels} channels")
    _check_spatial(lidar_input, cfg.levels, "lidar_forward")
    if fusion_enabled and (camera_features is None or len(camera_features) < cfg.fusion_levels):
        raise ValueError("fusion enabled but camera features are missing")
    feats = []
    x = lidar_input
    for lvl, conv in enumerate(net.lidar.enc):
        if lvl:
            x = T.maxpool2(x)
        x = T.relu(conv(x))
        if fusion_enabled and lvl < cfg.fusion_levels:
            x = net.rf[lvl](x, camera_features[lvl])
        if lvl == cfg.levels - 1:
            x = T.relu(net.aspp(x))
        feats.append(x)
    return T.softmax_channel(net.lidar.decode(feats)), feats


# --------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"PMFCKPT\x00"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, net, meta=None):
    """Write parameters in the little-endian layout documented in the README."""
    cfg_bytes = net.cfg.to_json().encode()
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    params = sorted(net.named_parameters())
    parts = [CHECKPOINT_MAGIC, struct.pack("<III", CHECKPOINT_VERSION, len(cfg_bytes), len(meta_bytes)),
             cfg_bytes, meta_bytes, struct.pack("<I", len(params))]
    for name, t in params:
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<B", t.data.ndim) + struct.pack(f"<{t.data.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path):
    """Returns (NetworkConfig, state dict, metadata)."""
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ConfigError(f"{path}: not a checkpoint")
    try:
        version, ncfg, nmeta = struct.unpack_from("<III", raw, 8)
        if version != CHECKPOINT_VERSION:
            raise ConfigError(f"{path}: unsupported checkpoint version {version}")
        pos = 20
        cfg = NetworkConfig.from_json(raw[pos:pos + ncfg].decode())
        pos += ncfg
        meta = json.loads(raw[pos:pos + nmeta].decode())
        pos += nmeta
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        state = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + nlen].decode()
            pos += nlen
            (ndim,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            n = int(np.prod(shape)) if ndim else 1
            if pos + 8 * n > len(raw):
                raise ConfigError(f"{path}: truncated parameter {name}")
            state[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * n
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, TypeError) as exc:
        raise ConfigError(f"{path}: corrupt checkpoint ({exc})") from exc
    return cfg, state, meta


def load_checkpoint(path, expected_cfg=None):
    cfg, state, meta = read_checkpoint(path)
    if expected_cfg is not None and expected_cfg.to_json() != cfg.to_json():
        raise ConfigError("checkpoint network config differs from the requested config")
    net = TSNet(cfg)
    net.load_state_dict(state)
    return net, meta


def config_hash(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]
