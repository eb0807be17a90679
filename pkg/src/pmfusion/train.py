"""Hybrid two-stream training: SGD-Nesterov for the camera stream, Adam for
the LiDAR stream, one shared forward pass per step and a cosine learning
rate schedule decaying to zero.
"""
from __future__ import annotations

import configparser
import csv
import io
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import geometry as G
from . import tensor as T
from .dataio import synth_scene_generate
from .losses import LossConfig, pmf_losses
from .network import NetworkConfig, TSNet
from .tensor import Tensor


def cosine_lr(step, total_steps, base_lr):
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * step / total_steps))


# --------------------------------------------------------------------------
# optimizers


def _check(p, g):
    if g.shape != p.shape:
        raise T.ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")


class SGDNesterov:
    """``v <- mu v + g``; ``p <- p - lr (g + mu v)``."""

    kind = "sgd_nesterov"

    def __init__(self, params, lr=1e-3, momentum=0.9, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = {name: np.zeros(t.shape) for name, t in self.params}
        self.steps = 0

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        mu = self.momentum
        for name, p in self.params:
            g = np.zeros(p.shape) if p.grad is None else p.grad
            _check(p, g)
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v = self.buffers[name]
            v *= mu
            v += g
            p.data = p.data - lr * (g + mu * v)
        self.steps += 1


class Adam:
    kind = "adam"

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {name: np.zeros(t.shape) for name, t in self.params}
        self.v = {name: np.zeros(t.shape) for name, t in self.params}
        self.steps = 0

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.steps += 1
        t = self.steps
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            _check(p, g)
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1 ** t)
            vhat = v / (1 - b2 ** t)
            p.data = p.data - lr * mhat / (np.sqrt(vhat) + self.eps)


def clip_grad_norm(params, max_norm):
    grads = [p.grad for _, p in params if p.grad is not None]
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for _, p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


# --------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    steps: int = 200
    batch_size: int = 8
    base_lr: float = 1e-3
    camera_lr: float | None = None
    lidar_lr: float | None = None
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float = 0.0
    seed: int = 0
    fusion: bool = True
    pl: bool = True
    projection: str = "perspective"
    fov_up: float = 3.0
    fov_down: float = -25.0
    freeze_camera: bool = False
    # synthetic data
    num_scenes: int = 8
    image_size: tuple = (32, 32)
    num_points: int = 1000

    def __post_init__(self):
        if self.projection not in ("perspective", "spherical"):
            raise ValueError(f"unknown projection {self.projection!r}")
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be positive")
        self.image_size = tuple(int(v) for v in self.image_size)

    @property
    def lr_camera(self):
        return self.base_lr if self.camera_lr is None else self.camera_lr

    @property
    def lr_lidar(self):
        return self.base_lr if self.lidar_lr is None else self.lidar_lr

    def to_dict(self):
        return asdict(self)


_SECTIONS = {"network": NetworkConfig, "loss": LossConfig}


def _coerce(value, default, name):
    text = value.strip()
    if isinstance(default, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {value!r}")
    if isinstance(default, tuple):
        parts = [p for p in text.replace(",", " ").split() if p]
        kind = float if default and isinstance(default[0], float) else int
        return tuple(kind(p) for p in parts)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float) or default is None:
        return None if text.lower() == "none" else float(text)
    return text


def parse_config_text(text):
    """Parse ``key = value`` lines into a :class:`TrainConfig`.

    Keys are ``TrainConfig`` fields, or ``network.<field>`` / ``loss.<field>``.
    ``lambda`` is accepted as an alias of ``loss.lam``. Unknown keys raise
    ``ValueError``.
    """
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    parser.read_string("[pmf]\n" + text)
    return apply_overrides(TrainConfig(), dict(parser["pmf"]))


_ALIASES = {"lambda": "loss.lam", "tau": "loss.tau", "gamma": "loss.gamma",
            "focal_gamma": "loss.focal_gamma", "epsilon": "loss.epsilon"}


def apply_overrides(cfg, overrides):
    """Return a copy of ``cfg`` with string or typed ``overrides`` applied."""
    top = {f.name: getattr(cfg, f.name) for f in fields(TrainConfig)}
    nested = {k: asdict(top[k]) for k in _SECTIONS}
    defaults = {k: {f.name: f.default for f in fields(cls)} for k, cls in _SECTIONS.items()}
    for key, value in overrides.items():
        key = _ALIASES.get(key, key)
        if "." in key:
            sect, name = key.split(".", 1)
            if sect not in nested or name not in nested[sect]:
                raise ValueError(f"unknown config key {key!r}")
            cur = nested[sect][name]
            dflt = defaults[sect][name]
            ref = cur if cur is not None else dflt
            nested[sect][name] = _coerce(value, ref, key) if isinstance(value, str) else value
        else:
            if key not in top or key in _SECTIONS:
                raise ValueError(f"unknown config key {key!r}")
            ref = top[key]
            if key in ("camera_lr", "lidar_lr"):
                ref = None
            top[key] = _coerce(value, ref, key) if isinstance(value, str) else value
    for sect, cls in _SECTIONS.items():
        top[sect] = cls(**nested[sect])
    return TrainConfig(**top)


def read_config(path):
    return parse_config_text(Path(path).read_text())


def write_config(path, cfg):
    lines = []
    for f in fields(TrainConfig):
        v = getattr(cfg, f.name)
        if f.name in _SECTIONS:
            for k, sub in asdict(v).items():
                lines.append(f"{f.name}.{k} = {_fmt(sub)}")
        else:
            lines.append(f"{f.name} = {_fmt(v)}")
    Path(path).write_text("\n".join(lines) + "\n")


def _fmt(v):
    if isinstance(v, (tuple, list)):
        return " ".join(repr(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


# --------------------------------------------------------------------------
# samples and batches


@dataclass
class Sample:
    record: object
    camera_scan: G.ProjectedScan
    lidar_scan: G.ProjectedScan


def project_record(record, cfg):
    """Perspective scan for camera supervision plus the LiDAR-stream scan."""
    cam = G.perspective_project_cloud(record.cloud, record.labels, record.calib)
    if cfg.projection == "perspective":
        return Sample(record, cam, cam)
    lid = G.spherical_project_cloud(record.cloud, record.labels, cfg.fov_up, cfg.fov_down,
                                    record.calib.image_size)
    return Sample(record, cam, lid)


def synthetic_dataset(cfg, seed_offset=0):
    base = 1000 * cfg.seed + seed_offset
    return [synth_scene_generate(base + i, cfg.num_points, cfg.image_size, cfg.network.num_classes)
            for i in range(cfg.num_scenes)]


def make_batch(samples, net_cfg):
    scale = np.asarray(net_cfg.lidar_input_scale).reshape(1, -1, 1, 1)
    image = np.stack([s.record.image for s in samples])
    lidar = np.stack([s.lidar_scan.features for s in samples]) * scale
    return {
        "image": Tensor(image),
        "lidar": Tensor(lidar),
        "camera_labels": np.stack([s.camera_scan.label_image for s in samples]),
        "lidar_labels": np.stack([s.lidar_scan.label_image for s in samples]),
    }


# --------------------------------------------------------------------------
# training


def train_step(net, batch, cfg, opt_camera, opt_lidar, step, total_steps):
    """One hybrid update; returns the (camera, lidar) loss values and lrs."""
    net.zero_grad()
    out = net(batch["image"], batch["lidar"], fusion_enabled=cfg.fusion)
    cam, lid, _ = pmf_losses(out.O, out.O_lidar, batch["camera_labels"], cfg.loss,
                             pl_enabled=cfg.pl, lidar_labels=batch["lidar_labels"])
    objective = lid.total if cfg.freeze_camera else T.add(cam.total, lid.total)
    if objective.requires_grad:
        T.backward(objective)
    if cfg.grad_clip > 0:
        clip_grad_norm(opt_lidar.params, cfg.grad_clip)
        clip_grad_norm(opt_camera.params, cfg.grad_clip)
    lr_l = cosine_lr(step, total_steps, cfg.lr_lidar)
    lr_c = cosine_lr(step, total_steps, cfg.lr_camera)
    opt_lidar.step(lr_l)
    if not cfg.freeze_camera:
        opt_camera.step(lr_c)
    return cam.values(), lid.values(), lr_c, lr_l


LOG_COLUMNS = ["step"] + [f"{s}_{k}" for s in ("camera", "lidar")
                          for k in ("lr", "focal", "lovasz", "perception", "total")]


@dataclass
class TrainResult:
    net: TSNet
    history: list
    samples: list

    def column(self, name):
        return np.array([row[name] for row in self.history])

    def csv_text(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for row in self.history:
            w.writerow([row["step"]] + [repr(float(row[c])) for c in LOG_COLUMNS[1:]])
        return buf.getvalue()


def make_optimizers(net, cfg):
    opt_c = SGDNesterov(net.camera_params(), cfg.lr_camera, cfg.momentum, cfg.weight_decay)
    lidar = net.lidar_params()
    if not cfg.fusion:
        lidar = [(n, t) for n, t in lidar if ".rf" not in n]
    opt_l = Adam(lidar, cfg.lr_lidar, (cfg.beta1, cfg.beta2), cfg.adam_eps, cfg.weight_decay)
    return opt_c, opt_l


def train(cfg, records=None, net=None, progress=None):
    """Run ``cfg.steps`` hybrid steps on ``records`` (synthetic when None)."""
    records = synthetic_dataset(cfg) if records is None else records
    if not records:
        raise ValueError("no training records")
    samples = [project_record(r, cfg) for r in records]
    net = net or TSNet(cfg.network, seed=cfg.seed)
    opt_c, opt_l = make_optimizers(net, cfg)
    rng = np.random.default_rng(cfg.seed)
    bs = min(cfg.batch_size, len(samples))
    order = []
    history = []
    for step in range(cfg.steps):
        if len(order) < bs:
            order += list(rng.permutation(len(samples))) if bs < len(samples) else list(range(len(samples)))
        idx, order = order[:bs], order[bs:]
        batch = make_batch([samples[i] for i in idx], cfg.network)
        cam, lid, lr_c, lr_l = train_step(net, batch, cfg, opt_c, opt_l, step, cfg.steps)
        row = {"step": step, "camera_lr": lr_c, "lidar_lr": lr_l}
        row.update({f"camera_{k}": v for k, v in cam.items()})
        row.update({f"lidar_{k}": v for k, v in lid.items()})
        history.append(row)
        if progress is not None:
            progress(row)
    return TrainResult(net, history, samples)


def predict(net, samples, cfg):
    """LiDAR- and camera-stream outputs for ``samples`` (no graph recorded)."""
    batch = make_batch(samples, cfg.network)
    out = net(batch["image"], batch["lidar"], fusion_enabled=cfg.fusion)
    return out.O.data, out.O_lidar.data, batch


def valid_pixel_accuracy(net, samples, cfg):
    _, O_lidar, batch = predict(net, samples, cfg)
    lab = batch["lidar_labels"]
    m = lab != G.IGNORE
    return float(np.mean(O_lidar.argmax(axis=1)[m] == lab[m]))
