"""Finite-difference verification of every differentiable op and of the full
two-stream objective on a miniature network.

Tape gradients are compared with central differences. Stop-gradient
quantities (detached teachers and importance maps) are frozen at their
unperturbed values so that both sides differentiate the same function.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .dataio import synth_scene_generate
from .geometry import perspective_project_cloud
from .losses import (LossConfig, confidence_map, focal_loss, importance_camera, importance_lidar,
                     kl_map, lovasz_softmax, perception_loss, pmf_losses, stream_objective)
from .network import ASPP, NetworkConfig, RFModule, TSNet, aspp_forward, rf_fuse
from .tensor import Tensor

STEP = 1e-5
TOLERANCE = 1e-4
FLOOR = 1e-6


def rel_err(a, b, floor=FLOOR):
    return abs(a - b) / max(abs(a), abs(b), floor)


@dataclass
class CheckResult:
    name: str
    worst: float
    checked: int
    tolerance: float = TOLERANCE

    @property
    def ok(self):
        return self.worst < self.tolerance


@dataclass
class GradcheckReport:
    results: list = field(default_factory=list)

    @property
    def ok(self):
        return all(r.ok for r in self.results)

    @property
    def worst(self):
        return max(r.worst for r in self.results)

    def lines(self):
        out = []
        for r in self.results:
            status = "ok" if r.ok else "FAIL"
            out.append(f"{r.name:<24s} worst_rel_err={r.worst:.3e} checked={r.checked:<4d} {status}")
        return out


def check_function(f, inputs, rng, max_coords=None, step=STEP):
    """Worst relative error between tape and central-difference gradients.

    ``f`` maps nothing to a scalar Tensor built from ``inputs`` (Tensors with
    ``requires_grad``). ``max_coords`` caps the coordinates probed per input.
    """
    for x in inputs:
        x.zero_grad()
    T.backward(f())
    worst, checked = 0.0, 0
    for x in inputs:
        analytic = np.zeros(x.shape) if x.grad is None else x.grad.copy()
        flat = x.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            up = f().item()
            flat[i] = orig - step
            down = f().item()
            flat[i] = orig
            numeric = (up - down) / (2 * step)
            worst = max(worst, rel_err(analytic.reshape(-1)[i], numeric))
            checked += 1
    return worst, checked


def _param(rng, *shape, scale=1.0):
    return Tensor(rng.normal(0.0, scale, shape), requires_grad=True)


def _probs(rng, shape):
    return T.softmax_channel(Tensor(rng.normal(0.0, 1.0, shape)))


def _weighted_sum(y, rng):
    """Random linear functional so every output coordinate matters."""
    w = Tensor(rng.normal(size=y.shape))
    return T.sum_all(T.mul(y, w))


# --------------------------------------------------------------------------
# miniature configuration


def miniature_configs():
    """A 1 x S x 8 x 8 network and a loss config whose gates open at init."""
    net_cfg = NetworkConfig(num_classes=4, camera_widths=(4, 6, 8), lidar_widths=(4, 6, 8),
                            fusion_levels=3, aspp_dilations=(1, 2))
    # tau = 0 lets the importance maps be non-zero for an untrained network
    loss_cfg = LossConfig(tau=0.0)
    return net_cfg, loss_cfg


def miniature_batch(net_cfg, seed):
    rec = synth_scene_generate(seed, num_points=120, image_size=(8, 8), num_classes=net_cfg.num_classes)
    scan = perspective_project_cloud(rec.cloud, rec.labels, rec.calib)
    scale = np.asarray(net_cfg.lidar_input_scale).reshape(-1, 1, 1)
    image = Tensor(rec.image[None])
    lidar = Tensor((scan.features * scale)[None])
    return image, lidar, scan.label_image[None]


def _objective_case(pl, seed, max_coords):
    net_cfg, loss_cfg = miniature_configs()
    net = TSNet(net_cfg, seed=seed)
    image, lidar, labels = miniature_batch(net_cfg, seed)

    # freeze teachers and importance maps at the unperturbed outputs
    out = net(image, lidar)
    conf_c, conf_l = confidence_map(out.O.data), confidence_map(out.O_lidar.data)
    frozen = (out.O.data.copy(), out.O_lidar.data.copy(),
              importance_camera(conf_c, conf_l, loss_cfg.tau),
              importance_lidar(conf_l, conf_c, loss_cfg.tau))

    def f():
        o = net(image, lidar)
        cam, lid, _ = pmf_losses(o.O, o.O_lidar, labels, loss_cfg, pl_enabled=pl, frozen=frozen)
        return T.add(cam.total, lid.total)

    params = [p for _, p in net.named_parameters()]
    return f, params, max_coords


def op_cases(seed=0):
    """``[(name, build)]``; ``build(rng)`` returns ``(f, inputs, max_coords)``."""

    def conv(rng):
        x, w, b = _param(rng, 2, 3, 6, 6), _param(rng, 4, 3, 3, 3), _param(rng, 4)
        return (lambda: _weighted_sum(T.conv2d(x, w, b, stride=2, padding=2, dilation=2), rng_fixed(1))), [x, w, b], None

    def softmax(rng):
        x = _param(rng, 2, 4, 3, 3)
        return (lambda: _weighted_sum(T.softmax_channel(x), rng_fixed(2))), [x], None

    def sigmoid(rng):
        x = _param(rng, 2, 3, 4, 4, scale=2.0)
        return (lambda: _weighted_sum(T.sigmoid(x), rng_fixed(3))), [x], None

    def concat(rng):
        a, b = _param(rng, 2, 2, 3, 3), _param(rng, 2, 3, 3, 3)
        return (lambda: _weighted_sum(T.concat_channel(a, b), rng_fixed(4))), [a, b], None

    def add(rng):
        a, b = _param(rng, 2, 3, 4, 4), _param(rng, 2, 3, 4, 4)
        return (lambda: _weighted_sum(T.elementwise("add", a, b), rng_fixed(5))), [a, b], None

    def mul(rng):
        a, b = _param(rng, 2, 3, 4, 4), _param(rng, 2, 3, 4, 4)
        return (lambda: _weighted_sum(T.elementwise("mul", a, b), rng_fixed(6))), [a, b], None

    def maxpool(rng):
        # distinct values keep the argmax away from ties
        x = Tensor(rng.permutation(2 * 3 * 4 * 4).reshape(2, 3, 4, 4) * 0.1, requires_grad=True)
        return (lambda: _weighted_sum(T.pool_resize(x, "maxpool2"), rng_fixed(7))), [x], None

    def upsample(rng):
        x = _param(rng, 2, 3, 3, 3)
        return (lambda: _weighted_sum(T.pool_resize(x, "upsample_nearest2"), rng_fixed(8))), [x], None

    def relu(rng):
        d = rng.normal(size=(2, 3, 4, 4))
        d = np.where(np.abs(d) < 0.05, 0.5, d)
        x = Tensor(d, requires_grad=True)
        return (lambda: _weighted_sum(T.relu(x), rng_fixed(9))), [x], None

    def rf(rng):
        mod = RFModule(3, 4, rng)
        lid, cam = _param(rng, 1, 4, 5, 5), _param(rng, 1, 3, 5, 5)
        teacher = _probs(rng, (1, 4, 5, 5)).data

        def f():
            fused = rf_fuse(lid, cam, mod)
            return T.sum_all(kl_map(T.softmax_channel(fused), Tensor(teacher)))

        return f, [lid, cam, mod.f.weight, mod.f.bias, mod.g.weight, mod.g.bias], None

    def aspp(rng):
        mod = ASPP(3, (1, 2, 3), rng)
        x = _param(rng, 1, 3, 6, 6)
        params = [x] + [p for _, p in mod.params("aspp")]
        return (lambda: _weighted_sum(aspp_forward(x, mod), rng_fixed(10))), params, 12

    def kl(rng):
        P = _param(rng, 1, 4, 3, 3)
        Q = _probs(rng, (1, 4, 3, 3)).data
        return (lambda: T.sum_all(kl_map(T.softmax_channel(P), Tensor(Q)))), [P], None

    def perception(rng):
        s = _param(rng, 2, 4, 3, 3)
        teacher = _probs(rng, (2, 4, 3, 3)).data
        omega = rng.uniform(0, 1, (2, 3, 3))
        return (lambda: perception_loss(T.softmax_channel(s), Tensor(teacher), omega)), [s], None

    def labels_for(rng, shape):
        lab = rng.integers(0, shape[1], (shape[0],) + shape[2:])
        lab[rng.random(lab.shape) < 0.2] = -1
        return lab

    def focal(rng):
        x = _param(rng, 2, 4, 4, 4)
        lab = labels_for(rng, (2, 4, 4, 4))
        return (lambda: focal_loss(T.softmax_channel(x), lab, 2.0)), [x], None

    def lovasz(rng):
        x = _param(rng, 2, 4, 4, 4)
        lab = labels_for(rng, (2, 4, 4, 4))
        return (lambda: lovasz_softmax(T.softmax_channel(x), lab)), [x], None

    def objective(rng):
        x = _param(rng, 2, 4, 4, 4)
        lab = labels_for(rng, (2, 4, 4, 4))
        teacher = _probs(rng, (2, 4, 4, 4)).data
        omega = rng.uniform(0, 1, (2, 4, 4))
        cfg = LossConfig()

        def f():
            p = T.softmax_channel(x)
            return stream_objective(focal_loss(p, lab), lovasz_softmax(p, lab),
                                    perception_loss(p, Tensor(teacher), omega), cfg).total

        return f, [x], None

    cases = [
        ("conv2d", conv), ("softmax_channel", softmax), ("sigmoid", sigmoid),
        ("concat_channel", concat), ("elementwise_add", add), ("elementwise_mul", mul),
        ("maxpool2", maxpool), ("upsample_nearest2", upsample), ("relu", relu),
        ("rf_fuse", rf), ("aspp_forward", aspp), ("kl_map", kl),
        ("perception_loss", perception), ("focal_loss", focal), ("lovasz_softmax", lovasz),
        ("stream_objective", objective),
        ("tsnet_objective", lambda rng: _objective_case(False, seed, 8)),
        ("tsnet_objective_pl", lambda rng: _objective_case(True, seed, 8)),
    ]
    return cases


def rng_fixed(k):
    return np.random.default_rng(10_000 + k)


def run_gradcheck(seed=0, only=None, tolerance=TOLERANCE):
    """Run every case (or those named in ``only``) and collect worst errors."""
    report = GradcheckReport()
    for name, build in op_cases(seed):
        if only is not None and name not in only:
            continue
        rng = np.random.default_rng(seed)
        f, inputs, max_coords = build(rng)
        worst, checked = check_function(f, inputs, rng, max_coords)
        report.results.append(CheckResult(name, worst, checked, tolerance))
    return report


# --------------------------------------------------------------------------
# mutation hook


def _broken_sigmoid(x):
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return T._result("sigmoid", y, (x,), lambda g: (g * y,))


MUTATIONS = {"sigmoid": ("sigmoid", _broken_sigmoid)}


@contextlib.contextmanager
def mutation(name):
    """Temporarily replace an op with a version whose backward is wrong."""
    attr, broken = MUTATIONS[name]
    original = getattr(T, attr)
    setattr(T, attr, broken)
    try:
        yield
    finally:
        setattr(T, attr, original)
