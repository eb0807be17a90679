import math

import numpy as np
import pytest

from pmfusion import tensor as T
from pmfusion.losses import LossConfig
from pmfusion.network import NetworkConfig, TSNet
from pmfusion.tensor import Tensor
from pmfusion.train import (Adam, SGDNesterov, TrainConfig, apply_overrides, cosine_lr,
                            make_optimizers, parse_config_text, read_config, train, write_config)


@pytest.mark.parametrize("total", [1, 2, 10, 500, 777])
def test_cosine_anchors(total):
    assert cosine_lr(0, total, 1e-3) == 1e-3
    assert abs(cosine_lr(total, total, 1e-3)) < 1e-18
    if total % 2 == 0:
        assert abs(cosine_lr(total // 2, total, 1e-3) - 5e-4) < 1e-18


def test_cosine_errors():
    with pytest.raises(ValueError):
        cosine_lr(0, 0, 1e-3)
    with pytest.raises(ValueError):
        cosine_lr(11, 10, 1e-3)


def param(v):
    return Tensor(np.array(v, dtype=float), requires_grad=True)


def test_sgd_vanilla_reduction():
    p = param([1.0])
    opt = SGDNesterov([("p", p)], lr=0.1, momentum=0.0)
    p.grad = np.array([2.0])
    opt.step()
    assert p.data[0] == pytest.approx(0.8, abs=1e-15)


def test_sgd_zero_gradient_from_init():
    p = param([1.0, -2.0])
    opt = SGDNesterov([("p", p)], lr=0.1)
    p.grad = np.zeros(2)
    opt.step()
    assert np.array_equal(p.data, [1.0, -2.0])
    assert np.array_equal(opt.buffers["p"], [0.0, 0.0])


def test_sgd_two_steps_hand_unrolled():
    p = param([0.5])
    lr, mu, g = 0.1, 0.9, 0.3
    opt = SGDNesterov([("p", p)], lr=lr, momentum=mu)
    for _ in range(2):
        p.grad = np.array([g])
        opt.step()
    v1 = g
    p1 = 0.5 - lr * (g + mu * v1)
    v2 = mu * v1 + g
    p2 = p1 - lr * (g + mu * v2)
    assert abs(p.data[0] - p2) < 1e-12


def test_optimizer_shape_mismatch():
    p = param([1.0, 2.0])
    p.grad = np.zeros(3)
    with pytest.raises(T.ShapeError):
        SGDNesterov([("p", p)]).step()
    with pytest.raises(T.ShapeError):
        Adam([("p", p)]).step()


def test_adam_first_step_is_lr_times_sign():
    p = param([1.0, 1.0, 1.0])
    opt = Adam([("p", p)], lr=1e-3)
    p.grad = np.array([0.5, -3.0, 1e-2])
    opt.step()
    delta = p.data - 1.0
    assert np.allclose(np.abs(delta), 1e-3, rtol=1e-5)
    assert np.array_equal(np.sign(delta), [-1.0, 1.0, -1.0])


def test_adam_zero_gradient_no_change():
    p = param([1.0, 2.0])
    opt = Adam([("p", p)])
    p.grad = np.zeros(2)
    opt.step()
    assert np.array_equal(p.data, [1.0, 2.0])


def test_adam_three_steps_hand_unrolled():
    p = param([0.2])
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
    opt = Adam([("p", p)], lr=lr, betas=(b1, b2), eps=eps)
    grads = [0.5, -0.25, 1.0]
    x, m, v = 0.2, 0.0, 0.0
    for t, g in enumerate(grads, 1):
        p.grad = np.array([g])
        opt.step()
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    assert abs(p.data[0] - x) < 1e-12


def test_adam_skips_missing_gradients():
    p = param([1.0])
    Adam([("p", p)]).step()
    assert p.data[0] == 1.0


def tiny(**kw):
    base = dict(network=NetworkConfig(camera_widths=(4, 6, 8), lidar_widths=(4, 6, 8), aspp_dilations=(1, 2)),
                num_scenes=2, batch_size=2, image_size=(16, 16), num_points=300, steps=10)
    base.update(kw)
    return TrainConfig(**base)


def test_optimizer_separation():
    cfg = tiny()
    net = TSNet(cfg.network)
    opt_c, opt_l = make_optimizers(net, cfg)
    cam = {id(p) for _, p in opt_c.params}
    lid = {id(p) for _, p in opt_l.params}
    assert cam.isdisjoint(lid)
    assert cam == {id(p) for _, p in net.camera_params()}
    assert lid == {id(p) for _, p in net.lidar_params()}


def test_focal_only_lidar_training_decreases():
    cfg = tiny(loss=LossConfig(gamma=0.0, lam=0.0), freeze_camera=True, num_scenes=1, batch_size=1,
               steps=50, lidar_lr=0.01)
    net = TSNet(cfg.network)
    cam_before = {n: p.data.copy() for n, p in net.camera_params()}
    res = train(cfg, net=net)
    focal = res.column("lidar_focal")
    slope = np.polyfit(np.arange(len(focal)), focal, 1)[0]
    assert slope < 0
    assert focal[-1] < focal[0]
    for n, p in net.camera_params():
        assert np.array_equal(p.data, cam_before[n])


def test_training_is_deterministic():
    a = train(tiny())
    b = train(tiny())
    assert a.csv_text() == b.csv_text()
    for (na, pa), (nb, pb) in zip(a.net.named_parameters(), b.net.named_parameters()):
        assert np.array_equal(pa.data, pb.data)


def test_full_config_finite_with_perception():
    cfg = TrainConfig(steps=10)
    assert (cfg.loss.tau, cfg.loss.gamma, cfg.loss.lam) == (0.7, 0.5, 1.0)
    res = train(cfg)
    for row in res.history:
        assert all(math.isfinite(v) for v in row.values())
    assert res.column("lidar_perception").max() > 0
    assert res.history[0]["camera_lr"] == 1e-3
    assert res.history[5]["lidar_lr"] == pytest.approx(cosine_lr(5, 10, 1e-3), abs=0)


def test_no_pl_zero_perception_column():
    res = train(tiny(pl=False))
    assert np.all(res.column("camera_perception") == 0)
    assert np.all(res.column("lidar_perception") == 0)


def test_spherical_projection_trains():
    res = train(tiny(projection="spherical", steps=3))
    assert all(math.isfinite(r["lidar_total"]) for r in res.history)


def test_config_text_parsing():
    cfg = parse_config_text("""
        steps = 42
        seed = 3
        fusion = false
        projection = spherical
        lambda = 0.25   # alias for loss.lam
        loss.tau = 0.6
        network.lidar_widths = 4 6 8
        network.camera_widths = 4, 6, 8
        camera_lr = 0.01
    """)
    assert cfg.steps == 42 and cfg.seed == 3 and cfg.fusion is False
    assert cfg.projection == "spherical"
    assert cfg.loss.lam == 0.25 and cfg.loss.tau == 0.6
    assert cfg.network.lidar_widths == (4, 6, 8) and cfg.network.camera_widths == (4, 6, 8)
    assert cfg.lr_camera == 0.01 and cfg.lr_lidar == 1e-3


@pytest.mark.parametrize("text", ["nonsense = 1", "loss.nope = 2", "fusion = maybe", "steps = x",
                                  "projection = cylindrical", "loss.tau = 1.5"])
def test_config_text_errors(text):
    with pytest.raises(ValueError):
        parse_config_text(text)


def test_config_file_round_trip(tmp_path):
    cfg = apply_overrides(TrainConfig(), {"loss.gamma": 0.1, "pl": "false", "lidar_lr": "0.02"})
    write_config(tmp_path / "c.txt", cfg)
    assert read_config(tmp_path / "c.txt") == cfg
