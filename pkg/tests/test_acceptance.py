"""Acceptance suite: one check per criterion, each recording a PASS/FAIL line.

The lines are printed at the end of the pytest run (see conftest.py) and
directly when a check runs with ``-s``.
"""
import math
import time

import numpy as np
import pytest

from pmfusion import cli
from pmfusion import evalkit as E
from pmfusion import tensor as T
from pmfusion.dataio import (DataError, read_calibration, read_labels, read_ppm_image, read_velodyne_bin,
                             write_calibration, write_labels, write_ppm, write_velodyne_bin)
from pmfusion.geometry import IGNORE, Calibration, PointCloud, perspective_project_cloud
from pmfusion.gradcheck import run_gradcheck
from pmfusion.losses import entropy_map, focal_loss, importance, lovasz_softmax, perception_loss
from pmfusion.network import NetworkConfig, TSNet
from pmfusion.tensor import Tensor
from pmfusion.train import TrainConfig, apply_overrides, train, valid_pixel_accuracy

RESULTS = []


def record(number, title, passed, detail):
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title} ({detail})"
    RESULTS.append(line)
    print(line)
    assert passed, line


# --------------------------------------------------------------------------
# 1. projection oracle


def brute_force_projection(points, calib):
    H, W = calib.image_size
    M = calib.T @ calib.R
    best = {}
    for i, p in enumerate(points):
        v = [p[0], p[1], p[2], 1.0]
        proj = [sum(M[r][c] * v[c] for c in range(4)) for r in range(3)]
        if proj[2] <= 0:
            continue
        h, w = math.floor(proj[0] / proj[2]), math.floor(proj[1] / proj[2])
        if not (0 <= h < H and 0 <= w < W):
            continue
        d = math.sqrt(p[0] ** 2 + p[1] ** 2 + p[2] ** 2)
        cur = best.get((h, w))
        if cur is None or d < cur[0]:
            best[(h, w)] = (d, i)
    return best


def test_criterion_1_projection_oracle():
    rng = np.random.default_rng(11)
    H, W, f = 32, 32, 20.0
    Tm = np.array([[f, 0, H / 2, 0.0], [0, f, W / 2, 0.0], [0, 0, 1, 0.0]])
    a = 0.05
    R0 = np.array([[1, 0, 0], [0, math.cos(a), -math.sin(a)], [0, math.sin(a), math.cos(a)]])
    calib = Calibration(Tm, R0, (H, W))
    pts = np.column_stack([rng.uniform(-12, 12, 1000), rng.uniform(-12, 12, 1000),
                           rng.uniform(-2, 25, 1000), rng.uniform(0, 1, 1000)])
    labels = rng.integers(0, 4, 1000)
    t0 = time.perf_counter()
    scan = perspective_project_cloud(PointCloud(pts), labels, calib)
    elapsed = time.perf_counter() - t0
    best = brute_force_projection(pts.tolist(), calib)
    expected = np.full((H, W), -1)
    for (h, w), (_, i) in best.items():
        expected[h, w] = i
    same = np.array_equal(scan.pixel_to_point, expected)
    feat_err = 0.0
    for (h, w), (d, i) in best.items():
        ref = np.array([d, *pts[i]])
        feat_err = max(feat_err, float(np.max(np.abs(scan.features[:, h, w] - ref))))
    empty_zero = np.all(scan.features[:, expected < 0] == 0)
    ok = same and feat_err <= 1e-12 and empty_zero and elapsed < 1.0 and len(best) > 100
    record(1, "projection matches brute-force scatter", ok,
           f"{len(best)} pixels, assignments equal={same}, max feature err={feat_err:.1e}, {elapsed:.3f}s")


# --------------------------------------------------------------------------
# 2. loss identities


def confusion_iou_loss(pred, lab, S):
    """mean over present classes of 1 - IoU, by explicit counting."""
    m = lab != IGNORE
    p, t = pred[m], lab[m]
    losses = []
    for c in np.unique(t):
        inter = np.sum((p == c) & (t == c))
        union = np.sum((p == c) | (t == c))
        losses.append(1.0 - inter / union)
    return float(np.mean(losses))


def test_criterion_2_loss_identities():
    rng = np.random.default_rng(22)
    t0 = time.perf_counter()
    worst_ce = 0.0
    for _ in range(100):
        B, S, H, W = 2, 4, 5, 5
        logits = rng.normal(size=(B, S, H, W)) * 2
        P = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        lab = rng.integers(0, S, (B, H, W))
        lab[rng.random(lab.shape) < 0.2] = IGNORE
        per_item = []
        for b in range(B):
            terms = [-math.log(P[b, lab[b, h, w], h, w]) for h in range(H) for w in range(W) if lab[b, h, w] != IGNORE]
            if terms:
                per_item.append(sum(terms) / len(terms))
        ce = sum(per_item) / len(per_item)
        worst_ce = max(worst_ce, abs(focal_loss(Tensor(P), lab, focal_gamma=0.0).item() - ce))

    worst_lov = 0.0
    for _ in range(100):
        S, H, W = 4, 6, 6
        pred = rng.integers(0, S, (H, W))
        lab = rng.integers(0, S, (H, W))
        lab[rng.random(lab.shape) < 0.15] = IGNORE
        onehot = np.eye(S)[pred].transpose(2, 0, 1)[None]
        got = lovasz_softmax(Tensor(onehot), lab[None]).item()
        worst_lov = max(worst_lov, abs(got - confusion_iou_loss(pred, lab, S)))

    uniform = entropy_map(np.full((4, 3, 3), 0.25))
    onehot = entropy_map(np.eye(4)[rng.integers(0, 4, (3, 3))].transpose(2, 0, 1))
    entropy_ok = np.all(uniform == 1.0) and np.all(onehot == 0.0)

    gate = rng.uniform(0, 1, 10_000)
    other = rng.uniform(0, 1, 10_000)
    omega = importance(gate, other, 0.7)
    gate_ok = np.all(omega[gate <= 0.7] == 0.0) and np.any(omega[gate > 0.7] > 0)
    elapsed = time.perf_counter() - t0
    ok = worst_ce <= 1e-12 and worst_lov <= 1e-12 and entropy_ok and gate_ok and elapsed < 10
    record(2, "loss identities", ok,
           f"focal-vs-CE {worst_ce:.1e}, lovasz-vs-IoU {worst_lov:.1e}, entropy exact={entropy_ok}, "
           f"gate zero below tau={gate_ok}, {elapsed:.2f}s")


# --------------------------------------------------------------------------
# 3. gradients


def test_criterion_3_gradient_correctness():
    t0 = time.perf_counter()
    report = run_gradcheck(seed=0)
    elapsed = time.perf_counter() - t0
    by_name = {r.name: r.worst for r in report.results}
    ok = report.worst < 1e-4 and elapsed < 60 and {"tsnet_objective", "tsnet_objective_pl"} <= set(by_name)
    record(3, "finite-difference gradient check", ok,
           f"objective {by_name['tsnet_objective']:.1e}, with perception {by_name['tsnet_objective_pl']:.1e}, "
           f"worst over {len(by_name)} checks {report.worst:.1e}, {elapsed:.1f}s")


# --------------------------------------------------------------------------
# 4. residual identity


def test_criterion_4_residual_identity():
    rng = np.random.default_rng(44)
    net = TSNet(NetworkConfig(), seed=9)
    for m in net.rf:
        m.f.weight.data = np.zeros_like(m.f.weight.data)
        m.f.bias.data = np.zeros_like(m.f.bias.data)
    img = Tensor(rng.uniform(0, 1, (2, 3, 16, 16)))
    lid = Tensor(rng.normal(size=(2, 5, 16, 16)))
    fused = net(img, lid, fusion_enabled=True)
    plain = net(img, lid, fusion_enabled=False)
    ok = np.array_equal(fused.O_lidar.data, plain.O_lidar.data) and all(
        np.array_equal(a.data, b.data) for a, b in zip(fused.fused_features, plain.fused_features))
    record(4, "zeroed fusion convs give the unfused LiDAR stream", ok, "bit-identical outputs" if ok else "outputs differ")


# --------------------------------------------------------------------------
# 5. learning signal


@pytest.mark.slow
def test_criterion_5_ablation_ordering():
    t0 = time.perf_counter()
    acc = {}
    for name, ov in (("full", {}), ("fusion_no_pl", {"pl": False}), ("lidar_only", {"pl": False, "fusion": False})):
        cfg = apply_overrides(TrainConfig(steps=500, num_scenes=8, image_size=(32, 32), seed=0), ov)
        assert cfg.network.num_classes == 4
        res = train(cfg)
        acc[name] = valid_pixel_accuracy(res.net, res.samples, cfg)
    elapsed = time.perf_counter() - t0
    ok = (acc["full"] >= acc["fusion_no_pl"] >= acc["lidar_only"]) and acc["full"] >= 0.95 and elapsed < 300
    record(5, "ablation ordering after 500 steps", ok,
           ", ".join(f"{k} {v:.4f}" for k, v in acc.items()) + f", {elapsed:.0f}s")


# --------------------------------------------------------------------------
# 6. distillation wiring


def test_criterion_6_distillation_wiring():
    rng = np.random.default_rng(66)
    shape = (1, 4, 3, 3)

    def probs(x):
        return T.softmax_channel(x)

    student_logits = Tensor(rng.normal(size=shape), requires_grad=True)
    teacher_logits = Tensor(rng.normal(size=shape), requires_grad=True)
    omega = np.ones((1, 3, 3))
    loss = perception_loss(probs(student_logits), probs(teacher_logits), omega)
    T.backward(loss)
    teacher_grad = teacher_logits.grad
    detached = teacher_grad is None or np.all(teacher_grad == 0)
    student_moves = student_logits.grad is not None and np.any(student_logits.grad != 0)

    same = probs(Tensor(rng.normal(size=shape)))
    agree = perception_loss(same, same, omega).item()

    a = np.zeros(shape)
    a[:, 0] = 5.0
    b = np.zeros(shape)
    b[:, 1] = 5.0
    disagree = perception_loss(probs(Tensor(a)), probs(Tensor(b)), omega).item()
    ok = detached and student_moves and agree == 0.0 and disagree > 0
    record(6, "distillation wiring", ok,
           f"teacher grad zero={detached}, agree loss={agree}, disagreement loss={disagree:.4f}")


# --------------------------------------------------------------------------
# 7. format round-trips


def test_criterion_7_format_round_trips(tmp_path):
    rng = np.random.default_rng(77)
    pts = rng.normal(size=(257, 4)).astype(np.float32).astype(np.float64)
    write_velodyne_bin(tmp_path / "a.bin", PointCloud(pts))
    velo_ok = np.array_equal(read_velodyne_bin(tmp_path / "a.bin").points, pts)

    labels = rng.integers(0, 1 << 16, 257)
    write_labels(tmp_path / "a.label", labels)
    label_ok = np.array_equal(read_labels(tmp_path / "a.label"), labels)

    calib = Calibration(rng.normal(size=(3, 4)), rng.normal(size=(3, 3)), (24, 40))
    write_calibration(tmp_path / "a.txt", calib)
    back = read_calibration(tmp_path / "a.txt")
    calib_ok = np.array_equal(back.T, calib.T) and np.array_equal(back.R0, calib.R0) and back.image_size == (24, 40)

    img = rng.integers(0, 256, (3, 5, 7)) / 255.0
    write_ppm(tmp_path / "a.ppm", img)
    ppm_ok = np.array_equal(read_ppm_image(tmp_path / "a.ppm"), img)

    malformed = {
        "short.bin": (read_velodyne_bin, b"\x00" * 15),
        "short.label": (read_labels, b"\x00" * 6),
        "calib.txt": (read_calibration, b"T: 1 2 3\nR0: 1 0 0 0 1 0 0 0 1\n"),
        "calib2.txt": (read_calibration, b"T: 1 2 3 4 5 6 7 8 9 10 11 x\nR0: 1 0 0 0 1 0 0 0 1\n"),
        "magic.ppm": (read_ppm_image, b"P5\n2 2\n255\n" + b"\x00" * 4),
        "trunc.ppm": (read_ppm_image, b"P6\n2 2\n255\n" + b"\x00" * 5),
        "maxval.ppm": (read_ppm_image, b"P6\n1 1\n65535\n" + b"\x00" * 6),
    }
    typed = 0
    for name, (reader, data) in malformed.items():
        (tmp_path / name).write_bytes(data)
        try:
            reader(tmp_path / name)
        except DataError:
            typed += 1
    try:
        read_velodyne_bin(tmp_path / "missing.bin")
    except DataError:
        typed += 1
    ok = velo_ok and label_ok and calib_ok and ppm_ok and typed == len(malformed) + 1
    record(7, "format round-trips and typed errors", ok,
           f"velodyne={velo_ok}, labels={label_ok}, calib={calib_ok}, ppm={ppm_ok}, "
           f"typed errors {typed}/{len(malformed) + 1}")


# --------------------------------------------------------------------------
# 8. evaluation oracle


def test_criterion_8_evaluation_oracle():
    rng = np.random.default_rng(88)
    S, n = 19, 10_000
    pred = rng.integers(0, S, n)
    truth = rng.integers(0, S, n)
    truth[rng.random(n) < 0.05] = IGNORE
    report = E.iou_report(E.confusion_from(pred, truth, S))
    keep = [i for i in range(n) if truth[i] != IGNORE]
    ious = []
    for c in range(S):
        P = {i for i in keep if pred[i] == c}
        G = {i for i in keep if truth[i] == c}
        if P | G:
            ious.append(len(P & G) / len(P | G))
    miou_err = abs(report.miou - sum(ious) / len(ious))
    ranges = rng.uniform(0, 90, n)
    bins = E.distance_binned_miou(pred, truth, ranges, S)
    partition = bins.total() == E.confusion_from(pred, truth, S)
    ok = miou_err <= 1e-12 and partition
    record(8, "mIoU matches set oracle, bins partition", ok, f"mIoU err {miou_err:.1e}, partition={partition}")


# --------------------------------------------------------------------------
# 9. determinism


def test_criterion_9_determinism(tmp_path):
    args = ["train", "--synthetic", "--steps", "10", "--seed", "3"]
    codes = [cli.main(args + ["--out", str(tmp_path / d)]) for d in ("a", "b")]
    same_csv = (tmp_path / "a" / "loss.csv").read_bytes() == (tmp_path / "b" / "loss.csv").read_bytes()
    same_ckpt = (tmp_path / "a" / "model.pmfckpt").read_bytes() == (tmp_path / "b" / "model.pmfckpt").read_bytes()
    ok = codes == [0, 0] and same_csv and same_ckpt
    record(9, "training twice with one seed is byte-identical", ok, f"csv equal={same_csv}, checkpoint equal={same_ckpt}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q", "-s"]))
