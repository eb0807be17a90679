"""Perception-aware loss stack for the two streams.

All probability inputs are ``[B, S, H, W]`` tensors (``[S, H, W]`` is
accepted and treated as a batch of one); label images are ``[B, H, W]``
integer arrays with ``IGNORE`` marking unsupervised pixels. Batch losses are
the mean of per-item losses.

Confidence and importance maps are computed from detached probabilities and
act as constant weights. Teachers in the KL terms are detached.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .geometry import IGNORE
from .tensor import Tensor


@dataclass
class LossConfig:
    tau: float = 0.7
    lam: float = 1.0
    gamma: float = 0.5
    focal_gamma: float = 2.0
    epsilon: float = 1e-8
    # drop IGNORE pixels from the perception terms as well
    perception_mask_ignored: bool = False

    def __post_init__(self):
        if not 0.0 <= self.tau < 1.0:
            raise ValueError("tau must lie in [0, 1)")
        if self.lam < 0 or self.gamma < 0 or self.focal_gamma < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0.0 < self.epsilon <= 1e-3:
            raise ValueError("epsilon must lie in (0, 1e-3]")


def _probs4(x):
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.data.ndim == 3:
        return T.reshape(x, (1,) + x.shape)
    if x.data.ndim != 4:
        raise T.ShapeError(f"expected [B,S,H,W] probabilities, got {x.shape}")
    return x


def _labels3(labels, probs):
    lab = np.asarray(labels, dtype=np.int64)
    if lab.ndim == 2:
        lab = lab[None]
    B, S, H, W = probs.shape
    if lab.shape != (B, H, W):
        raise T.ShapeError(f"labels {lab.shape} do not match probabilities {probs.shape}")
    bad = (lab != IGNORE) & ((lab < 0) | (lab >= S))
    if bad.any():
        raise ValueError(f"label ids outside 0..{S - 1}")
    return lab


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


# --------------------------------------------------------------------------
# confidence maps


def entropy_map(probs):
    """Normalised entropy ``-(1/log S) sum_s p log p`` over the channel axis.

    Takes ``[S,H,W]`` or ``[B,S,H,W]``; returns ``[H,W]`` or ``[B,H,W]``.
    """
    p = _data(probs)
    S = p.shape[-3]
    if S < 2:
        raise ValueError("entropy needs at least two classes")
    if np.any(p < 0) or np.max(np.abs(p.sum(axis=-3) - 1.0)) > 1e-6:
        raise ValueError("input is not a per-pixel probability distribution")
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return np.clip(-plogp.sum(axis=-3) / math.log(S), 0.0, 1.0)


def confidence_map(probs):
    return 1.0 - entropy_map(probs)


def importance(gate_conf, other_conf, tau):
    """``max(gate - other, 0)`` where ``gate > tau``, else 0."""
    g = np.asarray(gate_conf, dtype=np.float64)
    o = np.asarray(other_conf, dtype=np.float64)
    if g.shape != o.shape:
        raise ValueError(f"confidence maps differ in shape: {g.shape} vs {o.shape}")
    return np.where(g > tau, np.maximum(g - o, 0.0), 0.0)


def importance_lidar(conf_lidar, conf_camera, tau):
    return importance(conf_lidar, conf_camera, tau)


def importance_camera(conf_camera, conf_lidar, tau):
    return importance(conf_camera, conf_lidar, tau)


# --------------------------------------------------------------------------
# KL / perception


def kl_map(P, Q, epsilon=1e-8):
    """Pixelwise ``sum_s P_s log(P_s / Q_s)`` with clamped log arguments."""
    P, Q = _probs4(P), _probs4(Q)
    if P.shape != Q.shape:
        raise T.ShapeError(f"kl_map: {P.shape} vs {Q.shape}")
    logratio = T.sub(T.log_clamped(P, epsilon), T.log_clamped(Q, epsilon))
    return T.sum_channel(T.mul(P, logratio))


def perception_loss(student, teacher, weights, epsilon=1e-8):
    """``mean_b (1/(H W)) sum_hw weights * KL(student || teacher)``.

    The teacher is detached; ``weights`` is a constant ``[B,H,W]`` map.
    """
    student = _probs4(student)
    teacher = T.detach(_probs4(teacher))
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim == 2:
        w = w[None]
    B, _, H, W = student.shape
    if w.shape != (B, H, W):
        raise T.ShapeError(f"weights {w.shape} do not match {student.shape}")
    kl = kl_map(student, teacher, epsilon)
    return T.affine(T.sum_all(T.mul(kl, Tensor(w))), 1.0 / (B * H * W))


# --------------------------------------------------------------------------
# supervised terms


def _flat_index(lab, S, H, W):
    b, h, w = np.nonzero(lab != IGNORE)
    return b, (b * S + lab[b, h, w]) * (H * W) + h * W + w


def focal_loss(probs, labels, focal_gamma=2.0, epsilon=1e-8):
    """Mean over supervised pixels of ``-(1 - p_t)^gamma log p_t`` (per item).

    Returns an exact zero constant when every pixel is ignored.
    """
    probs = _probs4(probs)
    lab = _labels3(labels, probs)
    B, S, H, W = probs.shape
    b, idx = _flat_index(lab, S, H, W)
    if idx.size == 0:
        return Tensor(0.0)
    counts = np.bincount(b, minlength=B)
    items = np.count_nonzero(counts)
    weights = 1.0 / (counts[b] * items)
    pt = T.take(probs, idx)
    modulator = T.pow_const(T.affine(pt, -1.0, 1.0), focal_gamma)
    per_pixel = T.mul(modulator, T.log_clamped(pt, epsilon))
    return T.affine(T.sum_all(T.mul(per_pixel, Tensor(weights))), -1.0)


def lovasz_grad(gt_sorted):
    """Gradient of the Lovasz extension of the Jaccard loss at a sorted order."""
    gt = np.asarray(gt_sorted, dtype=np.float64)
    total = gt.sum()
    inter = total - np.cumsum(gt)
    union = total + np.cumsum(1.0 - gt)
    jac = 1.0 - inter / union
    if gt.size > 1:
        jac[1:] = jac[1:] - jac[:-1]
    return jac


def lovasz_softmax(probs, labels):
    """Lovasz-softmax over classes present in each item, averaged per item."""
    probs = _probs4(probs)
    lab = _labels3(labels, probs)
    B, S, H, W = probs.shape
    P = probs.data
    index, coef = [], []
    const = 0.0
    items = [bi for bi in range(B) if np.any(lab[bi] != IGNORE)]
    if not items:
        return Tensor(0.0)
    for bi in items:
        valid = np.flatnonzero(lab[bi].ravel() != IGNORE)
        lab_v = lab[bi].ravel()[valid]
        present = np.unique(lab_v)
        scale = 1.0 / (len(present) * len(items))
        for c in present:
            fg = (lab_v == c).astype(np.float64)
            flat = (bi * S + c) * (H * W) + valid
            err = np.abs(fg - P.reshape(-1)[flat])
            order = np.argsort(-err, kind="stable")
            g = lovasz_grad(fg[order])
            # err_i = p_i * (1 - 2 fg_i) + fg_i
            index.append(flat[order])
            coef.append(scale * g * (1.0 - 2.0 * fg[order]))
            const += scale * float(np.dot(fg[order], g))
    idx = np.concatenate(index)
    picked = T.take(probs, idx)
    return T.affine(T.sum_all(T.mul(picked, Tensor(np.concatenate(coef)))), 1.0, const)


# --------------------------------------------------------------------------
# objectives


@dataclass
class LossBreakdown:
    focal: Tensor
    lovasz: Tensor
    perception: Tensor
    total: Tensor
    empty: bool = False

    def values(self):
        return {k: getattr(self, k).item() for k in ("focal", "lovasz", "perception", "total")}


def stream_objective(focal, lovasz, perception, cfg, empty=False):
    """``focal + lam * lovasz + gamma * perception``."""
    focal, lovasz, perception = (x if isinstance(x, Tensor) else Tensor(x) for x in (focal, lovasz, perception))
    total = T.add(T.add(focal, T.affine(lovasz, cfg.lam)), T.affine(perception, cfg.gamma))
    return LossBreakdown(focal, lovasz, perception, total, empty)


@dataclass
class PerceptionMaps:
    confidence_camera: np.ndarray
    confidence_lidar: np.ndarray
    importance_camera: np.ndarray
    importance_lidar: np.ndarray


def pmf_losses(O_camera, O_lidar, labels, cfg, pl_enabled=True, frozen=None, lidar_labels=None):
    """Both stream objectives from one forward pass.

    ``labels`` supervise the camera stream and, unless ``lidar_labels`` is
    given, the LiDAR stream too (they differ only for range-image inputs).

    ``frozen`` optionally supplies ``(teacher_camera, teacher_lidar,
    importance_camera, importance_lidar)`` arrays to use instead of values
    derived from the current outputs; gradient checks use it to hold the
    stop-gradient quantities fixed.

    Returns ``(camera LossBreakdown, lidar LossBreakdown, PerceptionMaps)``.
    """
    O_camera, O_lidar = _probs4(O_camera), _probs4(O_lidar)
    lab = _labels3(labels, O_camera)
    lab_l = lab if lidar_labels is None else _labels3(lidar_labels, O_lidar)

    conf_c = confidence_map(O_camera.data)
    conf_l = confidence_map(O_lidar.data)
    if frozen is None:
        teach_c, teach_l = O_camera, O_lidar
        omega_c = importance_camera(conf_c, conf_l, cfg.tau)
        omega_l = importance_lidar(conf_l, conf_c, cfg.tau)
    else:
        teach_c, teach_l, omega_c, omega_l = frozen
        teach_c, teach_l = Tensor(_data(teach_c)), Tensor(_data(teach_l))
    if cfg.perception_mask_ignored:
        omega_c = np.where(lab != IGNORE, omega_c, 0.0)
        omega_l = np.where(lab_l != IGNORE, omega_l, 0.0)
    maps = PerceptionMaps(conf_c, conf_l, omega_c, omega_l)

    out = []
    for student, teacher, omega, y in ((O_camera, teach_l, omega_c, lab), (O_lidar, teach_c, omega_l, lab_l)):
        empty = not np.any(y != IGNORE)
        foc = focal_loss(student, y, cfg.focal_gamma, cfg.epsilon)
        lov = lovasz_softmax(student, y)
        if pl_enabled:
            per = perception_loss(student, teacher, omega, cfg.epsilon)
        else:
            per = Tensor(0.0)
        out.append(stream_objective(foc, lov, per, cfg, empty))
    return out[0], out[1], maps
