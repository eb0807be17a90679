"""Readers/writers for KITTI-style files and a synthetic scene generator.

Formats:

* velodyne ``.bin``: little-endian float32 records ``(x, y, z, r)``, 16 bytes each
* ``.label``: little-endian uint32 records, semantic class in the low 16 bits
* calibration ``.txt``: ``KEY: v1 v2 ...`` lines; ``T`` (or ``P``) holds the
  3x4 projection, ``R0`` (or ``R0_rect``) the 3x3 rectifying rotation and the
  optional ``IMAGE_SIZE`` the pair ``H W``
* images: binary PPM ``P6`` with maxval 255

A dataset directory holds ``velodyne/``, ``labels/``, ``calib/`` and
``image_2/`` with one file per scan id in each.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import IGNORE, Calibration, PointCloud


class DataError(Exception):
    """Unreadable or malformed input data."""


class FormatError(DataError):
    pass


def _read_bytes(path):
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


# --------------------------------------------------------------------------
# velodyne scans


def read_velodyne_bin(path):
    raw = _read_bytes(path)
    if len(raw) % 16:
        raise FormatError(f"{path}: length {len(raw)} is not a multiple of 16")
    pts = np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float64)
    try:
        return PointCloud(pts)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def write_velodyne_bin(path, cloud):
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud)
    Path(path).write_bytes(np.asarray(pts, dtype="<f4").reshape(-1, 4).tobytes())


# --------------------------------------------------------------------------
# labels


def read_labels(path):
    raw = _read_bytes(path)
    if len(raw) % 4:
        raise FormatError(f"{path}: length {len(raw)} is not a multiple of 4")
    return (np.frombuffer(raw, dtype="<u4") & 0xFFFF).astype(np.int64)


def write_labels(path, labels, instances=None):
    sem = np.asarray(labels, dtype=np.uint32) & 0xFFFF
    if instances is not None:
        sem = sem | (np.asarray(instances, dtype=np.uint32) << 16)
    Path(path).write_bytes(sem.astype("<u4").tobytes())


@dataclass
class LabelMap:
    raw_to_train: dict
    class_names: list

    def __post_init__(self):
        ids = sorted({v for v in self.raw_to_train.values() if v != IGNORE})
        if ids != list(range(len(self.class_names))):
            raise ValueError("train ids must be contiguous 0..S-1 and match class_names")
        lut = np.full(1 << 16, IGNORE, dtype=np.int64)
        for raw, train in self.raw_to_train.items():
            lut[int(raw)] = train
        self._lut = lut

    @property
    def num_classes(self):
        return len(self.class_names)

    def __call__(self, raw_ids):
        return self._lut[np.asarray(raw_ids, dtype=np.int64) & 0xFFFF]

    @classmethod
    def identity(cls, num_classes):
        return cls({i: i for i in range(num_classes)}, [f"class{i}" for i in range(num_classes)])

    @classmethod
    def semantickitti(cls):
        names = ["car", "bicycle", "motorcycle", "truck", "other-vehicle", "person",
                 "bicyclist", "motorcyclist", "road", "parking", "sidewalk",
                 "other-ground", "building", "fence", "vegetation", "trunk",
                 "terrain", "pole", "traffic-sign"]
        # raw id -> 1-based learning id; 0 means unlabeled
        learning = {0: 0, 1: 0, 10: 1, 11: 2, 13: 5, 15: 3, 16: 5, 18: 4, 20: 5,
                    30: 6, 31: 7, 32: 8, 40: 9, 44: 10, 48: 11, 49: 12, 50: 13,
                    51: 14, 52: 0, 60: 9, 70: 15, 71: 16, 72: 17, 80: 18, 81: 19,
                    99: 0, 252: 1, 253: 7, 254: 6, 255: 8, 256: 5, 257: 5, 258: 4,
                    259: 5}
        return cls({k: (v - 1 if v else IGNORE) for k, v in learning.items()}, names)


# --------------------------------------------------------------------------
# calibration


_CALIB_KEYS = {"T": ("T", "P"), "R0": ("R0", "R0_rect")}


def read_calibration(path):
    text = _read_bytes(path).decode("ascii", errors="replace")
    entries = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        if ":" not in line:
            raise FormatError(f"{path}:{lineno}: expected 'KEY: values'")
        key, _, rest = line.partition(":")
        try:
            entries[key.strip()] = [float(v) for v in rest.split()]
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from exc

    def pick(name, count):
        for alias in _CALIB_KEYS[name]:
            if alias in entries:
                vals = entries[alias]
                if len(vals) != count:
                    raise FormatError(f"{path}: {alias} has {len(vals)} values, expected {count}")
                return np.array(vals)
        raise FormatError(f"{path}: missing key {name}")

    T = pick("T", 12).reshape(3, 4)
    R0 = pick("R0", 9).reshape(3, 3)
    size = None
    if "IMAGE_SIZE" in entries:
        vals = entries["IMAGE_SIZE"]
        if len(vals) != 2 or min(vals) < 1:
            raise FormatError(f"{path}: IMAGE_SIZE must be two positive integers")
        size = (int(vals[0]), int(vals[1]))
    return Calibration(T, R0, size)


def write_calibration(path, calib):
    lines = [
        "T: " + " ".join(repr(float(v)) for v in calib.T.ravel()),
        "R0: " + " ".join(repr(float(v)) for v in calib.R0.ravel()),
    ]
    if calib.image_size is not None:
        lines.append(f"IMAGE_SIZE: {calib.image_size[0]} {calib.image_size[1]}")
    Path(path).write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# PPM images


def _ppm_header(raw, path):
    tokens = []
    pos = 0
    n = len(raw)
    while len(tokens) < 4:
        while pos < n and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < n and raw[pos:pos + 1] == b"#":
            while pos < n and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not raw[pos:pos + 1].isspace() and raw[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PPM header")
        tokens.append(raw[start:pos])
    # exactly one whitespace byte separates header and raster
    return tokens, pos + 1


def read_ppm_image(path):
    """Binary P6 image as a float64 ``[3, H, W]`` array scaled to [0, 1]."""
    raw = _read_bytes(path)
    if raw[:2] != b"P6":
        raise FormatError(f"{path}: not a binary PPM (P6)")
    tokens, start = _ppm_header(raw, path)
    try:
        W, H, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"{path}: bad PPM header") from exc
    if maxval != 255:
        raise FormatError(f"{path}: maxval {maxval} unsupported (need 255)")
    payload = raw[start:start + 3 * H * W]
    if len(payload) != 3 * H * W:
        raise FormatError(f"{path}: truncated PPM payload")
    img = np.frombuffer(payload, dtype=np.uint8).reshape(H, W, 3)
    return img.transpose(2, 0, 1).astype(np.float64) / 255.0


def to_bytes_image(img):
    """[0, 1] floats (``[3,H,W]`` or ``[H,W]``) to ``uint8`` ``[H, W, 3]``."""
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 2:
        a = np.stack([a, a, a])
    return np.round(np.clip(a, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def write_ppm(path, img):
    """Write ``[3,H,W]`` (or grayscale ``[H,W]``) values in [0, 1] as P6."""
    pix = img if (isinstance(img, np.ndarray) and img.dtype == np.uint8) else to_bytes_image(img)
    H, W = pix.shape[:2]
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (W, H) + np.ascontiguousarray(pix).tobytes())


# --------------------------------------------------------------------------
# scan records


@dataclass
class ScanRecord:
    cloud: PointCloud
    labels: np.ndarray
    image: np.ndarray  # [3, H, W] in [0, 1]
    calib: Calibration
    scan_id: str = ""

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.shape != (len(self.cloud),):
            raise ValueError("labels length must equal cloud size")


def list_scans(root):
    vdir = Path(root) / "velodyne"
    if not vdir.is_dir():
        raise DataError(f"{root}: no velodyne/ directory")
    return sorted(p.stem for p in vdir.glob("*.bin"))


def load_scan(root, scan_id, label_map):
    root = Path(root)
    cloud = read_velodyne_bin(root / "velodyne" / f"{scan_id}.bin")
    labels = label_map(read_labels(root / "labels" / f"{scan_id}.label"))
    image = read_ppm_image(root / "image_2" / f"{scan_id}.ppm")
    calib = read_calibration(root / "calib" / f"{scan_id}.txt")
    if calib.image_size is None:
        calib.image_size = image.shape[1:]
    if len(labels) != len(cloud):
        raise FormatError(f"{scan_id}: {len(labels)} labels for {len(cloud)} points")
    return ScanRecord(cloud, labels, image, calib, scan_id)


def num_threads():
    try:
        return max(1, int(os.environ.get("PMF_NUM_THREADS", "1")))
    except ValueError:
        return 1


def load_dataset(root, label_map, scan_ids=None):
    """Load every scan under ``root`` in sorted id order."""
    ids = list_scans(root) if scan_ids is None else list(scan_ids)
    with ThreadPoolExecutor(max_workers=num_threads()) as pool:
        return list(pool.map(lambda s: load_scan(root, s, label_map), ids))


def write_scan(root, record):
    root = Path(root)
    for sub in ("velodyne", "labels", "calib", "image_2"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    sid = record.scan_id
    write_velodyne_bin(root / "velodyne" / f"{sid}.bin", record.cloud)
    write_labels(root / "labels" / f"{sid}.label", record.labels)
    write_calibration(root / "calib" / f"{sid}.txt", record.calib)
    write_ppm(root / "image_2" / f"{sid}.ppm", record.image)


# --------------------------------------------------------------------------
# synthetic scenes


def class_palette(num_classes):
    """Distinct, fixed RGB colours per class (evenly spaced hues)."""
    hues = np.arange(num_classes) / num_classes
    k = (np.array([5.0, 3.0, 1.0])[None, :] + hues[:, None] * 6.0) % 6.0
    rgb = 1.0 - np.clip(np.minimum(k, 4.0 - k), 0.0, 1.0)
    return 0.15 + 0.7 * rgb


@dataclass
class SynthParams:
    blobs_per_class: int = 2
    reflectance_noise: float = 0.25
    color_noise: float = 0.06
    focal: float | None = None


def synthetic_calibration(rng, image_size, focal=None):
    """Camera looking along LiDAR +x; image rows follow -z, columns -y."""
    H, W = image_size
    f = float(focal if focal is not None else max(H, W))
    K = np.array([[f, 0.0, H / 2.0], [0.0, f, W / 2.0], [0.0, 0.0, 1.0]])
    ext = np.array([[0.0, 0.0, -1.0, -0.08], [0.0, -1.0, 0.0, 0.06], [1.0, 0.0, 0.0, -0.27]])
    a = rng.uniform(-0.02, 0.02)
    R0 = np.array([[np.cos(a), -np.sin(a), 0.0], [np.sin(a), np.cos(a), 0.0], [0.0, 0.0, 1.0]])
    return Calibration(K @ ext, R0, (H, W))


def synth_label_layout(rng, image_size, num_classes, blobs_per_class=2):
    """Background class 0 with elliptical blobs of classes 1..S-1.

    Returns the dense label map and per-pixel blob id (-1 for background).
    """
    H, W = image_size
    labels = np.zeros((H, W), dtype=np.int64)
    blob_id = np.full((H, W), -1, dtype=np.int64)
    rr, cc = np.mgrid[0:H, 0:W] + 0.5
    classes = np.repeat(np.arange(1, num_classes), blobs_per_class)
    rng.shuffle(classes)
    for k, c in enumerate(classes):
        rh = rng.uniform(0.12, 0.22) * H
        rw = rng.uniform(0.12, 0.22) * W
        ch = rng.uniform(rh, H - rh)
        cw = rng.uniform(rw, W - rw)
        inside = ((rr - ch) / rh) ** 2 + ((cc - cw) / rw) ** 2 <= 1.0
        labels[inside] = c
        blob_id[inside] = k
    return labels, blob_id


def synth_scene_generate(seed, num_points=1000, image_size=(32, 32), num_classes=4,
                         params=None):
    """Deterministic synthetic scan whose image appearance agrees with labels.

    Every class gets its own colour in the image, so the camera is
    informative; reflectance is class dependent but noisy, and depth only
    separates objects from the background.
    """
    if num_classes < 2:
        raise ValueError("num_classes must be at least 2")
    params = params or SynthParams()
    rng = np.random.default_rng(seed)
    H, W = image_size
    calib = synthetic_calibration(rng, image_size, params.focal)
    dense, blob_id = synth_label_layout(rng, image_size, num_classes, params.blobs_per_class)

    palette = class_palette(num_classes)
    gain = rng.uniform(0.85, 1.15)
    image = palette[dense].transpose(2, 0, 1) * gain
    image = image + rng.normal(0.0, params.color_noise, size=image.shape)
    image = np.clip(image, 0.0, 1.0)

    # continuous pixel coordinates strictly inside their pixel
    pix = rng.integers(0, H * W, size=num_points)
    ph = pix // W + rng.uniform(0.05, 0.95, num_points)
    pw = pix % W + rng.uniform(0.05, 0.95, num_points)
    rows, cols = pix // W, pix % W
    lab = dense[rows, cols]

    nblobs = int(blob_id.max()) + 1
    blob_depth = rng.uniform(6.0, 16.0, size=max(nblobs, 1))
    bg_depth = 35.0 - 20.0 * (ph / H)
    b = blob_id[rows, cols]
    depth = np.where(b >= 0, blob_depth[np.maximum(b, 0)], bg_depth)
    depth = depth + rng.normal(0.0, 0.05, num_points)

    means = np.linspace(0.2, 0.8, num_classes)
    refl = np.clip(means[lab] + rng.normal(0.0, params.reflectance_noise, num_points), 0.0, 1.0)

    # back-project (h*z, w*z, z) through T R
    M = calib.matrix
    target = np.stack([ph * depth, pw * depth, depth])
    xyz = np.linalg.solve(M[:, :3], target - M[:, 3:4]).T
    cloud = PointCloud(np.column_stack([xyz, refl]))
    return ScanRecord(cloud, lab, image, calib, f"synth_{seed:06d}")
