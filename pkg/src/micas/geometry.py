"""Point-cloud primitives: containers, distances, sampling, and file I/O.

Coordinates are float64 arrays of shape (S, 3) throughout. Whenever a
nearest/farthest query ties, the lowest point index wins, so identical
inputs always produce identical outputs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import FormatError

CLOUD_MAGIC = b"MICASPC1"


@dataclass
class PointCloud:
    """A point set with optional per-point part labels and noise flags.

    Attributes:
        points: (S, 3) float64 coordinates, S >= 1, all finite.
        labels: optional (S,) integer part ids.
        noise_mask: optional (S,) bool, True marks an injected outlier.
    """

    points: np.ndarray
    labels: np.ndarray | None = None
    noise_mask: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise ValueError(f"points must have shape (S, 3) with S >= 1, got {pts.shape}")
        if not np.isfinite(pts).all():
            raise ValueError("points contain non-finite values")
        self.points = pts
        if self.labels is not None:
            lab = np.asarray(self.labels, dtype=np.int64)
            if lab.shape != (len(pts),):
                raise ValueError("labels length must match point count")
            if (lab < 0).any() or (lab > 0xFFFF).any():
                raise ValueError("labels must fit in uint16")
            self.labels = lab
        if self.noise_mask is not None:
            mask = np.asarray(self.noise_mask, dtype=bool)
            if mask.shape != (len(pts),):
                raise ValueError("noise_mask length must match point count")
            self.noise_mask = mask

    @property
    def size(self) -> int:
        return self.points.shape[0]

    def copy(self) -> "PointCloud":
        return PointCloud(
            self.points.copy(),
            None if self.labels is None else self.labels.copy(),
            None if self.noise_mask is None else self.noise_mask.copy(),
        )


@dataclass
class PatchSet:
    """Local neighborhoods grouped around sampled centers.

    Attributes:
        centers: (N, 3) float64 patch anchors.
        patches: (N, M, 3) float64 neighbor coordinates per center.
        source_indices: optional (N, M) indices into the source cloud.
    """

    centers: np.ndarray
    patches: np.ndarray
    source_indices: np.ndarray | None = None

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64)
        self.patches = np.asarray(self.patches, dtype=np.float64)
        if self.centers.ndim != 2 or self.centers.shape[1] != 3:
            raise ValueError("centers must have shape (N, 3)")
        if self.patches.ndim != 3 or self.patches.shape[2] != 3:
            raise ValueError("patches must have shape (N, M, 3)")
        if self.patches.shape[0] != self.centers.shape[0]:
            raise ValueError("patch count must match center count")
        if self.source_indices is not None:
            idx = np.asarray(self.source_indices, dtype=np.int64)
            if idx.shape != self.patches.shape[:2]:
                raise ValueError("source_indices must have shape (N, M)")
            self.source_indices = idx

    @property
    def n_patches(self) -> int:
        return self.centers.shape[0]


def as_points(obj) -> np.ndarray:
    """Return the (n, 3) float64 coordinate array behind a cloud or array."""
    pts = obj.points if isinstance(obj, PointCloud) else np.asarray(obj, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
        raise ValueError(f"expected an (n, 3) point array with n >= 1, got shape {pts.shape}")
    if not np.isfinite(pts).all():
        raise ValueError("point array contains non-finite values")
    return pts


def chamfer_nearest(a, b):
    """Nearest-neighbor squared distances and indices in both directions.

    Returns:
        (d2_ab, idx_ab, d2_ba, idx_ba) where d2_ab[i] is the squared
        distance from a[i] to its nearest point in b and idx_ab[i] is that
        point's index (lowest index on exact ties), and symmetrically for
        the b-to-a direction.
    """
    pa, pb = as_points(a), as_points(b)
    d_ab, idx_ab = cKDTree(pb).query(pa)
    d_ba, idx_ba = cKDTree(pa).query(pb)
    return d_ab**2, idx_ab, d_ba**2, idx_ba


def chamfer_distance(a, b) -> float:
    """Symmetric squared-distance Chamfer divergence between two point sets.

    Averages the squared nearest-neighbor distance from each point of `a`
    into `b`, plus the same from `b` into `a`. Zero iff the two sets are
    equal as sets; invariant to point order; scales quadratically under
    uniform scaling of both inputs.
    """
    d2_ab, _, d2_ba, _ = chamfer_nearest(a, b)
    return float(d2_ab.mean() + d2_ba.mean())


def fps_select(cloud, n: int, seed_index: int = 0) -> np.ndarray:
    """Greedy farthest-point subset of size n, starting at seed_index.

    Each step picks the point maximizing the minimum squared distance to
    the already chosen set; ties go to the lowest index.
    """
    pts = as_points(cloud)
    s = len(pts)
    if not 1 <= n <= s:
        raise ValueError(f"n must be in [1, {s}], got {n}")
    if not 0 <= seed_index < s:
        raise ValueError(f"seed_index must be in [0, {s}), got {seed_index}")
    chosen = np.empty(n, dtype=np.int64)
    chosen[0] = seed_index
    min_d2 = np.sum((pts - pts[seed_index]) ** 2, axis=1)
    for k in range(1, n):
        nxt = int(np.argmax(min_d2))  # argmax returns the first (lowest) maximizer
        chosen[k] = nxt
        np.minimum(min_d2, np.sum((pts - pts[nxt]) ** 2, axis=1), out=min_d2)
    return chosen


def knn_patches(cloud, centers, m: int) -> PatchSet:
    """Gather the m nearest cloud points around each center.

    Neighbors are ordered by increasing distance, lowest index first on
    ties, and may repeat across patches. A center that is itself a cloud
    point contributes itself as its own first neighbor.
    """
    pts = as_points(cloud)
    ctr = as_points(centers)
    if not 1 <= m <= len(pts):
        raise ValueError(f"m must be in [1, {len(pts)}], got {m}")
    d2 = np.sum((ctr[:, None, :] - pts[None, :, :]) ** 2, axis=2)
    order = np.argsort(d2, axis=1, kind="stable")[:, :m]
    return PatchSet(centers=ctr, patches=pts[order], source_indices=order)


def joint_sample_hard(target, indices) -> np.ndarray:
    """Read target-cloud points at the given source indices."""
    pts = as_points(target)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1 or len(idx) < 1:
        raise ValueError("indices must be a non-empty 1-D array")
    if (idx < 0).any() or (idx >= len(pts)).any():
        raise ValueError("index out of range for target cloud")
    return pts[idx].copy()


def joint_sample_soft(target, weights) -> np.ndarray:
    """Project a target cloud through column-stochastic selection weights.

    `weights` has shape (S, N) with each column summing to 1; the result
    row j is the weighted average of target points under column j.
    """
    pts = as_points(target)
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] != len(pts):
        raise ValueError(f"weights must have shape ({len(pts)}, N), got {w.shape}")
    col_sums = w.sum(axis=0)
    if np.abs(col_sums - 1.0).max() > 1e-6:
        raise ValueError("weight columns must each sum to 1 within 1e-6")
    return w.T @ pts


def minmax_normalize(value: float, lo: float, hi: float) -> float:
    """Map value into [0, 1] given bounds, clamping out-of-range inputs."""
    if not hi > lo:
        raise ValueError(f"need hi > lo, got lo={lo}, hi={hi}")
    return float(min(1.0, max(0.0, (value - lo) / (hi - lo))))


def miou(pred_labels, true_labels, num_parts: int) -> float:
    """Mean intersection-over-union across the parts present in true_labels."""
    pred = np.asarray(pred_labels, dtype=np.int64)
    true = np.asarray(true_labels, dtype=np.int64)
    if pred.shape != true.shape or pred.ndim != 1 or len(pred) < 1:
        raise ValueError("label arrays must be equal-length non-empty vectors")
    if num_parts < 1:
        raise ValueError("num_parts must be positive")
    for arr in (pred, true):
        if (arr < 0).any() or (arr >= num_parts).any():
            raise ValueError(f"labels must lie in [0, {num_parts})")
    ious = []
    for part in range(num_parts):
        in_true = true == part
        if not in_true.any():
            continue  # parts absent from the ground truth do not count
        in_pred = pred == part
        union = np.logical_or(in_pred, in_true).sum()
        inter = np.logical_and(in_pred, in_true).sum()
        ious.append(inter / union)
    return float(np.mean(ious))


def rotation_about_axis(axis, angle: float) -> np.ndarray:
    """Rotation matrix for a right-handed turn of `angle` radians about `axis`."""
    ax = np.asarray(axis, dtype=np.float64)
    norm = np.linalg.norm(ax)
    if not norm > 0:
        raise ValueError("rotation axis must be nonzero")
    x, y, z = ax / norm
    c, s = np.cos(angle), np.sin(angle)
    k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + s * k + (1.0 - c) * (k @ k)


def rigid_transform(cloud: PointCloud, rotation, translation) -> PointCloud:
    """Apply p -> R p + t to every point, carrying labels and flags along."""
    rot = np.asarray(rotation, dtype=np.float64)
    t = np.asarray(translation, dtype=np.float64).reshape(3)
    if rot.shape != (3, 3):
        raise ValueError("rotation must be a 3x3 matrix")
    if np.abs(rot @ rot.T - np.eye(3)).max() > 1e-9:
        raise ValueError("rotation must be orthonormal within 1e-9")
    if abs(np.linalg.det(rot) - 1.0) > 1e-9:
        raise ValueError("rotation determinant must be +1")
    moved = cloud.points @ rot.T + t
    return PointCloud(moved, cloud.labels, cloud.noise_mask)


def corrupt(cloud: PointCloud, outlier_fraction: float, sigma: float, rng) -> PointCloud:
    """Replace a fraction of points with unit-cube outliers and jitter the rest.

    round(outlier_fraction * S) points, chosen without replacement, are
    redrawn uniformly in [0, 1]^3 and flagged in the returned noise_mask;
    every other point receives iid Gaussian noise of scale sigma. Point
    order is preserved.
    """
    if not 0.0 <= outlier_fraction <= 1.0:
        raise ValueError("outlier_fraction must be in [0, 1]")
    if sigma < 0.0:
        raise ValueError("sigma must be non-negative")
    s = cloud.size
    n_out = int(np.rint(outlier_fraction * s))
    out_idx = rng.choice(s, size=n_out, replace=False) if n_out > 0 else np.empty(0, np.int64)
    mask = np.zeros(s, dtype=bool)
    mask[out_idx] = True
    pts = cloud.points.copy()
    pts[~mask] += rng.normal(0.0, sigma, size=(int((~mask).sum()), 3)) if sigma > 0 else 0.0
    if n_out > 0:
        pts[mask] = rng.uniform(0.0, 1.0, size=(n_out, 3))
    return PointCloud(pts, cloud.labels, mask)


def bbox(cloud) -> tuple[np.ndarray, np.ndarray]:
    """Axis-aligned (min, max) corners of a point set."""
    pts = as_points(cloud)
    return pts.min(axis=0), pts.max(axis=0)


def cloud_to_bytes(cloud: PointCloud) -> bytes:
    """Encode a cloud in the binary MICASPC1 layout (little-endian)."""
    parts = [
        CLOUD_MAGIC,
        struct.pack("<IBB", cloud.size, cloud.labels is not None, cloud.noise_mask is not None),
        np.ascontiguousarray(cloud.points, dtype="<f8").tobytes(),
    ]
    if cloud.labels is not None:
        parts.append(cloud.labels.astype("<u2").tobytes())
    if cloud.noise_mask is not None:
        parts.append(cloud.noise_mask.astype("u1").tobytes())
    return b"".join(parts)


def save_cloud(cloud: PointCloud, path) -> None:
    with open(path, "wb") as fh:
        fh.write(cloud_to_bytes(cloud))


def cloud_from_buffer(buf: bytes, offset: int = 0) -> tuple[PointCloud, int]:
    """Decode one MICASPC1 record from buf at offset; returns (cloud, next_offset)."""
    if len(buf) - offset < len(CLOUD_MAGIC) + 6:
        raise FormatError("truncated point-cloud record header")
    if buf[offset : offset + 8] != CLOUD_MAGIC:
        raise FormatError("bad point-cloud magic")
    offset += 8
    s, has_labels, has_mask = struct.unpack_from("<IBB", buf, offset)
    offset += 6
    if s < 1:
        raise FormatError("point count must be >= 1")
    if has_labels not in (0, 1) or has_mask not in (0, 1):
        raise FormatError("invalid presence flags")
    need = s * 24 + (s * 2 if has_labels else 0) + (s if has_mask else 0)
    if len(buf) - offset < need:
        raise FormatError("truncated point-cloud record body")
    pts = np.frombuffer(buf, dtype="<f8", count=s * 3, offset=offset).reshape(s, 3).copy()
    offset += s * 24
    labels = None
    if has_labels:
        labels = np.frombuffer(buf, dtype="<u2", count=s, offset=offset).astype(np.int64)
        offset += s * 2
    mask = None
    if has_mask:
        mask = np.frombuffer(buf, dtype="u1", count=s, offset=offset).astype(bool)
        offset += s
    if not np.isfinite(pts).all():
        raise FormatError("point-cloud record contains non-finite coordinates")
    return PointCloud(pts, labels, mask), offset


def load_cloud(path) -> PointCloud:
    """Read one MICASPC1 file; trailing bytes or truncation raise FormatError."""
    with open(path, "rb") as fh:
        buf = fh.read()
    cloud, end = cloud_from_buffer(buf, 0)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} unexpected trailing bytes")
    return cloud


def load_xyz(path) -> PointCloud:
    """Read a plain-text cloud, one "x y z" or "x y z label" row per line.

    Blank lines and lines starting with '#' are skipped. Every data row
    must carry the same column count.
    """
    coords: list[list[float]] = []
    labels: list[int] = []
    width = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split()
            if len(fields) not in (3, 4):
                raise FormatError(f"line {lineno}: expected 3 or 4 columns, got {len(fields)}")
            if width is None:
                width = len(fields)
            elif len(fields) != width:
                raise FormatError(f"line {lineno}: inconsistent column count")
            try:
                coords.append([float(fields[0]), float(fields[1]), float(fields[2])])
                if width == 4:
                    labels.append(int(fields[3]))
            except ValueError as exc:
                raise FormatError(f"line {lineno}: {exc}") from exc
    if not coords:
        raise FormatError("no data rows in XYZ file")
    pts = np.asarray(coords, dtype=np.float64)
    if not np.isfinite(pts).all():
        raise FormatError("XYZ file contains non-finite coordinates")
    return PointCloud(pts, np.asarray(labels, dtype=np.int64) if width == 4 else None)
