"""Frame/world coordinate calibration and bounding-box arithmetic.

The camera is calibrated once per position with four frame/world point
correspondences, giving a planar projective transform (homography) between
frame pixels and ground-plane meters.  Everything downstream (GPS-object
distances, box metrics) builds on the primitives here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class DegenerateCorrespondence(Exception):
    """The four calibration correspondences do not define a homography."""


class PointAtInfinity(Exception):
    """A projected point has (near-)zero homogeneous scale."""


@dataclass(frozen=True)
class FramePoint:
    x: float
    y: float


@dataclass(frozen=True)
class WorldPoint:
    x: float
    y: float


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box stored as center + extent, in pixels."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError("box extent must be positive, got w=%r h=%r" % (self.w, self.h))
        if not all(math.isfinite(v) for v in (self.cx, self.cy, self.w, self.h)):
            raise ValueError("box fields must be finite")

    def corners(self):
        """(x1, y1, x2, y2) corner form."""
        return (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )

    def bottom_center(self) -> FramePoint:
        return FramePoint(self.cx, self.cy + self.h / 2.0)


@dataclass(frozen=True)
class Homography:
    """Projective transform, frame pixels -> world meters (and inverse).

    Both matrices are normalized so m[2][2] == 1 whenever that entry is
    nonzero; m @ m_inv is identity to ~1e-9 per entry.
    """

    m: np.ndarray
    m_inv: np.ndarray

    @staticmethod
    def identity() -> "Homography":
        return Homography(np.eye(3), np.eye(3))

    @staticmethod
    def from_matrix(m) -> "Homography":
        m = _normalize(np.asarray(m, dtype=float))
        try:
            m_inv = _normalize(np.linalg.inv(m))
        except np.linalg.LinAlgError as exc:
            raise DegenerateCorrespondence("homography matrix is singular") from exc
        return Homography(m, m_inv)


def _normalize(m: np.ndarray) -> np.ndarray:
    if abs(m[2, 2]) > 1e-12:
        return m / m[2, 2]
    return m


def _solve_8x8(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Gaussian elimination with partial pivoting; a pivot below 1e-12 means
    # the correspondences are degenerate (3 collinear points etc).
    a = a.astype(float).copy()
    b = b.astype(float).copy()
    n = a.shape[0]
    for col in range(n):
        piv = col + int(np.argmax(np.abs(a[col:, col])))
        if abs(a[piv, col]) < 1e-12:
            raise DegenerateCorrespondence("singular calibration system (pivot < 1e-12)")
        if piv != col:
            a[[col, piv]] = a[[piv, col]]
            b[[col, piv]] = b[[piv, col]]
        factors = a[col + 1:, col] / a[col, col]
        a[col + 1:] -= factors[:, None] * a[col]
        b[col + 1:] -= factors * b[col]
    x = np.zeros(n)
    for row in range(n - 1, -1, -1):
        x[row] = (b[row] - a[row, row + 1:] @ x[row + 1:]) / a[row, row]
    return x


def fit_homography(pairs):
    """Fit the frame->world homography from exactly 4 point correspondences.

    Args:
        pairs: iterable of (FramePoint, WorldPoint) or ((fx, fy), (wx, wy)),
            length 4, no 3 frame or world points collinear.

    Returns:
        Homography mapping each frame point onto its world point (within 1e-6).

    Raises:
        DegenerateCorrespondence: the 8x8 calibration system is singular.
    """
    pairs = list(pairs)
    if len(pairs) != 4:
        raise ValueError("exactly 4 correspondences required, got %d" % len(pairs))
    a = np.zeros((8, 8))
    b = np.zeros(8)
    for i, (fp, wp) in enumerate(pairs):
        fx, fy = (fp.x, fp.y) if isinstance(fp, FramePoint) else (fp[0], fp[1])
        wx, wy = (wp.x, wp.y) if isinstance(wp, WorldPoint) else (wp[0], wp[1])
        a[2 * i] = [fx, fy, 1.0, 0.0, 0.0, 0.0, -fx * wx, -fy * wx]
        a[2 * i + 1] = [0.0, 0.0, 0.0, fx, fy, 1.0, -fx * wy, -fy * wy]
        b[2 * i] = wx
        b[2 * i + 1] = wy
    h = _solve_8x8(a, b)
    m = np.array([[h[0], h[1], h[2]], [h[3], h[4], h[5]], [h[6], h[7], 1.0]])
    return Homography.from_matrix(m)


def _apply(m: np.ndarray, x: float, y: float):
    v = m @ (x, y, 1.0)
    if abs(v[2]) < 1e-12:
        raise PointAtInfinity("homogeneous scale ~0 for point (%g, %g)" % (x, y))
    return v[0] / v[2], v[1] / v[2]


def frame_to_world(h: Homography, p: FramePoint) -> WorldPoint:
    return WorldPoint(*_apply(h.m, p.x, p.y))


def world_to_frame(h: Homography, p: WorldPoint) -> FramePoint:
    return FramePoint(*_apply(h.m_inv, p.x, p.y))


def frame_to_world_array(h: Homography, xy: np.ndarray) -> np.ndarray:
    """Vectorized frame->world for an (..., 2) array of pixel coordinates."""
    xy = np.asarray(xy, dtype=float)
    ones = np.ones(xy.shape[:-1] + (1,))
    v = np.concatenate([xy, ones], axis=-1) @ h.m.T
    scale = v[..., 2]
    if np.any(np.abs(scale) < 1e-12):
        raise PointAtInfinity("homogeneous scale ~0 in batch projection")
    return v[..., :2] / scale[..., None]


def world_to_frame_array(h: Homography, xy: np.ndarray) -> np.ndarray:
    """Vectorized world->frame for an (..., 2) array of world coordinates."""
    xy = np.asarray(xy, dtype=float)
    ones = np.ones(xy.shape[:-1] + (1,))
    v = np.concatenate([xy, ones], axis=-1) @ h.m_inv.T
    scale = v[..., 2]
    if np.any(np.abs(scale) < 1e-12):
        raise PointAtInfinity("homogeneous scale ~0 in batch projection")
    return v[..., :2] / scale[..., None]


def bottom_center_world(h: Homography, b: BoundingBox) -> WorldPoint:
    """World position of a box's bottom-center pixel (its ground contact)."""
    return frame_to_world(h, b.bottom_center())


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection-over-union; touching-but-disjoint interiors give 0."""
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = a.w * a.h + b.w * b.h - inter
    return inter / union


def normalized_distance(pred: BoundingBox, gt: BoundingBox) -> float:
    """Center offset divided by the ground-truth box diagonal."""
    d = math.hypot(pred.cx - gt.cx, pred.cy - gt.cy)
    return d / math.hypot(gt.w, gt.h)


def shape_distance(w1: float, h1: float, w2: float, h2: float) -> float:
    """max(w1/w2, w2/w1) + max(h1/h2, h2/h1) - 2; zero iff shapes equal."""
    return max(w1 / w2, w2 / w1) + max(h1 / h2, h2 / h1) - 2.0


def load_calibration(path) -> Homography:
    """Read a 4-line calibration file ("fx fy wx wy" per line)."""
    pairs = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            vals = [float(tok) for tok in line.split()]
            if len(vals) != 4:
                raise ValueError("calibration line needs 4 numbers, got %r" % line)
            pairs.append(((vals[0], vals[1]), (vals[2], vals[3])))
    if len(pairs) != 4:
        raise ValueError("calibration file must contain 4 correspondences, got %d" % len(pairs))
    return fit_homography(pairs)
