"""Planar homographies: normalized DLT, RANSAC, composition and point/box projection.

Points are normalized image coordinates in [0, 1]^2. A homography maps
homogeneous points ``p' ~ H p``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import make_rng


class DegenerateConfigurationError(ValueError):
    pass


class RansacFailure(RuntimeError):
    def __init__(self, best_fraction: float):
        super().__init__(f"no model reached the inlier fraction; best fraction {best_fraction:.3f}")
        self.best_fraction = best_fraction


class PointAtInfinityError(ValueError):
    pass


@dataclass(frozen=True)
class Homography:
    m: np.ndarray

    def __post_init__(self):
        m = np.array(self.m, dtype=np.float64).reshape(3, 3)
        if not np.all(np.isfinite(m)):
            raise ValueError("homography has non-finite entries")
        if m[2, 2] != 0.0:
            m = m / m[2, 2]
        if abs(np.linalg.det(m)) <= 1e-12:
            raise ValueError("homography is singular")
        m.setflags(write=False)
        object.__setattr__(self, "m", m)

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    @classmethod
    def translation(cls, tx: float, ty: float) -> "Homography":
        return cls(np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]]))

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.m))


@dataclass(frozen=True)
class RansacConfig:
    inlier_threshold: float = 0.005
    max_iterations: int = 500
    min_inlier_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.inlier_threshold <= 0:
            raise ValueError("inlier_threshold must be > 0")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


@dataclass(frozen=True)
class Box:
    """Axis-aligned box (x1, y1, x2, y2); ``empty`` flags an empty intersection."""

    x1: float
    y1: float
    x2: float
    y2: float
    empty: bool = False

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2])

    @classmethod
    def from_array(cls, a) -> "Box":
        a = np.asarray(a, dtype=np.float64)
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))

    def contains(self, other: "Box") -> bool:
        return (self.x1 <= other.x1 and self.y1 <= other.y1
                and other.x2 <= self.x2 and other.y2 <= self.y2)


EMPTY_BOX = Box(0.0, 0.0, 0.0, 0.0, empty=True)


def _as_pairs(src, dst) -> tuple[np.ndarray, np.ndarray]:
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if src.shape != dst.shape:
        raise ValueError("source and target point lists differ in length")
    if not (np.all(np.isfinite(src)) and np.all(np.isfinite(dst))):
        raise ValueError("correspondences contain non-finite coordinates")
    return src, dst


def _normalizer(pts: np.ndarray) -> np.ndarray:
    # centroid to origin, mean distance sqrt(2)
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    if d < 1e-15:
        raise DegenerateConfigurationError("all points coincide")
    s = np.sqrt(2.0) / d
    return np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])


def _apply(m: np.ndarray, pts: np.ndarray) -> np.ndarray:
    ph = np.c_[pts, np.ones(len(pts))] @ m.T
    return ph[:, :2] / ph[:, 2:3]


def estimate_dlt(src, dst) -> Homography:
    """Hartley-normalized DLT, least squares over all pairs."""
    src, dst = _as_pairs(src, dst)
    n = len(src)
    if n < 4:
        raise ValueError(f"need at least 4 correspondences, got {n}")
    t_src, t_dst = _normalizer(src), _normalizer(dst)
    a, b = _apply(t_src, src), _apply(t_dst, dst)
    x, y = a[:, 0], a[:, 1]
    u, v = b[:, 0], b[:, 1]
    zero, one = np.zeros(n), np.ones(n)
    design = np.empty((2 * n, 9))
    design[0::2] = np.c_[-x, -y, -one, zero, zero, zero, u * x, u * y, u]
    design[1::2] = np.c_[zero, zero, zero, -x, -y, -one, v * x, v * y, v]
    _, sv, vt = np.linalg.svd(design)
    # rank < 8 means the null space is not one-dimensional
    if sv.shape[0] < 8 or sv[7] <= 1e-10 * sv[0]:
        raise DegenerateConfigurationError("design matrix is rank deficient")
    hn = vt[-1].reshape(3, 3)
    m = np.linalg.inv(t_dst) @ hn @ t_src
    if abs(m[2, 2]) > 1e-12:
        m = m / m[2, 2]
    else:
        m = m / np.linalg.norm(m)
    try:
        return Homography(m)
    except ValueError as exc:
        raise DegenerateConfigurationError(str(exc)) from exc


def reprojection_errors(h: Homography, src, dst) -> np.ndarray:
    src, dst = _as_pairs(src, dst)
    ph = np.c_[src, np.ones(len(src))] @ h.m.T
    w = ph[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        proj = ph[:, :2] / w[:, None]
        err = np.sqrt(((proj - dst) ** 2).sum(axis=1))
    err[~np.isfinite(err)] = np.inf
    return err


def _collinear(p: np.ndarray, tol: float = 1e-9) -> bool:
    for i, j, k in ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)):
        u, w = p[j] - p[i], p[k] - p[i]
        if abs(u[0] * w[1] - u[1] * w[0]) < tol:
            return True
    return False


def estimate_ransac(src, dst, cfg: RansacConfig = RansacConfig()) -> tuple[Homography, np.ndarray]:
    """Robust fit: minimal 4-point DLT hypotheses, best by inlier count, refit on inliers."""
    src, dst = _as_pairs(src, dst)
    n = len(src)
    if n < 4:
        raise ValueError(f"need at least 4 correspondences, got {n}")
    rng = make_rng(cfg.seed)
    best_count, best_err, best_mask = -1, np.inf, None
    for _ in range(cfg.max_iterations):
        idx = rng.choice(n, size=4, replace=False)
        if _collinear(src[idx]) or _collinear(dst[idx]):
            continue
        try:
            h = estimate_dlt(src[idx], dst[idx])
        except (DegenerateConfigurationError, ValueError):
            continue
        err = reprojection_errors(h, src, dst)
        mask = err < cfg.inlier_threshold
        count = int(mask.sum())
        mean_err = float(err[mask].mean()) if count else np.inf
        if count > best_count or (count == best_count and mean_err < best_err):
            best_count, best_err, best_mask = count, mean_err, mask
        if count == n and mean_err < 1e-12:
            break
    best_fraction = max(best_count, 0) / n
    if best_mask is None or best_fraction < cfg.min_inlier_fraction or best_count < 4:
        raise RansacFailure(best_fraction)
    h = estimate_dlt(src[best_mask], dst[best_mask])
    # one re-scoring pass with the refit model
    mask = reprojection_errors(h, src, dst) < cfg.inlier_threshold
    if mask.sum() >= max(best_count, 4) and not np.array_equal(mask, best_mask):
        h = estimate_dlt(src[mask], dst[mask])
        best_mask = mask
    return h, best_mask


def project_points(pts, h: Homography) -> tuple[np.ndarray, np.ndarray]:
    """Map points through ``h``. Returns (points, outside) where ``outside`` flags
    points that left the unit square; coordinates are not clamped."""
    p = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    ph = np.c_[p, np.ones(len(p))] @ h.m.T
    w = ph[:, 2]
    if np.any(np.abs(w) < 1e-12):
        raise PointAtInfinityError("point maps to infinity (|w| < 1e-12)")
    out = ph[:, :2] / w[:, None]
    outside = np.any((out < 0.0) | (out > 1.0), axis=1)
    return out, outside


def compose(h_ab: Homography, h_bc: Homography) -> Homography:
    """Homography mapping frame a to frame c, given a->b and b->c."""
    return Homography(h_bc.m @ h_ab.m)


def compose_chain(links) -> Homography:
    """Compose a sequence a->b, b->c, ... into the first-to-last map."""
    out = Homography.identity()
    for link in links:
        out = compose(out, link)
    return out


def project_box(box: Box, h: Homography) -> Box:
    """AABB of the projected corners, intersected with the unit square."""
    if box.empty:
        return EMPTY_BOX
    if not (box.x1 < box.x2 and box.y1 < box.y2):
        raise ValueError(f"invalid box {box}")
    corners = np.array([[box.x1, box.y1], [box.x2, box.y1], [box.x2, box.y2], [box.x1, box.y2]])
    pts, _ = project_points(corners, h)
    lo = np.maximum(pts.min(axis=0), 0.0)
    hi = np.minimum(pts.max(axis=0), 1.0)
    if lo[0] >= hi[0] or lo[1] >= hi[1]:
        return EMPTY_BOX
    return Box(float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1]))
