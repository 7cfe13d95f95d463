"""Closed-form 3D math: rotations, similarity fits, boxes, distances, contact.

Everything here is pure and operates on plain float64 numpy arrays. Point
clouds are (N, 3) arrays in meters, camera frame unless stated otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateCorrespondences, DegenerateRotation, EmptyCloud

# Contact threshold in meters. The source material for this pipeline never
# pins a value, so it is a configurable default everywhere.
DEFAULT_CONTACT_TAU = 0.01

# Corner k of a box has sign pattern given by the bits of k, x most
# significant: k = 4*bx + 2*by + bz, bit 0 -> -h, bit 1 -> +h.
_CORNER_SIGNS = np.array(
    [[(k >> 2) & 1, (k >> 1) & 1, k & 1] for k in range(8)], dtype=np.float64
) * 2.0 - 1.0


def as_cloud(points) -> np.ndarray:
    """Validate and return an (N, 3) float64 point cloud."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
        raise EmptyCloud(f"expected (N, 3) cloud with N >= 1, got {pts.shape}")
    if not np.isfinite(pts).all():
        raise ValueError("point cloud contains non-finite coordinates")
    return pts


@dataclass(frozen=True)
class SimilarityTransform:
    """Rigid rotation + translation + uniform positive scale."""

    R: np.ndarray  # (3, 3)
    t: np.ndarray  # (3,)
    s: float

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "s", float(self.s))
        if self.s <= 0:
            raise ValueError(f"scale must be positive, got {self.s}")
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6):
            raise ValueError("R is not orthonormal within 1e-6")
        if abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise ValueError("det(R) != +1 within 1e-6")

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls(np.eye(3), np.zeros(3), 1.0)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map points (..., 3) through s * R @ p + t."""
        pts = np.asarray(points, dtype=np.float64)
        return self.s * pts @ self.R.T + self.t

    def inverse(self) -> "SimilarityTransform":
        Rin = self.R.T
        return SimilarityTransform(Rin, -Rin @ self.t / self.s, 1.0 / self.s)

    def compose(self, other: "SimilarityTransform") -> "SimilarityTransform":
        """Return self applied after other: x -> self(other(x))."""
        return SimilarityTransform(
            self.R @ other.R, self.s * self.R @ other.t + self.t, self.s * other.s
        )


@dataclass(frozen=True)
class OrientedBox:
    """A parallelepiped stored as 8 ordered corners (canonical bit order)."""

    vertices: np.ndarray  # (8, 3)

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(8, 3)
        object.__setattr__(self, "vertices", v)
        if not np.isfinite(v).all():
            raise ValueError("box vertices contain non-finite values")
        # Opposite edges of a parallelepiped must match (corner order: index
        # bits select +/- per axis, x most significant).
        ex, ey, ez = v[4] - v[0], v[2] - v[0], v[1] - v[0]
        pairs = [
            (v[6] - v[2], ex), (v[7] - v[3], ex),
            (v[3] - v[1], ey), (v[7] - v[5], ey),
            (v[5] - v[4], ez), (v[7] - v[6], ez),
        ]
        for a, b in pairs:
            if not np.allclose(a, b, atol=1e-6):
                raise ValueError("vertices do not form a parallelepiped")
        if abs(float(np.linalg.det(np.stack([ex, ey, ez])))) <= 0.0:
            raise ValueError("box has zero volume")

    @classmethod
    def from_extents(cls, half_extents) -> "OrientedBox":
        """Axis-aligned box centered at the origin with the given half extents."""
        h = np.asarray(half_extents, dtype=np.float64).reshape(3)
        if (h <= 0).any():
            raise ValueError("half extents must be positive")
        return cls(_CORNER_SIGNS * h)

    @property
    def center(self) -> np.ndarray:
        return self.vertices.mean(axis=0)

    def edge_vectors(self) -> np.ndarray:
        """The three edge vectors (full lengths) leaving corner 0."""
        v = self.vertices
        return np.stack([v[4] - v[0], v[2] - v[0], v[1] - v[0]])

    def volume(self) -> float:
        return abs(float(np.linalg.det(self.edge_vectors())))

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Boolean mask of points inside the box (inclusive bounds)."""
        pts = np.asarray(points, dtype=np.float64)
        frac = (pts - self.vertices[0]) @ np.linalg.inv(self.edge_vectors())
        return ((frac >= 0.0) & (frac <= 1.0)).all(axis=-1)


def rot6d_to_matrix(r) -> np.ndarray:
    """Gram-Schmidt a 6D rotation representation into a rotation matrix.

    r holds the first two (unnormalized) columns of the target matrix,
    laid out as (a1x, a1y, a1z, a2x, a2y, a2z).
    """
    r = np.asarray(r, dtype=np.float64).reshape(6)
    if not np.isfinite(r).all():
        raise DegenerateRotation("non-finite 6D rotation input")
    a1, a2 = r[:3], r[3:]
    n1 = np.linalg.norm(a1)
    if n1 < 1e-8:
        raise DegenerateRotation("first column near zero")
    b1 = a1 / n1
    a2_orth = a2 - (a2 @ b1) * b1
    n2 = np.linalg.norm(a2_orth)
    if n2 < 1e-8:
        raise DegenerateRotation("columns near parallel or second column near zero")
    b2 = a2_orth / n2
    return np.stack([b1, b2, np.cross(b1, b2)], axis=1)


def matrix_to_rot6d(R) -> np.ndarray:
    """First two columns of a rotation matrix, flattened column-first."""
    R = np.asarray(R, dtype=np.float64).reshape(3, 3)
    return np.concatenate([R[:, 0], R[:, 1]])


def fit_translation_scale(nocs_pts, obs_pts, R) -> tuple[float, np.ndarray]:
    """Least-squares (s, t) for obs ~ s * R @ nocs + t with R known.

    Closed form: center both clouds; s = sum<R n~, p~> / sum|n~|^2,
    t = p_bar - s R n_bar. s is clamped to >= 1e-6.
    """
    n = as_cloud(nocs_pts)
    p = as_cloud(obs_pts)
    if n.shape[0] != p.shape[0] or n.shape[0] < 2:
        raise DegenerateCorrespondences(
            f"need >= 2 index-aligned correspondences, got {n.shape[0]} vs {p.shape[0]}"
        )
    R = np.asarray(R, dtype=np.float64).reshape(3, 3)
    n_bar, p_bar = n.mean(axis=0), p.mean(axis=0)
    n_c, p_c = n - n_bar, p - p_bar
    denom = float((n_c * n_c).sum())
    if denom < 1e-12:
        raise DegenerateCorrespondences("source points are (nearly) all identical")
    s = float((n_c @ R.T * p_c).sum()) / denom
    s = max(s, 1e-6)
    t = p_bar - s * R @ n_bar
    return s, t


def umeyama_full(src, dst) -> SimilarityTransform:
    """Full least-squares similarity (R, t, s) via SVD of the cross-covariance.

    Includes the reflection correction so the recovered R is a proper
    rotation. Used as the ground-truth generator / oracle for the fixed-R
    variant above.
    """
    x = as_cloud(src)
    y = as_cloud(dst)
    if x.shape[0] != y.shape[0] or x.shape[0] < 3:
        raise DegenerateCorrespondences("need >= 3 aligned correspondences")
    mx, my = x.mean(axis=0), y.mean(axis=0)
    xc, yc = x - mx, y - my
    cov = yc.T @ xc / x.shape[0]
    U, d, Vt = np.linalg.svd(cov)
    if np.linalg.matrix_rank(cov, tol=1e-12) < 2:
        raise DegenerateCorrespondences("rank-deficient covariance (collinear points)")
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    var_x = (xc * xc).sum() / x.shape[0]
    s = float((d * np.diag(S)).sum()) / var_x
    if s <= 0:
        raise DegenerateCorrespondences("non-positive recovered scale")
    t = my - s * R @ mx
    return SimilarityTransform(R, t, s)


def transform_box(canonical: OrientedBox, pose: SimilarityTransform) -> OrientedBox:
    """Map every corner through the similarity transform, order preserved."""
    return OrientedBox(pose.apply(canonical.vertices))


def chamfer(A, B) -> float:
    """Symmetric mean nearest-neighbor L2 distance (meters, not squared)."""
    a = as_cloud(A)
    b = as_cloud(B)
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
    return float(np.sqrt(d2.min(axis=1)).mean() + np.sqrt(d2.min(axis=0)).mean())


def rotation_error(R1, R2) -> float:
    """Geodesic angle between two rotations, in degrees."""
    R1 = np.asarray(R1, dtype=np.float64).reshape(3, 3)
    R2 = np.asarray(R2, dtype=np.float64).reshape(3, 3)
    c = (np.trace(R1.T @ R2) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def box_iou(a: OrientedBox, b: OrientedBox, samples: int = 100_000, seed: int = 0) -> float:
    """Monte-Carlo volumetric IoU of two oriented boxes.

    Samples uniformly in the joint axis-aligned bounding volume with a
    seeded generator; returns #(in both) / #(in either), or 0.0 when no
    sample hits either box.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    all_v = np.vstack([a.vertices, b.vertices])
    lo, hi = all_v.min(axis=0), all_v.max(axis=0)
    rng = np.random.Generator(np.random.PCG64(seed))
    pts = rng.uniform(lo, hi, size=(samples, 3))
    in_a = a.contains(pts)
    in_b = b.contains(pts)
    union = int((in_a | in_b).sum())
    if union == 0:
        return 0.0
    return float((in_a & in_b).sum()) / union


def compute_contact_map(obj_pts, hand_pts, tau: float = DEFAULT_CONTACT_TAU) -> np.ndarray:
    """Binary per-object-point contact: min distance to any hand point < tau."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    o = as_cloud(obj_pts)
    h = as_cloud(hand_pts)
    d2 = ((o[:, None, :] - h[None, :, :]) ** 2).sum(axis=2)
    return (np.sqrt(d2.min(axis=1)) < tau).astype(np.uint8)


def point_box_distance(points, box: OrientedBox) -> np.ndarray:
    """Euclidean distance from each point to the box surface (0 inside).

    Requires orthogonal box edges (true for any cuboid under a similarity
    transform, which is every box this package produces).
    """
    pts = np.asarray(points, dtype=np.float64)
    E = box.edge_vectors()
    frac = (pts - box.vertices[0]) @ np.linalg.inv(E)
    clamped = np.clip(frac, 0.0, 1.0)
    nearest = box.vertices[0] + clamped @ E
    return np.linalg.norm(pts - nearest, axis=-1)
