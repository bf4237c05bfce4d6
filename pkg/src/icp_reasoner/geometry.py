"""Rigid 3D geometry shared by the registration algorithms and the evaluators."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import kernels


class GeometryError(ValueError):
    """Base class for invalid geometric input."""


class EmptyInputError(GeometryError):
    pass


class DegenerateGeometryError(GeometryError):
    """The configuration does not determine a unique answer."""


@dataclass(frozen=True)
class PointCloud:
    """Ordered 3D points with an optional per-point feature block.

    ``mask[i]`` is False for padding points, which are carried along but
    never matched.
    """

    points: np.ndarray
    features: Optional[np.ndarray] = None
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "points", pts)
        if self.mask is None:
            mask = np.ones(len(pts), dtype=bool)
        else:
            mask = np.array(self.mask, dtype=bool).reshape(-1)
        if len(mask) != len(pts):
            raise ValueError(f"mask length {len(mask)} != point count {len(pts)}")
        object.__setattr__(self, "mask", mask)
        if self.features is not None:
            feats = np.array(self.features, dtype=np.float64)
            if feats.ndim == 1:
                feats = feats.reshape(len(pts), -1)
            if feats.ndim != 2 or feats.shape[0] != len(pts):
                raise ValueError("features must have one row per point")
            object.__setattr__(self, "features", feats)
        for arr in (self.points, self.mask, self.features):
            if arr is not None:
                arr.setflags(write=False)

    def __len__(self):
        return len(self.points)

    @property
    def feature_dim(self) -> int:
        return 0 if self.features is None else self.features.shape[1]

    @property
    def valid_points(self) -> np.ndarray:
        return self.points[self.mask]

    def with_points(self, points) -> "PointCloud":
        return PointCloud(points, self.features, self.mask)


def rotation_about_axis(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix for ``angle`` radians about ``axis``."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    x, y, z = axis
    k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def project_to_so3(m: np.ndarray) -> np.ndarray:
    """Nearest rotation (Frobenius sense) to a 3x3 matrix."""
    u, _, vt = np.linalg.svd(m)
    d = np.sign(np.linalg.det(u @ vt)) or 1.0
    return u @ np.diag([1.0, 1.0, d]) @ vt


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def compose(self, first: "RigidTransform") -> "RigidTransform":
        """``self ∘ first``: apply ``first``, then ``self``."""
        return RigidTransform(
            self.rotation @ first.rotation,
            self.rotation @ first.translation + self.translation,
        )

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def is_valid(self, tol: float = 1e-9) -> bool:
        r = self.rotation
        return bool(
            np.allclose(r.T @ r, np.eye(3), atol=tol, rtol=0)
            and abs(np.linalg.det(r) - 1.0) <= tol
        )


@dataclass(frozen=True)
class CorrespondenceSet:
    """Binary source-by-target match matrix plus matched distances.

    Rows of padding source points are all zero.
    """

    matrix: np.ndarray
    distances: Optional[np.ndarray] = None

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.int8)
        if m.ndim != 2:
            raise ValueError("correspondence matrix must be 2D")
        if not np.isin(m, (0, 1)).all():
            raise ValueError("correspondence entries must be 0 or 1")
        if (m.sum(axis=1) > 1).any():
            raise ValueError("a source row has more than one match")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        if self.distances is not None:
            d = np.array(self.distances, dtype=np.float64)
            if d.shape != m.shape:
                raise ValueError("distances must match the matrix shape")
            d.setflags(write=False)
            object.__setattr__(self, "distances", d)

    @classmethod
    def from_indices(cls, index, n_tgt: int, distances=None) -> "CorrespondenceSet":
        index = np.asarray(index, dtype=np.int64)
        m = np.zeros((len(index), n_tgt), dtype=np.int8)
        rows = np.nonzero(index >= 0)[0]
        m[rows, index[rows]] = 1
        d = None
        if distances is not None:
            d = np.zeros(m.shape)
            d[rows, index[rows]] = np.asarray(distances)[rows]
        return cls(m, d)

    @property
    def index(self) -> np.ndarray:
        """Matched target index per source row, -1 where unmatched."""
        has = self.matrix.any(axis=1)
        return np.where(has, self.matrix.argmax(axis=1), -1)

    def pairs(self):
        idx = self.index
        rows = np.nonzero(idx >= 0)[0]
        return rows, idx[rows]

    def __len__(self):
        return int(self.matrix.sum())


@dataclass(frozen=True)
class SurfaceStats:
    normals: Optional[np.ndarray] = None
    covariances: Optional[np.ndarray] = None

    def rotated(self, rotation: np.ndarray) -> "SurfaceStats":
        n = None if self.normals is None else self.normals @ rotation.T
        c = None
        if self.covariances is not None:
            c = np.einsum("ab,nbc,dc->nad", rotation, self.covariances, rotation)
        return SurfaceStats(n, c)


def apply_transform(cloud: PointCloud, transform: RigidTransform) -> PointCloud:
    if len(cloud) == 0:
        raise EmptyInputError("cannot transform an empty cloud")
    return cloud.with_points(transform.apply(cloud.points))


def nearest_correspondences(src: PointCloud, tgt: PointCloud) -> CorrespondenceSet:
    """Match every valid source point to its nearest valid target point."""
    if not src.mask.any() or not tgt.mask.any():
        raise EmptyInputError("nearest_correspondences needs unmasked points on both sides")
    index, sq = kernels.nearest_neighbors(src.points, tgt.points, src.mask, tgt.mask)
    return CorrespondenceSet.from_indices(index, len(tgt), np.sqrt(sq))


def kabsch(src: PointCloud, tgt: PointCloud, corr: CorrespondenceSet) -> RigidTransform:
    """Least-squares rigid transform taking matched source points onto targets."""
    rows, cols = corr.pairs()
    return kabsch_points(src.points[rows], tgt.points[cols])


def kabsch_points(a: np.ndarray, b: np.ndarray) -> RigidTransform:
    """Rigid transform minimising sum ||R a_k + t - b_k||^2 for row-paired sets."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < 3:
        raise DegenerateGeometryError(f"kabsch needs >= 3 pairs, got {len(a)}")
    ca = a.mean(axis=0)
    cb = b.mean(axis=0)
    h = (a - ca).T @ (b - cb)
    u, s, vt = np.linalg.svd(h)
    scale = max(s[0], np.finfo(float).tiny)
    # rank < 2 leaves a free rotation axis
    if s[1] <= 1e-12 * scale or s[0] == 0.0:
        raise DegenerateGeometryError("cross-covariance is rank deficient (collinear pairs)")
    d = 1.0 if np.linalg.det(vt.T @ u.T) >= 0 else -1.0
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(r, cb - r @ ca)


def _knn_indices(points: np.ndarray, k: int) -> np.ndarray:
    d2 = ((points[:, None, :] - points[None, :, :]) ** 2).sum(-1)
    # stable sort keeps lowest index first on ties; column 0 is the point itself
    order = np.argsort(d2, axis=1, kind="stable")
    return order[:, : k + 1]


def _orient(normal: np.ndarray) -> np.ndarray:
    for c in (2, 1, 0):
        if normal[c] > 0:
            return normal
        if normal[c] < 0:
            return -normal
    return normal


def surface_stats(cloud: PointCloud, k: int = 5, normals: bool = True,
                  covariances: bool = True) -> SurfaceStats:
    """Per-point normals and regularised covariances from k-nearest neighbours.

    Padding points get the statistics of their duplicated original.
    """
    if normals and k < 2:
        raise DegenerateGeometryError("normals need k >= 2")
    if covariances and k < 3:
        raise DegenerateGeometryError("covariances need k >= 3")
    valid = np.nonzero(cloud.mask)[0]
    pts = cloud.points[valid]
    if len(pts) < k + 1:
        raise DegenerateGeometryError(f"need >= {k + 1} unmasked points, got {len(pts)}")
    nbrs = _knn_indices(pts, k)
    out_n = np.zeros((len(pts), 3))
    out_c = np.zeros((len(pts), 3, 3))
    for i, nb in enumerate(nbrs):
        q = pts[nb]
        q = q - q.mean(axis=0)
        scatter = q.T @ q / len(nb)
        tr = np.trace(scatter)
        if tr <= 0.0:
            raise DegenerateGeometryError(f"zero scatter around point {valid[i]}")
        w, v = np.linalg.eigh(scatter)
        out_n[i] = _orient(v[:, 0] / np.linalg.norm(v[:, 0]))
        eps = max(1e-6 * tr / 3.0, 1e-9)
        out_c[i] = scatter + eps * np.eye(3)
    # map padding points onto the original they duplicate (exact coordinates)
    full_n = np.zeros((len(cloud), 3))
    full_c = np.zeros((len(cloud), 3, 3))
    full_n[valid] = out_n
    full_c[valid] = out_c
    for i in np.nonzero(~cloud.mask)[0]:
        j = int(np.argmin(((pts - cloud.points[i]) ** 2).sum(-1)))
        full_n[i] = out_n[j]
        full_c[i] = out_c[j]
    return SurfaceStats(full_n if normals else None, full_c if covariances else None)
