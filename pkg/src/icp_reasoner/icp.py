"""Point-to-point, point-to-plane and generalized ICP behind one iteration loop."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Iterator, List, Optional

import numpy as np

from .geometry import (
    CorrespondenceSet,
    DegenerateGeometryError,
    EmptyInputError,
    GeometryError,
    PointCloud,
    RigidTransform,
    SurfaceStats,
    apply_transform,
    kabsch,
    nearest_correspondences,
    project_to_so3,
    surface_stats,
)

log = logging.getLogger(__name__)


class Variant(str, enum.Enum):
    P2P = "p2p"
    P2L = "p2l"
    GICP = "gicp"


@dataclass(frozen=True)
class IcpConfig:
    variant: Variant = Variant.P2P
    tolerance: float = 1e-10
    max_iter: int = 50
    k_neighbors: int = 5

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.tolerance < 0:
            raise ValueError("tolerance must be >= 0")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.k_neighbors < 1:
            raise ValueError("k_neighbors must be >= 1")


@dataclass
class IcpResult:
    transform: RigidTransform
    correspondences: CorrespondenceSet
    errors: List[float]
    iterations: int
    converged: bool
    rank_deficient: bool = False
    final_src: Optional[PointCloud] = field(default=None, repr=False)


@dataclass(frozen=True)
class IterationRecord:
    """One pass of the loop: correspondences, step transform and its error."""

    src_before: PointCloud
    corr: CorrespondenceSet
    step: RigidTransform
    error: float
    src_after: PointCloud
    total: RigidTransform
    last: bool
    converged: bool
    rank_deficient: bool = False


def _deltas(src, tgt, corr, transform):
    rows, cols = corr.pairs()
    if len(rows) == 0:
        raise EmptyInputError("empty correspondence set")
    moved = transform.apply(src.points[rows])
    return moved - tgt.points[cols], rows, cols


def p2p_error(src: PointCloud, tgt: PointCloud, corr: CorrespondenceSet,
              transform: RigidTransform) -> float:
    delta, _, _ = _deltas(src, tgt, corr, transform)
    return float((delta * delta).sum())


def p2l_error(src: PointCloud, tgt: PointCloud, stats: SurfaceStats,
              corr: CorrespondenceSet, transform: RigidTransform) -> float:
    if stats.normals is None:
        raise GeometryError("point-to-plane error needs target normals")
    delta, _, cols = _deltas(src, tgt, corr, transform)
    r = (stats.normals[cols] * delta).sum(axis=1)
    return float((r * r).sum())


def gicp_inverse_covariance(cov_src, cov_tgt, rotation) -> np.ndarray:
    """Inverse of ``cov_tgt + R cov_src R^T``."""
    r = np.asarray(rotation, dtype=np.float64)
    combined = np.asarray(cov_tgt) + r @ np.asarray(cov_src) @ r.T
    try:
        inv = np.linalg.inv(combined)
    except np.linalg.LinAlgError as exc:
        raise DegenerateGeometryError("combined covariance is singular") from exc
    if not np.isfinite(inv).all():
        raise DegenerateGeometryError("combined covariance is singular")
    return inv


def _gicp_weights(stats_src, stats_tgt, rows, cols, rotation):
    combined = stats_tgt.covariances[cols] + np.einsum(
        "ab,nbc,dc->nad", rotation, stats_src.covariances[rows], rotation)
    try:
        return np.linalg.inv(combined)
    except np.linalg.LinAlgError as exc:
        raise DegenerateGeometryError("combined covariance is singular") from exc


def gicp_error(src: PointCloud, tgt: PointCloud, stats_src: SurfaceStats,
               stats_tgt: SurfaceStats, corr: CorrespondenceSet,
               transform: RigidTransform) -> float:
    if stats_src.covariances is None or stats_tgt.covariances is None:
        raise GeometryError("generalized ICP error needs covariances on both clouds")
    delta, rows, cols = _deltas(src, tgt, corr, transform)
    m = _gicp_weights(stats_src, stats_tgt, rows, cols, transform.rotation)
    return float(np.einsum("na,nab,nb->", delta, m, delta))


def _skew(v):
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def _small_rotation(omega) -> np.ndarray:
    return project_to_so3(np.eye(3) + _skew(omega))


def _solve_p2l(src, tgt, stats, corr):
    if stats.normals is None:
        raise GeometryError("point-to-plane step needs target normals")
    rows, cols = corr.pairs()
    if len(rows) < 6:
        raise DegenerateGeometryError(f"point-to-plane step needs >= 6 pairs, got {len(rows)}")
    p = src.points[rows]
    q = tgt.points[cols]
    n = stats.normals[cols]
    jac = np.hstack([np.cross(p, n), n])
    r0 = ((p - q) * n).sum(axis=1)
    a = jac.T @ jac
    b = -jac.T @ r0
    w = np.linalg.eigvalsh(a)
    deficient = w[0] <= 1e-10 * max(w[-1], np.finfo(float).tiny)
    if deficient:
        x = np.linalg.pinv(a, rcond=1e-10) @ b
    else:
        x = np.linalg.solve(a, b)
    return RigidTransform(_small_rotation(x[:3]), x[3:]), bool(deficient)


def p2l_step(src: PointCloud, tgt: PointCloud, stats: SurfaceStats,
             corr: CorrespondenceSet, strict: bool = False) -> RigidTransform:
    """Linearised point-to-plane update (6x6 normal equations).

    A rank-deficient system is solved by minimum-norm pseudo-inverse unless
    ``strict`` is set, in which case it raises.
    """
    transform, deficient = _solve_p2l(src, tgt, stats, corr)
    if deficient:
        if strict:
            raise DegenerateGeometryError("point-to-plane normal equations are singular")
        log.warning("point-to-plane system rank deficient; using pseudo-inverse")
    return transform


def gicp_step(src: PointCloud, tgt: PointCloud, stats_src: SurfaceStats,
              stats_tgt: SurfaceStats, corr: CorrespondenceSet,
              max_inner: int = 50, step_tol: float = 1e-13) -> RigidTransform:
    """Gauss-Newton minimiser of the Mahalanobis objective, weights frozen at R = I.

    ``stats_src`` must describe ``src`` in its current pose. Steps that would
    raise the objective are halved.
    """
    if stats_src.covariances is None or stats_tgt.covariances is None:
        raise GeometryError("generalized ICP step needs covariances on both clouds")
    rows, cols = corr.pairs()
    if len(rows) < 6:
        raise DegenerateGeometryError(f"generalized ICP step needs >= 6 pairs, got {len(rows)}")
    p = src.points[rows]
    q = tgt.points[cols]
    m = _gicp_weights(stats_src, stats_tgt, rows, cols, np.eye(3))

    def objective(r, t):
        d = p @ r.T + t - q
        return float(np.einsum("na,nab,nb->", d, m, d))

    r = np.eye(3)
    t = np.zeros(3)
    cost = objective(r, t)
    for _ in range(max_inner):
        pr = p @ r.T
        d = pr + t - q
        jac = np.zeros((len(p), 3, 6))
        jac[:, :, :3] = -np.array([_skew(v) for v in pr])
        jac[:, :, 3:] = np.eye(3)
        jtm = np.einsum("nak,nab->nkb", jac, m)
        h = np.einsum("nkb,nbl->kl", jtm, jac)
        g = np.einsum("nkb,nb->k", jtm, d)
        try:
            x = -np.linalg.solve(h, g)
        except np.linalg.LinAlgError as exc:
            raise DegenerateGeometryError("generalized ICP normal equations are singular") from exc
        scale = 1.0
        while True:
            dr = _small_rotation(scale * x[:3])
            r_new = dr @ r
            t_new = t + scale * x[3:]
            new_cost = objective(r_new, t_new)
            if new_cost <= cost or scale < 1e-6:
                break
            scale *= 0.5
        if new_cost > cost:
            break
        r, t, cost = r_new, t_new, new_cost
        if np.linalg.norm(scale * x) < step_tol:
            break
    return RigidTransform(project_to_so3(r), t)


class _VariantOps:
    """Variant-specific GetTransform / GetError with precomputed surface stats."""

    def __init__(self, src: PointCloud, tgt: PointCloud, cfg: IcpConfig):
        self.cfg = cfg
        self.stats_src = None
        self.stats_tgt = None
        if cfg.variant is Variant.P2L:
            self.stats_tgt = surface_stats(tgt, cfg.k_neighbors, covariances=False)
        elif cfg.variant is Variant.GICP:
            self.stats_src = surface_stats(src, cfg.k_neighbors, normals=False)
            self.stats_tgt = surface_stats(tgt, cfg.k_neighbors, normals=False)

    def transform(self, src, tgt, corr, rotation_so_far):
        v = self.cfg.variant
        if v is Variant.P2P:
            return kabsch(src, tgt, corr), False
        if v is Variant.P2L:
            t, deficient = _solve_p2l(src, tgt, self.stats_tgt, corr)
            if deficient:
                log.warning("point-to-plane system rank deficient; using pseudo-inverse")
            return t, deficient
        stats_src = self.stats_src.rotated(rotation_so_far)
        return gicp_step(src, tgt, stats_src, self.stats_tgt, corr), False

    def error(self, src, tgt, corr, step, rotation_so_far):
        v = self.cfg.variant
        if v is Variant.P2P:
            return p2p_error(src, tgt, corr, step)
        if v is Variant.P2L:
            return p2l_error(src, tgt, self.stats_tgt, corr, step)
        return gicp_error(src, tgt, self.stats_src.rotated(rotation_so_far),
                          self.stats_tgt, corr, step)


def iterate_icp(src: PointCloud, tgt: PointCloud, cfg: IcpConfig) -> Iterator[IterationRecord]:
    """Yield one record per pass of the two-phase loop.

    Each pass finds correspondences, estimates a step transform and evaluates
    its error; the loop stops once the error is within tolerance or
    ``max_iter`` passes have run.
    """
    if len(src) == 0 or len(tgt) == 0:
        raise EmptyInputError("run_icp needs non-empty clouds")
    ops = _VariantOps(src, tgt, cfg)
    total = RigidTransform.identity()
    current = src
    it = 0
    while True:
        corr = nearest_correspondences(current, tgt)
        step, deficient = ops.transform(current, tgt, corr, total.rotation)
        error = ops.error(current, tgt, corr, step, total.rotation)
        moved = apply_transform(current, step)
        total = step.compose(total)
        converged = error <= cfg.tolerance
        if not converged:
            it += 1
        last = converged or it >= cfg.max_iter
        yield IterationRecord(current, corr, step, error, moved, total, last,
                              converged, deficient)
        if last:
            return
        current = moved


def run_icp(src: PointCloud, tgt: PointCloud, cfg: IcpConfig) -> IcpResult:
    records = list(iterate_icp(src, tgt, cfg))
    final = records[-1]
    return IcpResult(
        transform=final.total,
        correspondences=final.corr,
        errors=[r.error for r in records],
        iterations=len(records),
        converged=final.converged,
        rank_deficient=any(r.rank_deficient for r in records),
        final_src=final.src_after,
    )


def alignment_error(src: PointCloud, tgt: PointCloud, corr: CorrespondenceSet,
                    cfg: IcpConfig) -> float:
    """Variant error of the clouds as they stand (identity step)."""
    ops = _VariantOps(src, tgt, cfg)
    return ops.error(src, tgt, corr, RigidTransform.identity(), np.eye(3))
