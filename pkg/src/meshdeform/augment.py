"""Coherent spatial augmentation of volumes and their ground-truth meshes.

Volumes are warped backward (each output voxel samples the source), meshes
forward (each vertex is displaced), so image and surfaces stay registered.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from .mesh import TriMesh
from .volume import VoxelVolume


class FoldOverError(RuntimeError):
    pass


@dataclass
class AugmentConfig:
    scale: float = 0.05
    rotation_deg: float = 5.0
    shear_deg: float = 10.0
    elastic_points: int = 16
    elastic_magnitude: float = 0.02
    affine: bool = True
    elastic: bool = True


def _warp_volume(vol: VoxelVolume, src_idx: np.ndarray) -> VoxelVolume:
    """Sample ``vol`` at source voxel coordinates of shape dims + (3,)."""
    binary = vol.data.dtype in (np.uint8, np.bool_)
    data = np.asarray(vol.data, dtype=np.float64)
    out = ndimage.map_coordinates(data, np.moveaxis(src_idx, -1, 0), order=1, mode="nearest")
    if binary:
        out = (out >= 0.5).astype(vol.data.dtype)
    return vol.with_data(out)


def _grid_indices(dims) -> np.ndarray:
    return np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in dims], indexing="ij"), axis=-1)


# ---------------------------------------------------------------------------
# affine


def random_affine(cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """3x3 linear part composed as scale @ shear @ rotation."""
    s = 1.0 + rng.uniform(-cfg.scale, cfg.scale)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    rot = Rotation.from_rotvec(axis * np.deg2rad(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg))).as_matrix()
    shear = np.eye(3)
    for (i, j), ang in zip(((0, 1), (0, 2), (1, 2)), rng.uniform(-cfg.shear_deg, cfg.shear_deg, 3)):
        shear[i, j] = np.tan(np.deg2rad(ang))
    return s * shear @ rot


def apply_affine(volumes, meshes, matrix: np.ndarray, center=None):
    """Map about ``center`` (default: the first volume's centre)."""
    ref = volumes[0]
    c = ref.center if center is None else np.asarray(center)
    delta = matrix - np.eye(3)
    out_meshes = [m.with_vertices(m.vertices + (m.vertices - c) @ delta.T) for m in meshes]
    inv_delta = np.linalg.inv(matrix) - np.eye(3)
    out_vols = []
    for vol in volumes:
        idx = _grid_indices(vol.dims)
        world = vol.voxel_to_world(idx)
        src = idx + ((world - c) @ inv_delta.T) / np.array(vol.spacing)
        out_vols.append(_warp_volume(vol, src))
    return out_vols, out_meshes


def affine_augment(volumes, meshes, cfg: AugmentConfig, rng: np.random.Generator):
    """Random scale/shear/rotation applied to volumes (backward) and meshes (forward)."""
    return apply_affine(volumes, meshes, random_affine(cfg, rng))


# ---------------------------------------------------------------------------
# elastic


def _bspline_basis(t: np.ndarray) -> np.ndarray:
    """Uniform cubic B-spline weights for local parameter t in [0, 1), shape (..., 4)."""
    t2, t3 = t * t, t * t * t
    return np.stack([
        (1 - t) ** 3 / 6,
        (3 * t3 - 6 * t2 + 4) / 6,
        (-3 * t3 + 3 * t2 + 3 * t + 1) / 6,
        t3 / 6,
    ], axis=-1)


class BSplineField:
    """Cubic B-spline displacement field over a lattice of control points.

    ``n`` control points per axis span the volume with one point of padding on
    each side, so every location in the volume has its full 4x4x4 support and
    the basis is a partition of unity.
    """

    def __init__(self, ref: VoxelVolume, coefficients: np.ndarray):
        self.ref = ref
        self.coef = np.asarray(coefficients, dtype=np.float64)  # (n, n, n, 3) in mm
        n = self.coef.shape[0]
        self.origin = np.array(ref.origin)
        self.step = np.maximum(ref.extent, 1e-12) / (n - 3)

    def _axis_weights(self, u: np.ndarray, n: int):
        # u: lattice coordinate where control point k sits at u = k - 1
        u = np.clip(u, 0.0, n - 3 - 1e-9)
        cell = np.floor(u).astype(np.int64)
        return cell, _bspline_basis(u - cell)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        """Displacement (mm) at world points of shape (..., 3)."""
        pts = np.asarray(points, dtype=np.float64)
        flat = pts.reshape(-1, 3)
        n = self.coef.shape[0]
        u = (flat - self.origin) / self.step
        cells, weights = zip(*(self._axis_weights(u[:, a], n) for a in range(3)))
        out = np.zeros_like(flat)
        for i in range(4):
            for j in range(4):
                for k in range(4):
                    w = weights[0][:, i] * weights[1][:, j] * weights[2][:, k]
                    out += w[:, None] * self.coef[cells[0] + i, cells[1] + j, cells[2] + k]
        return out.reshape(pts.shape)

    def on_grid(self) -> np.ndarray:
        """Displacement at every voxel centre, separable evaluation, shape dims + (3,)."""
        n = self.coef.shape[0]
        mats = []
        for a, dim in enumerate(self.ref.dims):
            u = np.arange(dim) * self.ref.spacing[a] / self.step[a]
            cell, w = self._axis_weights(u, n)
            m = np.zeros((dim, n))
            for q in range(4):
                m[np.arange(dim), cell + q] = w[:, q]
            mats.append(m)
        return np.einsum("ia,jb,kc,abcd->ijkd", mats[0], mats[1], mats[2], self.coef, optimize=True)


def min_jacobian(field_grid: np.ndarray, spacing) -> float:
    """Smallest determinant of ``I + grad(d)`` over the grid."""
    jac = np.zeros(field_grid.shape[:3] + (3, 3))
    for comp in range(3):
        grads = np.gradient(field_grid[..., comp], *spacing)
        for a in range(3):
            jac[..., comp, a] = grads[a]
    jac += np.eye(3)
    return float(np.linalg.det(jac).min())


def apply_displacement(volumes, meshes, field: BSplineField, inverse_iterations: int = 4):
    """Meshes move by ``d(x)``; volumes sample the source at the fixed-point inverse ``y - d(s)``."""
    out_meshes = [m.with_vertices(m.vertices + field(m.vertices)) for m in meshes]
    ref = volumes[0]
    grid_d = field.on_grid() / np.array(ref.spacing)  # voxel units
    idx = _grid_indices(ref.dims)
    src = idx.copy()
    comps = [grid_d[..., a] for a in range(3)]
    for _ in range(inverse_iterations):
        coords = np.moveaxis(src, -1, 0)
        d = np.stack([ndimage.map_coordinates(c, coords, order=1, mode="nearest") for c in comps], axis=-1)
        src = idx - d
    return [_warp_volume(v, src) for v in volumes], out_meshes


def elastic_deform(volumes, meshes, cfg: AugmentConfig, rng: np.random.Generator, max_retries: int = 5):
    """Random smooth B-spline warp; resamples if the field folds over."""
    ref = volumes[0]
    n = cfg.elastic_points
    sigma = cfg.elastic_magnitude * ref.extent
    for _ in range(max_retries + 1):
        coef = rng.normal(size=(n, n, n, 3)) * sigma
        field = BSplineField(ref, coef)
        if min_jacobian(field.on_grid(), ref.spacing) > 0:
            return apply_displacement(volumes, meshes, field)
    raise FoldOverError(f"elastic field folded over in {max_retries + 1} attempts")


def augment(volumes, meshes, cfg: AugmentConfig, rng: np.random.Generator):
    """Affine then elastic augmentation, each enabled by ``cfg``."""
    if cfg.affine:
        volumes, meshes = affine_augment(volumes, meshes, cfg, rng)
    if cfg.elastic:
        volumes, meshes = elastic_deform(volumes, meshes, cfg, rng)
    return volumes, meshes
