"""Voxel grids: pre-processing, resampling, trilinear sampling, iso-surfaces, voxelization.

Coordinate convention shared by every module: ``world = origin + index * spacing``
where index ``(i, j, k)`` addresses ``data[i, j, k]`` and integer indices are
voxel centres.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .mesh import MeshError, TriMesh


class VolumeError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class VoxelVolume:
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise VolumeError(f"volume data must be 3D, got shape {data.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise VolumeError(f"spacing must be three positive values, got {self.spacing}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def dims(self) -> tuple:
        return tuple(self.data.shape)

    @property
    def extent(self) -> np.ndarray:
        """World distance between the first and last voxel centres per axis."""
        return (np.array(self.dims) - 1) * np.array(self.spacing)

    @property
    def center(self) -> np.ndarray:
        return np.array(self.origin) + 0.5 * self.extent

    def with_data(self, data) -> "VoxelVolume":
        return VoxelVolume(data, self.spacing, self.origin)

    def world_to_voxel(self, points):
        return (np.asarray(points) - np.array(self.origin)) / np.array(self.spacing)

    def voxel_to_world(self, idx):
        return np.array(self.origin) + np.asarray(idx) * np.array(self.spacing)

    def voxel_centers(self) -> np.ndarray:
        """World coordinates of every voxel centre, shape dims + (3,)."""
        grids = np.meshgrid(*[np.arange(n) for n in self.dims], indexing="ij")
        return self.voxel_to_world(np.stack(grids, axis=-1))


# ---------------------------------------------------------------------------
# RVOL file format


RVOL_MAGIC = b"RVOL1\n"


def write_rvol(path, vol: VoxelVolume, dtype: str | None = None) -> None:
    """Write ``RVOL1`` header lines then raw little-endian data, x fastest."""
    if dtype is None:
        dtype = "u8" if vol.data.dtype in (np.uint8, np.bool_) else "f32"
    np_dtype = {"f32": "<f4", "u8": "u1"}[dtype]
    header = (
        "dims {} {} {}\n".format(*vol.dims)
        + "spacing {!r} {!r} {!r}\n".format(*vol.spacing)
        + "origin {!r} {!r} {!r}\n".format(*vol.origin)
        + f"dtype {dtype}\n\n"
    )
    with open(path, "wb") as fh:
        fh.write(RVOL_MAGIC)
        fh.write(header.encode("ascii"))
        fh.write(np.asarray(vol.data).astype(np_dtype).ravel(order="F").tobytes())


def read_rvol(path) -> VoxelVolume:
    raw = Path(path).read_bytes()
    if not raw.startswith(RVOL_MAGIC):
        raise VolumeError(f"{path}: missing RVOL1 magic")
    end = raw.find(b"\n\n", len(RVOL_MAGIC) - 1)
    if end < 0:
        raise VolumeError(f"{path}: unterminated RVOL header")
    fields = {}
    for line in raw[len(RVOL_MAGIC):end].decode("ascii").splitlines():
        key, *vals = line.split()
        fields[key] = vals
    try:
        dims = tuple(int(v) for v in fields["dims"])
        spacing = tuple(float(v) for v in fields["spacing"])
        origin = tuple(float(v) for v in fields["origin"])
        np_dtype = {"f32": "<f4", "u8": "u1"}[fields["dtype"][0]]
    except (KeyError, ValueError) as exc:
        raise VolumeError(f"{path}: malformed RVOL header ({exc})") from exc
    body = raw[end + 2:]
    n = int(np.prod(dims))
    if len(body) != n * np.dtype(np_dtype).itemsize:
        raise VolumeError(f"{path}: expected {n} voxels, found {len(body)} bytes")
    data = np.frombuffer(body, dtype=np_dtype).reshape(dims, order="F")
    return VoxelVolume(np.array(data, dtype=np.dtype(np_dtype).newbyteorder("=")), spacing, origin)


# ---------------------------------------------------------------------------
# pre-processing


def normalize_intensity(vol: VoxelVolume) -> VoxelVolume:
    """Linear map of the data range onto [-1, 1]."""
    d = np.asarray(vol.data, dtype=np.float64)
    lo, hi = d.min(), d.max()
    if hi == lo:
        raise VolumeError("cannot normalize a constant volume")
    out = (d - lo) * (2.0 / (hi - lo)) - 1.0
    out[d == lo] = -1.0
    out[d == hi] = 1.0
    return vol.with_data(out)


def resample(vol: VoxelVolume, new_dims) -> VoxelVolume:
    """Trilinear resampling to ``new_dims`` keeping the voxel-centre extent."""
    new_dims = tuple(int(n) for n in new_dims)
    if min(new_dims) < 2:
        raise VolumeError(f"new_dims must be >= 2 per axis, got {new_dims}")
    axes = [np.linspace(0.0, n - 1, m) for n, m in zip(vol.dims, new_dims)]
    coords = np.meshgrid(*axes, indexing="ij")
    data = ndimage.map_coordinates(np.asarray(vol.data, dtype=np.float64), coords, order=1, mode="nearest")
    spacing = tuple(s * (n - 1) / (m - 1) for s, n, m in zip(vol.spacing, vol.dims, new_dims))
    return VoxelVolume(data, spacing, vol.origin)


def kept_slice_indices(n: int, step: int) -> np.ndarray:
    return np.arange(0, n, step)


def downsample_slices(vol: VoxelVolume, axis: int, slice_thickness_mm: float) -> VoxelVolume:
    """Simulate thick slices: keep every k-th slice along ``axis`` then re-interpolate linearly."""
    sp = vol.spacing[axis]
    n = vol.dims[axis]
    if slice_thickness_mm < sp:
        raise VolumeError(f"slice thickness {slice_thickness_mm} below spacing {sp}")
    if slice_thickness_mm > n * sp:
        raise VolumeError(f"slice thickness {slice_thickness_mm} exceeds volume extent {n * sp}")
    k = max(1, int(round(slice_thickness_mm / sp)))
    if k == 1:
        return vol.with_data(np.array(vol.data, dtype=np.float64))
    kept = kept_slice_indices(n, k)
    thick = np.take(np.asarray(vol.data, dtype=np.float64), kept, axis=axis)
    # fractional position of each original slice among the kept ones, clamped past the last
    pos = np.minimum(np.arange(n) / k, len(kept) - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, len(kept) - 1)
    t = pos - lo
    shape = [1, 1, 1]
    shape[axis] = n
    t = t.reshape(shape)
    a = np.take(thick, lo, axis=axis)
    out = a + t * (np.take(thick, hi, axis=axis) - a)
    return vol.with_data(out)


# ---------------------------------------------------------------------------
# differentiable sampling


def trilinear_sample(features: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    """Sample a (C, D, H, W) grid at (N, 3) continuous voxel coordinates.

    Returns (N, C). Points outside the grid are clamped to the boundary voxel
    layer. Differentiable w.r.t. both ``features`` and ``points``.
    """
    if features.dim() != 4 or points.dim() != 2 or points.shape[1] != 3:
        raise ValueError(f"trilinear_sample: incompatible shapes {tuple(features.shape)} and {tuple(points.shape)}")
    c = features.shape[0]
    dims = features.shape[1:]
    flat = features.reshape(c, -1)
    base, frac = [], []
    for ax in range(3):
        n = dims[ax]
        p = points[:, ax].clamp(0, n - 1)
        if n == 1:
            base.append(torch.zeros_like(p, dtype=torch.long))
            frac.append(torch.zeros_like(p))
            continue
        i0 = torch.floor(p.detach()).long().clamp(0, n - 2)
        base.append(i0)
        frac.append(p - i0.to(p.dtype))
    strides = (dims[1] * dims[2], dims[2], 1)
    out = 0
    for corner in range(8):
        offs = ((corner >> 2) & 1, (corner >> 1) & 1, corner & 1)
        idx = 0
        w = 1
        for ax in range(3):
            o = offs[ax] if dims[ax] > 1 else 0
            idx = idx + (base[ax] + o) * strides[ax]
            w = w * (frac[ax] if offs[ax] else (1 - frac[ax]))
        out = out + flat[:, idx] * w
    return out.t()


# ---------------------------------------------------------------------------
# iso-surfaces


def marching_cubes(vol: VoxelVolume, iso: float = 0.5, inside: str = "above") -> TriMesh:
    """Iso-surface in world coordinates, oriented outward from the ``inside`` region.

    ``inside="above"`` treats values greater than ``iso`` as interior (occupancy,
    intensity); use ``"below"`` for signed distance fields.
    """
    from skimage import measure

    d = np.array(vol.data, dtype=np.float64)
    if not (d.min() < iso < d.max()):
        raise VolumeError(f"empty iso-surface: iso {iso} outside data range [{d.min()}, {d.max()}]")
    d[d == iso] += 1e-9
    verts, faces, _, _ = measure.marching_cubes(d, level=iso, allow_degenerate=False, method="lewiner")
    faces = faces.astype(np.int64)
    mesh = TriMesh(vol.voxel_to_world(verts), faces)
    return _orient_outward(mesh, d, iso, inside == "above", vol)


def _orient_outward(mesh: TriMesh, d: np.ndarray, iso: float, above: bool, vol: VoxelVolume) -> TriMesh:
    # compare each face normal with the field gradient at the face centroid
    v = vol.world_to_voxel(mesh.vertices)
    cent = v[mesh.faces].mean(axis=1)
    grads = np.stack(np.gradient(d), axis=0)
    g = np.stack([ndimage.map_coordinates(grads[a], cent.T, order=1, mode="nearest") for a in range(3)], axis=1)
    fn = np.cross(v[mesh.faces[:, 1]] - v[mesh.faces[:, 0]], v[mesh.faces[:, 2]] - v[mesh.faces[:, 0]])
    score = np.einsum("ij,ij->", fn, g)
    # outward normals point down the gradient when the interior is above iso
    flip = score > 0 if above else score < 0
    if flip:
        return TriMesh(mesh.vertices, mesh.faces[:, ::-1], mesh.structure_id)
    return mesh


# ---------------------------------------------------------------------------
# voxelization


def _tie_inclusive(dx, dy):
    return (dy < 0) | ((dy == 0) & (dx > 0))


def voxelize(mesh: TriMesh, reference: VoxelVolume) -> VoxelVolume:
    """Binary volume: 1 where the voxel centre lies inside the closed mesh.

    Rays are cast along the third axis. Edge functions are evaluated from a
    canonical endpoint order so shared edges agree bitwise, and a top-left tie
    rule makes every ray cross a shared edge or vertex exactly once.
    """
    if mesh.n_faces == 0 or not mesh.is_watertight():
        raise MeshError("voxelize requires a closed (watertight) mesh")
    nx, ny, nz = reference.dims
    v = reference.world_to_voxel(mesh.vertices)
    f = mesh.faces
    p = v[f]  # (F, 3, 3)
    i0 = np.clip(np.ceil(p[:, :, 0].min(axis=1)), 0, nx).astype(np.int64)
    j0 = np.clip(np.ceil(p[:, :, 1].min(axis=1)), 0, ny).astype(np.int64)
    hi = np.floor(p[:, :, :2].max(axis=1))
    i1 = np.clip(hi[:, 0], -1, nx - 1).astype(np.int64)
    j1 = np.clip(hi[:, 1], -1, ny - 1).astype(np.int64)
    ni = np.maximum(i1 - i0 + 1, 0)
    nj = np.maximum(j1 - j0 + 1, 0)
    counts = ni * nj
    out = np.zeros((nx, ny, nz + 1), dtype=np.int64)
    if counts.sum() == 0:
        return reference.with_data(np.zeros((nx, ny, nz), dtype=np.uint8))
    fid = np.repeat(np.arange(len(f)), counts)
    local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    ci = i0[fid] + local // nj[fid]
    cj = j0[fid] + local % nj[fid]
    px = ci.astype(np.float64)
    py = cj.astype(np.float64)

    pf = p[fid]
    vf = f[fid]
    area2 = (pf[:, 1, 0] - pf[:, 0, 0]) * (pf[:, 2, 1] - pf[:, 0, 1]) - (pf[:, 2, 0] - pf[:, 0, 0]) * (pf[:, 1, 1] - pf[:, 0, 1])
    o = np.sign(area2)
    inside = o != 0
    for a, b in ((0, 1), (1, 2), (2, 0)):
        forward = vf[:, a] < vf[:, b]
        s_lo = np.where(forward, a, b)
        s_hi = np.where(forward, b, a)
        rows = np.arange(len(fid))
        plo = pf[rows, s_lo]
        phi = pf[rows, s_hi]
        ex = phi[:, 0] - plo[:, 0]
        ey = phi[:, 1] - plo[:, 1]
        e = ex * (py - plo[:, 1]) - ey * (px - plo[:, 0])
        sgn = np.where(forward, 1.0, -1.0) * o
        e_eff = e * sgn
        inside &= (e_eff > 0) | ((e_eff == 0) & _tie_inclusive(ex * sgn, ey * sgn))
    if inside.any():
        pf, px, py, ci, cj, o = pf[inside], px[inside], py[inside], ci[inside], cj[inside], o[inside]
        # height of the triangle plane above the column
        a, b, c = pf[:, 0], pf[:, 1], pf[:, 2]
        n = np.cross(b - a, c - a)
        zc = a[:, 2] - (n[:, 0] * (px - a[:, 0]) + n[:, 1] * (py - a[:, 1])) / n[:, 2]
        m = np.clip(np.ceil(zc), 0, nz).astype(np.int64)
        keep = m >= 1
        np.add.at(out, (ci[keep], cj[keep], m[keep] - 1), o[keep].astype(np.int64))
    winding = np.cumsum(out[:, :, ::-1], axis=2)[:, :, ::-1][:, :, :nz]
    return reference.with_data((winding != 0).astype(np.uint8))
