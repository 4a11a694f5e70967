"""Synthetic multi-structure scenes with analytic ground truth.

Each structure is a randomly perturbed superellipsoid placed according to a
fixed relative layout, so positions and sizes are consistent across scenes
like anatomy is across a population.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from .autodiff import numpy_rng
from .mesh import TriMesh, laplacian_smooth, read_obj, write_obj
from .volume import VoxelVolume, marching_cubes, normalize_intensity, read_rvol, write_rvol

# centre (fraction of extent) and semi-axes (fraction of extent) per structure
LAYOUT = [
    ((0.40, 0.50, 0.60), (0.25, 0.22, 0.22)),
    ((0.64, 0.50, 0.28), (0.20, 0.19, 0.18)),
    ((0.30, 0.25, 0.30), (0.16, 0.15, 0.15)),
    ((0.30, 0.76, 0.30), (0.16, 0.15, 0.15)),
    ((0.70, 0.75, 0.68), (0.14, 0.13, 0.13)),
    ((0.70, 0.25, 0.68), (0.14, 0.13, 0.13)),
    ((0.50, 0.50, 0.15), (0.12, 0.11, 0.11)),
]
MAX_STRUCTURES = len(LAYOUT)


@dataclass
class SyntheticConfig:
    dims: int = 32
    spacing: float = 1.0
    center_jitter: float = 0.04
    radius_jitter: float = 0.10
    rotation_deg: float = 12.0
    exponent_range: tuple = (2.0, 2.6)
    contrast: list = field(default_factory=lambda: [1.0, 0.75, 0.55, 0.85, 0.65, 0.9, 0.6])
    background: float = 0.15
    blur_sigma: float = 0.7
    noise_sigma: float = 0.04
    bias_amplitude: float = 0.08
    overlap_tolerance: float = 0.02
    smoothing_iterations: int = 10


@dataclass
class StructureShape:
    center: np.ndarray
    semi_axes: np.ndarray
    rotation: np.ndarray
    exponent: float

    def implicit(self, points: np.ndarray) -> np.ndarray:
        """Negative inside, zero on the surface, roughly a fraction of the semi-axis outside."""
        q = (points - self.center) @ self.rotation / self.semi_axes
        e = self.exponent
        return (np.abs(q) ** e).sum(axis=-1) ** (1.0 / e) - 1.0

    def gradient(self, points: np.ndarray, h: float = 1e-5) -> np.ndarray:
        g = np.empty_like(points)
        for a in range(3):
            d = np.zeros(3)
            d[a] = h
            g[:, a] = (self.implicit(points + d) - self.implicit(points - d)) / (2 * h)
        return g

    def project(self, points: np.ndarray, iterations: int = 8) -> np.ndarray:
        """Newton steps onto the zero level set."""
        x = points.copy()
        for _ in range(iterations):
            f = self.implicit(x)
            g = self.gradient(x)
            x -= (f / np.maximum((g * g).sum(axis=1), 1e-12))[:, None] * g
        return x

    def to_dict(self) -> dict:
        return {"center": self.center.tolist(), "semi_axes": self.semi_axes.tolist(),
                "rotation": self.rotation.tolist(), "exponent": self.exponent}


@dataclass
class SceneSpec:
    image: VoxelVolume
    occupancy: VoxelVolume
    structure_occupancy: list
    meshes: list
    shapes: list

    @property
    def n_structures(self) -> int:
        return len(self.meshes)


def _draw_shapes(n_structures: int, extent: np.ndarray, cfg: SyntheticConfig, rng) -> list[StructureShape]:
    shapes = []
    for sid in range(n_structures):
        c_frac, a_frac = LAYOUT[sid]
        center = np.array(c_frac) * extent + rng.uniform(-1, 1, 3) * cfg.center_jitter * extent
        axes = np.array(a_frac) * extent * (1 + rng.uniform(-1, 1, 3) * cfg.radius_jitter)
        rot = Rotation.from_rotvec(
            rng.normal(size=3) / np.sqrt(3) * np.deg2rad(cfg.rotation_deg)
        ).as_matrix()
        exponent = rng.uniform(*cfg.exponent_range)
        shapes.append(StructureShape(center, axes, rot, float(exponent)))
    return shapes


def _structure_mesh(shape: StructureShape, geom: VoxelVolume, cfg: SyntheticConfig, sid: int) -> TriMesh:
    f = shape.implicit(geom.voxel_centers())
    mesh = marching_cubes(geom.with_data(f), 0.0, inside="below")
    mesh = laplacian_smooth(mesh, cfg.smoothing_iterations, 0.5)
    return TriMesh(shape.project(mesh.vertices), mesh.faces, sid)


def make_scene(n_structures: int, cfg: SyntheticConfig, rng) -> SceneSpec:
    if not 1 <= n_structures <= MAX_STRUCTURES:
        raise ValueError(f"n_structures must be in [1, {MAX_STRUCTURES}], got {n_structures}")
    geom = VoxelVolume(np.zeros((cfg.dims,) * 3), (cfg.spacing,) * 3)
    centers = geom.voxel_centers()
    extent = geom.extent
    for _ in range(100):
        shapes = _draw_shapes(n_structures, extent, cfg, rng)
        occs = [(s.implicit(centers) < 0) for s in shapes]
        if any(o[0, :, :].any() or o[-1, :, :].any() or o[:, 0].any() or o[:, -1].any()
               or o[:, :, 0].any() or o[:, :, -1].any() for o in occs):
            continue
        ok = True
        for i in range(n_structures):
            for j in range(i + 1, n_structures):
                inter = np.logical_and(occs[i], occs[j]).sum()
                if inter > cfg.overlap_tolerance * min(occs[i].sum(), occs[j].sum()):
                    ok = False
        if ok:
            break
    else:
        raise RuntimeError("could not place non-overlapping structures in 100 attempts")

    # later structures do not overwrite earlier ones in the label map
    labels = np.full(geom.dims, -1)
    for sid in range(n_structures - 1, -1, -1):
        labels[occs[sid]] = sid
    contrast = np.array(cfg.contrast)
    intensity = np.where(labels >= 0, contrast[np.maximum(labels, 0) % len(contrast)], cfg.background)
    if cfg.blur_sigma > 0:
        intensity = ndimage.gaussian_filter(intensity, cfg.blur_sigma, mode="nearest")
    if cfg.bias_amplitude > 0:
        u = (centers - geom.center) / np.maximum(extent / 2, 1e-12)
        coef = rng.uniform(-1, 1, 6)
        bias = (u[..., 0] * coef[0] + u[..., 1] * coef[1] + u[..., 2] * coef[2]
                + 0.5 * (u[..., 0] ** 2 * coef[3] + u[..., 1] ** 2 * coef[4] + u[..., 2] ** 2 * coef[5]))
        intensity = intensity * (1 + cfg.bias_amplitude * bias)
    if cfg.noise_sigma > 0:
        intensity = intensity + rng.normal(0, cfg.noise_sigma, intensity.shape)
    image = normalize_intensity(geom.with_data(intensity))
    union = np.any(occs, axis=0).astype(np.uint8)
    meshes = [_structure_mesh(s, geom, cfg, sid) for sid, s in enumerate(shapes)]
    return SceneSpec(
        image=image,
        occupancy=geom.with_data(union),
        structure_occupancy=[geom.with_data(o.astype(np.uint8)) for o in occs],
        meshes=meshes,
        shapes=shapes,
    )


def gen_synthetic_dataset(n_scenes: int, n_structures: int, dims: int = 32, seed: int = 0,
                          cfg: SyntheticConfig | None = None) -> list[SceneSpec]:
    """Reproducible list of scenes; the same seed gives identical scenes."""
    cfg = cfg or SyntheticConfig()
    if cfg.dims != dims:
        cfg = SyntheticConfig(**{**asdict(cfg), "dims": dims})
    rng = numpy_rng(seed, "data")
    return [make_scene(n_structures, cfg, rng) for _ in range(n_scenes)]


def save_dataset(root, scenes: list[SceneSpec], manifest: dict) -> None:
    """Write ``scene_<k>/{image,occupancy}.rvol``, ``scene_<k>/gt_s<i>.obj`` and ``manifest.json``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for k, sc in enumerate(scenes):
        d = root / f"scene_{k}"
        d.mkdir(exist_ok=True)
        write_rvol(d / "image.rvol", sc.image, "f32")
        write_rvol(d / "occupancy.rvol", sc.occupancy, "u8")
        for sid, m in enumerate(sc.meshes):
            write_obj(d / f"gt_s{sid}.obj", m)
            write_rvol(d / f"occupancy_s{sid}.rvol", sc.structure_occupancy[sid], "u8")
    manifest = {**manifest, "n_scenes": len(scenes)}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_dataset(root) -> tuple[list[SceneSpec], dict]:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    scenes = []
    for k in range(manifest["n_scenes"]):
        d = root / f"scene_{k}"
        meshes = sorted(d.glob("gt_s*.obj"), key=lambda p: int(p.stem[4:]))
        n = len(meshes)
        scenes.append(SceneSpec(
            image=read_rvol(d / "image.rvol"),
            occupancy=read_rvol(d / "occupancy.rvol"),
            structure_occupancy=[read_rvol(d / f"occupancy_s{i}.rvol") for i in range(n)],
            meshes=[read_obj(p) for p in meshes],
            shapes=[],
        ))
    return scenes, manifest
