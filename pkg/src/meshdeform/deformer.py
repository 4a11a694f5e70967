"""Sphere-template initialization and the three-block mesh deformation network."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from . import autodiff as ad
from .encoder import EncoderConfig, ImageEncoder, OccupancyDecoder
from .graphnet import GraphConvLayer, GraphResidualBlock, graph_conv, graph_residual_block
from .losses import MeshTopology, StructureStats
from .mesh import GraphOperator, TriMesh, build_graph_operator, icosphere
from .volume import VoxelVolume, trilinear_sample


@dataclass
class Template:
    mesh: TriMesh
    op: GraphOperator
    centroid: np.ndarray
    radius: float


class TemplateSet:
    """One icosphere per structure, placed at the training-set mean centroid and radius."""

    def __init__(self, templates: list[Template], subdivisions: int):
        self.templates = templates
        self.subdivisions = subdivisions
        self.op = GraphOperator.block_diag([t.op for t in templates])
        self.topologies = [MeshTopology(t.mesh) for t in templates]
        sizes = [t.mesh.n_vertices for t in templates]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)])

    def __len__(self):
        return len(self.templates)

    @property
    def meshes(self) -> list[TriMesh]:
        return [t.mesh for t in self.templates]

    def stacked_vertices(self) -> np.ndarray:
        return np.concatenate([t.mesh.vertices for t in self.templates])

    def split(self, x):
        return [x[self.offsets[i]:self.offsets[i + 1]] for i in range(len(self))]

    @classmethod
    def from_params(cls, centroids, radii, subdivisions: int) -> "TemplateSet":
        temps = []
        for sid, (c, r) in enumerate(zip(np.asarray(centroids), np.asarray(radii))):
            mesh = icosphere(subdivisions, c, float(r), structure_id=sid)
            temps.append(Template(mesh, build_graph_operator(mesh), np.asarray(c, dtype=np.float64), float(r)))
        return cls(temps, subdivisions)


def fit_templates(training_meshes: list[list[TriMesh]], subdivisions: int = 3) -> TemplateSet:
    """Mean vertex centroid and mean centroid-to-surface distance per structure.

    ``training_meshes[i]`` lists the ground-truth meshes of structure ``i``.
    """
    centroids, radii = [], []
    for sid, meshes in enumerate(training_meshes):
        if not meshes:
            raise ValueError(f"structure {sid} has no training meshes")
        cents = [m.vertices.mean(axis=0) for m in meshes]
        rads = [np.linalg.norm(m.vertices - c, axis=1).mean() for m, c in zip(meshes, cents)]
        centroids.append(np.mean(cents, axis=0))
        radii.append(float(np.mean(rads)))
    return TemplateSet.from_params(centroids, radii, subdivisions)


def structure_stats(training_meshes: list[list[TriMesh]], templates: TemplateSet) -> list[StructureStats]:
    """Target edge length: template edge length scaled by the area ratio to the mean ground truth."""
    out = []
    for meshes, t in zip(training_meshes, templates.templates):
        area = np.mean([m.surface_area() for m in meshes])
        mu = t.mesh.mean_edge_length() * np.sqrt(area / t.mesh.surface_area())
        out.append(StructureStats(float(mu), tuple(float(x) for x in t.centroid), t.radius))
    return out


@dataclass
class DeformerConfig:
    block_feature_dims: list = field(default_factory=lambda: [96, 64, 32])
    pyramid_levels_per_block: list | None = None
    displacement_scale: float = 0.1

    def __post_init__(self):
        self.block_feature_dims = list(self.block_feature_dims)
        if len(self.block_feature_dims) != 3:
            raise ValueError("exactly 3 deformation blocks are supported")
        if any(b > a for a, b in zip(self.block_feature_dims, self.block_feature_dims[1:])):
            raise ValueError(f"block feature dims must be decreasing, got {self.block_feature_dims}")

    def levels(self, n_levels: int) -> list[int]:
        if self.pyramid_levels_per_block is not None:
            return list(self.pyramid_levels_per_block)
        return [n_levels - 1, n_levels - 2, n_levels - 3]


class DeformationBlock(nn.Module):
    """Gather image features, mix with vertex features, predict a displacement."""

    def __init__(self, d_vert: int, d_img: int, dim: int, g: torch.Generator, dtype):
        super().__init__()
        self.proj = GraphConvLayer(d_vert + d_img, dim, "relu", g, dtype)
        self.res = nn.ModuleList([GraphResidualBlock(dim, g, dtype) for _ in range(3)])
        self.deform = GraphConvLayer(dim, 3, "none", g, dtype)


def deformation_block(block: DeformationBlock, coords: torch.Tensor, vert_feats: torch.Tensor,
                      feature_map: torch.Tensor, level: int, op: GraphOperator, volume_geom: VoxelVolume,
                      displacement_scale: float = 1.0) -> tuple[torch.Tensor, torch.Tensor]:
    """One deformation step.

    ``coords`` is (N, 3) in world mm; ``vert_feats`` is (d, N). Returns the
    displaced coordinates and the new (dim, N) vertex features.
    """
    dtype = feature_map.dtype
    origin = torch.tensor(volume_geom.origin, dtype=coords.dtype)
    spacing = torch.tensor(volume_geom.spacing, dtype=coords.dtype)
    vox = ((coords - origin) / spacing / (2 ** level)).to(dtype)
    img = trilinear_sample(feature_map, vox).t()
    h = graph_conv(block.proj, op, ad.concat([vert_feats, img], axis=0))
    for rb in block.res:
        h = graph_residual_block(rb, op, h)
    delta = graph_conv(block.deform, op, h).t().to(coords.dtype)
    if displacement_scale != 1.0:
        delta = delta * displacement_scale
    return coords + delta, h


def lift_vertices(template_coords: torch.Tensor, op: GraphOperator, lift_layer: GraphConvLayer) -> torch.Tensor:
    """Graph convolution of the (3, N) coordinate matrix into (d, N) vertex features."""
    return graph_conv(lift_layer, op, template_coords)


class MeshDeformNet(nn.Module):
    """Image encoder, occupancy decoder and three shared mesh deformation blocks."""

    def __init__(self, enc_cfg: EncoderConfig | None = None, def_cfg: DeformerConfig | None = None,
                 seed: int = 0, dtype=torch.float32):
        super().__init__()
        self.enc_cfg = enc_cfg or EncoderConfig()
        self.def_cfg = def_cfg or DeformerConfig()
        self.dtype = dtype
        g = ad.torch_rng(seed, "init")
        self.encoder = ImageEncoder(self.enc_cfg, g, dtype)
        self.decoder = OccupancyDecoder(self.enc_cfg, g, dtype)
        dims = self.def_cfg.block_feature_dims
        levels = self.def_cfg.levels(self.enc_cfg.levels)
        filt = self.enc_cfg.filters_per_level
        self.lift = GraphConvLayer(3, dims[0], "relu", g, dtype)
        d_vert = [dims[0], dims[0], dims[1]]
        self.blocks = nn.ModuleList(
            [DeformationBlock(d_vert[b], filt[levels[b]], dims[b], g, dtype) for b in range(3)]
        )
        self.encoder.dropout_generator = ad.torch_rng(seed, "dropout")

    def config_dict(self) -> dict:
        return {"encoder": asdict(self.enc_cfg), "deformer": asdict(self.def_cfg),
                "dtype": "f64" if self.dtype == torch.float64 else "f32"}

    def forward(self, image: VoxelVolume | torch.Tensor, templates: TemplateSet, geom: VoxelVolume | None = None):
        """Returns ``(blocks, occupancy)``.

        ``blocks[b]`` lists per-structure (N_i, 3) float64 coordinate tensors
        after block ``b``; ``occupancy`` is the (1, D, H, W) probability map.
        """
        if isinstance(image, VoxelVolume):
            geom = image
            x = torch.as_tensor(np.asarray(image.data), dtype=self.dtype)[None]
        else:
            x = image
        if geom is None:
            raise ValueError("volume geometry required when passing a raw tensor")
        pyramid = self.encoder(x)
        occupancy = self.decoder(pyramid)
        op = templates.op
        coords = torch.tensor(templates.stacked_vertices())
        center = torch.from_numpy(geom.center)
        half = torch.from_numpy(np.maximum(0.5 * geom.extent, 1e-12))
        feats = lift_vertices(((coords - center) / half).t().to(self.dtype), op, self.lift)
        levels = self.def_cfg.levels(self.enc_cfg.levels)
        outputs = []
        for b, block in enumerate(self.blocks):
            coords, feats = deformation_block(block, coords, feats, pyramid[levels[b]], levels[b], op, geom,
                                              self.def_cfg.displacement_scale)
            outputs.append(templates.split(coords))
        return outputs, occupancy

    def deformation_parameters(self):
        """Weights of the final displacement convolutions."""
        for block in self.blocks:
            yield from block.deform.parameters()


def predict(model: MeshDeformNet, image: VoxelVolume, templates: TemplateSet):
    """Inference without dropout.

    Returns ``(block_meshes, occupancy)``: three lists of per-structure meshes
    (the last list is the final prediction) and the occupancy probabilities.
    """
    if len(templates) == 0:
        raise ValueError("template set is empty")
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            blocks, occ = model(image, templates)
    finally:
        model.train(was_training)
    meshes = [
        [t.mesh.with_vertices(c.numpy()) for t, c in zip(templates.templates, coords)] for coords in blocks
    ]
    return meshes, image.with_data(occ[0].to(torch.float64).numpy())
