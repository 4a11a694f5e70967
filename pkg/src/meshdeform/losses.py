"""Training objectives for occupancy and mesh predictions.

Mesh losses take the predicted vertex coordinates as an (N, 3) tensor together
with the fixed template topology, and the ground truth as a ``MeshTarget``.
Point, normal, edge and Laplacian losses are sums over vertices, not means.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.spatial import cKDTree

from .mesh import MeshError, TriMesh, uniform_mean_operator, vertex_normals

COMPONENTS = ("point", "normal", "edge", "lap")
LOSS_FLOOR = 1e-8
PROB_CLIP = 1e-7


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.3
    lambda2: float = 0.46
    lambda3: float = 0.16
    lambda4: float = 0.05

    def __post_init__(self):
        for name, v in zip(COMPONENTS, self.as_tuple()):
            if not 0 <= v <= 1:
                raise ValueError(f"weight for {name} loss must be in [0, 1], got {v}")

    def as_tuple(self) -> tuple:
        return (self.lambda1, self.lambda2, self.lambda3, self.lambda4)


@dataclass(frozen=True)
class StructureStats:
    mean_edge_length: float
    mean_centroid: tuple
    mean_radius: float

    def __post_init__(self):
        if self.mean_edge_length <= 0:
            raise ValueError("mean_edge_length must be positive")


class MeshTopology:
    """Fixed connectivity of a predicted mesh, precomputed for the losses."""

    def __init__(self, mesh: TriMesh):
        self.faces = mesh.faces
        self.n_vertices = mesh.n_vertices
        self.partners = face_partners(mesh.faces, mesh.n_vertices)
        e = mesh.edges()
        self.directed_edges = np.concatenate([e, e[:, ::-1]])
        self._mean_op = uniform_mean_operator(mesh).tocoo()
        self._cache: dict = {}

    def mean_operator(self, dtype) -> torch.Tensor:
        if dtype not in self._cache:
            m = self._mean_op
            idx = torch.from_numpy(np.vstack([m.row, m.col]).astype(np.int64))
            self._cache[dtype] = torch.sparse_coo_tensor(idx, torch.from_numpy(m.data).to(dtype), m.shape, check_invariants=False).coalesce()
        return self._cache[dtype]


class MeshTarget:
    """Ground-truth vertices with unit normals and a nearest-neighbour index."""

    def __init__(self, mesh: TriMesh, normals: np.ndarray | None = None):
        self.vertices = np.asarray(mesh.vertices, dtype=np.float64)
        self.normals = vertex_normals(mesh) if normals is None else np.asarray(normals, dtype=np.float64)
        self.tree = cKDTree(self.vertices)
        self._cache: dict = {}

    def tensors(self, dtype) -> tuple[torch.Tensor, torch.Tensor]:
        if dtype not in self._cache:
            self._cache[dtype] = (torch.tensor(self.vertices, dtype=dtype), torch.tensor(self.normals, dtype=dtype))
        return self._cache[dtype]


def face_partners(faces: np.ndarray, n_vertices: int) -> np.ndarray:
    """For each vertex, the other two corners of its lowest-index incident face, in CCW order."""
    partners = np.full((n_vertices, 2), -1, dtype=np.int64)
    flat = faces.ravel()
    verts, first = np.unique(flat, return_index=True)
    fi, corner = np.divmod(first, 3)
    partners[verts, 0] = faces[fi, (corner + 1) % 3]
    partners[verts, 1] = faces[fi, (corner + 2) % 3]
    missing = np.flatnonzero(partners[:, 0] < 0)
    if missing.size:
        raise MeshError(f"vertex {int(missing[0])} has no incident face")
    return partners


def _as_tensor(x, dtype=None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    if isinstance(x, TriMesh):
        x = x.vertices
    return torch.tensor(np.asarray(x, dtype=np.float64), dtype=dtype or torch.float64)


def occupancy_loss(pred: torch.Tensor, truth) -> torch.Tensor:
    """Voxelwise binary cross-entropy (summed) minus the soft Dice score."""
    truth = _as_tensor(truth, pred.dtype)
    if pred.shape != truth.shape:
        raise ValueError(f"occupancy_loss: incompatible shapes {tuple(pred.shape)} and {tuple(truth.shape)}")
    p = pred.clamp(PROB_CLIP, 1 - PROB_CLIP)
    bce = -(truth * torch.log(p) + (1 - truth) * torch.log(1 - p)).sum()
    dice = 2 * (truth * p).sum() / (truth.sum() + p.sum())
    return bce - dice


def nearest_indices(query: np.ndarray, tree_or_points) -> np.ndarray:
    tree = tree_or_points if isinstance(tree_or_points, cKDTree) else cKDTree(np.asarray(tree_or_points))
    _, idx = tree.query(query)
    return idx


def point_loss(P, G) -> torch.Tensor:
    """Symmetric Chamfer sum of squared nearest-neighbour distances."""
    p = _as_tensor(P)
    if isinstance(G, MeshTarget):
        g, _ = G.tensors(p.dtype)
        gtree = G.tree
    else:
        g = _as_tensor(G, p.dtype)
        gtree = cKDTree(g.detach().numpy())
    if len(p) == 0 or len(g) == 0:
        raise ValueError("point_loss needs non-empty point sets")
    pn = p.detach().numpy()
    to_g = nearest_indices(pn, gtree)
    to_p = nearest_indices(g.detach().numpy(), cKDTree(pn))
    return ((p - g[to_g]) ** 2).sum() + ((g - p[to_p]) ** 2).sum()


def normal_loss(coords, topology: MeshTopology, target: MeshTarget) -> torch.Tensor:
    """Squared difference between each vertex's unit face normal and the nearest ground-truth normal."""
    p = _as_tensor(coords)
    g_normals = target.tensors(p.dtype)[1]
    match = nearest_indices(p.detach().numpy(), target.tree)
    pr = topology.partners
    n = torch.linalg.cross(p[pr[:, 0]] - p, p[pr[:, 1]] - p, dim=1)
    n = n / n.norm(dim=1, keepdim=True).clamp_min(1e-12)
    return ((n - g_normals[match]) ** 2).sum()


def edge_loss(coords, topology: MeshTopology, mu: float) -> torch.Tensor:
    """Sum over directed edges of ``| |p - k|^2 - mu^2 |``."""
    if mu <= 0:
        raise ValueError("mu must be positive")
    p = _as_tensor(coords)
    e = topology.directed_edges
    sq = ((p[e[:, 0]] - p[e[:, 1]]) ** 2).sum(dim=1)
    return (sq - mu ** 2).abs().sum()


def laplacian_loss(coords, topology: MeshTopology) -> torch.Tensor:
    """Sum of squared distances between each vertex and its one-ring mean."""
    p = _as_tensor(coords)
    mean = torch.sparse.mm(topology.mean_operator(p.dtype), p)
    return ((p - mean) ** 2).sum()


def component_losses(coords, topology: MeshTopology, target: MeshTarget, mu: float) -> dict:
    return {
        "point": point_loss(coords, target),
        "normal": normal_loss(coords, topology, target),
        "edge": edge_loss(coords, topology, mu),
        "lap": laplacian_loss(coords, topology),
    }


def geometric_mean(components: dict, weights: LossWeights) -> torch.Tensor:
    """Weighted geometric combination ``prod_j max(L_j, floor) ** lambda_j``."""
    out = 1.0
    for name, lam in zip(COMPONENTS, weights.as_tuple()):
        out = out * components[name].clamp_min(LOSS_FLOOR) ** lam
    return out


def mesh_loss(coords_list, topologies, targets, weights: LossWeights, stats) -> tuple[torch.Tensor, dict]:
    """Sum over structures of the geometric-mean loss; also returns summed components."""
    if not len(coords_list) == len(topologies) == len(targets) == len(stats):
        raise ValueError("mesh_loss: predictions, topologies, targets and stats must align by structure")
    total = 0.0
    parts = {k: 0.0 for k in COMPONENTS}
    for coords, topo, target, st in zip(coords_list, topologies, targets, stats):
        comp = component_losses(coords, topo, target, st.mean_edge_length)
        total = total + geometric_mean(comp, weights)
        for k in COMPONENTS:
            parts[k] = parts[k] + comp[k].detach()
    return total, parts


def total_loss(blocks, topologies, targets, occ_pred, occ_truth, weights: LossWeights, stats) -> tuple[torch.Tensor, dict]:
    """Mesh loss of each of the three deformation blocks plus the occupancy loss."""
    if len(blocks) != 3:
        raise ValueError(f"total_loss expects 3 block predictions, got {len(blocks)}")
    occ = occupancy_loss(occ_pred, occ_truth)
    total = occ
    log = {"occ": occ.detach()}
    for b, coords_list in enumerate(blocks):
        ml, parts = mesh_loss(coords_list, topologies, targets, weights, stats)
        total = total + ml
        if b == len(blocks) - 1:
            log.update(parts)
    return total, log
