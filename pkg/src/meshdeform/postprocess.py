"""Clean-up of voxel segmentations and sealing of gaps between adjacent meshes."""

from __future__ import annotations

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .mesh import TriMesh
from .volume import VoxelVolume

AdjacencyMap = dict  # (structure_a, structure_b) -> sorted vertex indices on structure_a


def largest_component(mask: np.ndarray) -> np.ndarray:
    """Keep the largest 6-connected component of a boolean mask."""
    labels, n = ndimage.label(mask)
    if n <= 1:
        return mask.copy()
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    return labels == int(np.argmax(sizes))


def postprocess_segmentation(pred: VoxelVolume, kernel: int = 5) -> VoxelVolume:
    """Median filter then keep the largest 6-connected component."""
    data = np.asarray(pred.data)
    if not np.isin(data, (0, 1)).all():
        raise ValueError("postprocess_segmentation expects a binary volume")
    mask = ndimage.median_filter(data.astype(np.uint8), size=kernel, mode="constant") > 0
    return pred.with_data(largest_component(mask).astype(data.dtype))


def build_adjacency(scenes: list[list[TriMesh]], tau: float | None = None, min_fraction: float = 0.5) -> AdjacencyMap:
    """Vertices of each structure lying within ``tau`` of another structure.

    ``scenes[k][i]`` is the mesh of structure ``i`` in scene ``k``; all meshes of
    one structure must share vertex indexing. Vertex ``v`` of structure ``a`` is
    listed for ``(a, b)`` when its distance to the nearest vertex of ``b`` is
    below ``tau`` in at least ``min_fraction`` of the scenes. ``tau`` defaults
    to twice the mean edge length over all meshes.
    """
    if not scenes:
        return {}
    n_struct = len(scenes[0])
    if tau is None:
        tau = 2.0 * float(np.mean([m.mean_edge_length() for sc in scenes for m in sc]))
    adj: AdjacencyMap = {}
    if tau <= 0:
        return adj
    for a in range(n_struct):
        for b in range(n_struct):
            if a == b:
                continue
            counts = np.zeros(scenes[0][a].n_vertices, dtype=np.int64)
            for sc in scenes:
                d, _ = cKDTree(sc[b].vertices).query(sc[a].vertices)
                counts += d < tau
            idx = np.flatnonzero(counts >= min_fraction * len(scenes))
            if idx.size:
                adj[(a, b)] = idx
    return adj


def close_gaps(meshes: list[TriMesh], adj: AdjacencyMap) -> list[TriMesh]:
    """Snap listed vertices onto the nearest vertex of the paired structure.

    Targets are taken from the unmodified input meshes, so the result does not
    depend on the order of the pairs except where a vertex is listed twice
    (the later pair wins).
    """
    new = [np.array(m.vertices) for m in meshes]
    for (a, b), idx in sorted(adj.items()):
        if len(idx) == 0:
            continue
        _, nn = cKDTree(meshes[b].vertices).query(meshes[a].vertices[idx])
        new[a][idx] = meshes[b].vertices[nn]
    return [m.with_vertices(v) for m, v in zip(meshes, new)]
