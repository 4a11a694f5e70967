"""Segmentation overlap, surface distance and mesh quality metrics."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np
from scipy.spatial import cKDTree

from .mesh import TriMesh, neighbor_lists, vertex_normals
from .volume import VoxelVolume, voxelize

# ---------------------------------------------------------------------------
# overlap


def _mask(x) -> np.ndarray:
    data = x.data if isinstance(x, VoxelVolume) else x
    return np.asarray(data).astype(bool)


def dice(pred, truth) -> float:
    p, g = _mask(pred), _mask(truth)
    if p.shape != g.shape:
        raise ValueError(f"dice: incompatible shapes {p.shape} and {g.shape}")
    denom = p.sum() + g.sum()
    if denom == 0:
        return 1.0
    return float(2 * np.logical_and(p, g).sum() / denom)


def jaccard(pred, truth) -> float:
    p, g = _mask(pred), _mask(truth)
    if p.shape != g.shape:
        raise ValueError(f"jaccard: incompatible shapes {p.shape} and {g.shape}")
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


# ---------------------------------------------------------------------------
# surface distances


def sample_surface(mesh: TriMesh, density: float, seed: int = 0) -> np.ndarray:
    """Vertices plus area-proportional random surface points (``density`` per mm^2)."""
    areas = mesh.face_areas()
    n = int(np.ceil(areas.sum() * density))
    rng = np.random.default_rng(seed)
    fi = rng.choice(len(areas), size=n, p=areas / areas.sum())
    r1, r2 = rng.random(n), rng.random(n)
    s = np.sqrt(r1)
    w = np.stack([1 - s, s * (1 - r2), s * r2], axis=1)
    tri = mesh.vertices[mesh.faces[fi]]
    return np.concatenate([mesh.vertices, np.einsum("nk,nkd->nd", w, tri)])


def _points(x, density: float | None) -> np.ndarray:
    if isinstance(x, TriMesh):
        return sample_surface(x, density) if density else np.asarray(x.vertices, dtype=np.float64)
    return np.asarray(x, dtype=np.float64)


def directed_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """For each point of ``a``, the distance to its nearest point of ``b``."""
    d, _ = cKDTree(b).query(a)
    return d


def assd(P, G, sample_density: float | None = None) -> float:
    """Average of the two directed mean nearest-point distances (mm)."""
    p, g = _points(P, sample_density), _points(G, sample_density)
    return float(0.5 * (directed_distances(p, g).mean() + directed_distances(g, p).mean()))


def hd(P, G, sample_density: float | None = None) -> float:
    """Symmetric Hausdorff distance between point sets (mm)."""
    p, g = _points(P, sample_density), _points(G, sample_density)
    return float(max(directed_distances(p, g).max(), directed_distances(g, p).max()))


def ane(P: TriMesh, G: TriMesh, normals_p=None, normals_g=None) -> float:
    """Mean of ``1 - <n_p, n_g>`` with g the nearest ground-truth vertex to p."""
    n_p = vertex_normals(P) if normals_p is None else np.asarray(normals_p)
    n_g = vertex_normals(G) if normals_g is None else np.asarray(normals_g)
    _, idx = cKDTree(G.vertices).query(P.vertices)
    return float(np.mean(1.0 - np.einsum("ij,ij->i", n_p, n_g[idx])))


def anld_per_vertex(P: TriMesh) -> np.ndarray:
    """|p - mean(neighbours)| divided by the mean incident edge length, per vertex."""
    v = P.vertices
    out = np.empty(P.n_vertices)
    for i, nb in enumerate(neighbor_lists(P)):
        k = v[nb]
        out[i] = np.linalg.norm(v[i] - k.mean(axis=0)) / np.linalg.norm(v[i] - k, axis=1).mean()
    return out


def anld(P: TriMesh) -> float:
    """Mean over vertices of the normalized Laplacian displacement."""
    return float(anld_per_vertex(P).mean())


# ---------------------------------------------------------------------------
# exact orientation predicates

_EPS = np.finfo(np.float64).eps
_O3_BOUND = (7 + 56 * _EPS) * _EPS
_O2_BOUND = (3 + 16 * _EPS) * _EPS


def _orient3d_exact(a, b, c, d) -> int:
    a, b, c, d = ([Fraction(float(x)) for x in p] for p in (a, b, c, d))
    ad_ = [a[i] - d[i] for i in range(3)]
    bd = [b[i] - d[i] for i in range(3)]
    cd = [c[i] - d[i] for i in range(3)]
    det = (ad_[0] * (bd[1] * cd[2] - bd[2] * cd[1])
           - ad_[1] * (bd[0] * cd[2] - bd[2] * cd[0])
           + ad_[2] * (bd[0] * cd[1] - bd[1] * cd[0]))
    return (det > 0) - (det < 0)


def orient3d(a, b, c, d) -> np.ndarray:
    """Sign of det[a-d, b-d, c-d] for stacked (n, 3) inputs, exact.

    A floating-point filter decides most cases; the rest are recomputed with
    rational arithmetic.
    """
    a, b, c, d = (np.atleast_2d(np.asarray(x, dtype=np.float64)) for x in (a, b, c, d))
    ad_, bd, cd = a - d, b - d, c - d
    m1 = bd[:, 1] * cd[:, 2] - bd[:, 2] * cd[:, 1]
    m2 = bd[:, 0] * cd[:, 2] - bd[:, 2] * cd[:, 0]
    m3 = bd[:, 0] * cd[:, 1] - bd[:, 1] * cd[:, 0]
    det = ad_[:, 0] * m1 - ad_[:, 1] * m2 + ad_[:, 2] * m3
    perm = (np.abs(ad_[:, 0]) * (np.abs(bd[:, 1] * cd[:, 2]) + np.abs(bd[:, 2] * cd[:, 1]))
            + np.abs(ad_[:, 1]) * (np.abs(bd[:, 0] * cd[:, 2]) + np.abs(bd[:, 2] * cd[:, 0]))
            + np.abs(ad_[:, 2]) * (np.abs(bd[:, 0] * cd[:, 1]) + np.abs(bd[:, 1] * cd[:, 0])))
    sign = np.sign(det).astype(np.int64)
    unsure = np.abs(det) <= _O3_BOUND * perm
    for i in np.flatnonzero(unsure):
        sign[i] = _orient3d_exact(a[i], b[i], c[i], d[i])
    return sign


def orient2d(a, b, c) -> int:
    """Exact sign of the 2D orientation of three points."""
    det = (a[0] - c[0]) * (b[1] - c[1]) - (a[1] - c[1]) * (b[0] - c[0])
    perm = abs((a[0] - c[0]) * (b[1] - c[1])) + abs((a[1] - c[1]) * (b[0] - c[0]))
    if abs(det) > _O2_BOUND * perm:
        return int(np.sign(det))
    a, b, c = ([Fraction(float(x)) for x in p] for p in (a, b, c))
    det = (a[0] - c[0]) * (b[1] - c[1]) - (a[1] - c[1]) * (b[0] - c[0])
    return (det > 0) - (det < 0)


def _on_segment_2d(p, q, r) -> bool:
    """r collinear with pq; is it within the closed segment?"""
    return min(p[0], q[0]) <= r[0] <= max(p[0], q[0]) and min(p[1], q[1]) <= r[1] <= max(p[1], q[1])


def _segments_intersect_2d(p1, p2, q1, q2) -> bool:
    d1, d2 = orient2d(q1, q2, p1), orient2d(q1, q2, p2)
    d3, d4 = orient2d(p1, p2, q1), orient2d(p1, p2, q2)
    if d1 * d2 < 0 and d3 * d4 < 0:
        return True
    return ((d1 == 0 and _on_segment_2d(q1, q2, p1)) or (d2 == 0 and _on_segment_2d(q1, q2, p2))
            or (d3 == 0 and _on_segment_2d(p1, p2, q1)) or (d4 == 0 and _on_segment_2d(p1, p2, q2)))


def _point_in_triangle_2d(p, a, b, c) -> bool:
    s = (orient2d(a, b, p), orient2d(b, c, p), orient2d(c, a, p))
    return not (min(s) < 0 < max(s))


def _coplanar_segment_triangle(p, q, tri) -> bool:
    a, b, c = tri
    normal = np.abs(np.cross(b - a, c - a))
    keep = [i for i in range(3) if i != int(np.argmax(normal))]
    p2, q2, a2, b2, c2 = (x[keep] for x in (p, q, a, b, c))
    if _point_in_triangle_2d(p2, a2, b2, c2) or _point_in_triangle_2d(q2, a2, b2, c2):
        return True
    return any(_segments_intersect_2d(p2, q2, u, v) for u, v in ((a2, b2), (b2, c2), (c2, a2)))


def segments_hit_triangles(p: np.ndarray, q: np.ndarray, tris: np.ndarray) -> np.ndarray:
    """Closed segment/triangle intersection for stacked inputs, exact predicates."""
    a, b, c = tris[:, 0], tris[:, 1], tris[:, 2]
    sp, sq = orient3d(a, b, c, p), orient3d(a, b, c, q)
    hit = np.zeros(len(p), dtype=bool)
    crossing = sp * sq <= 0
    coplanar = (sp == 0) & (sq == 0)
    gen = np.flatnonzero(crossing & ~coplanar)
    if gen.size:
        s1 = orient3d(p[gen], q[gen], a[gen], b[gen])
        s2 = orient3d(p[gen], q[gen], b[gen], c[gen])
        s3 = orient3d(p[gen], q[gen], c[gen], a[gen])
        s = np.stack([s1, s2, s3], axis=1)
        hit[gen] = ~((s.min(axis=1) < 0) & (s.max(axis=1) > 0))
    for i in np.flatnonzero(coplanar):
        hit[i] = _coplanar_segment_triangle(p[i], q[i], tris[i])
    return hit


def triangles_intersect(t1: np.ndarray, t2: np.ndarray) -> np.ndarray:
    """Closed triangle/triangle intersection for stacked (n, 3, 3) inputs.

    Two triangles meet iff an edge of one meets the other triangle.
    """
    t1, t2 = np.asarray(t1, dtype=np.float64), np.asarray(t2, dtype=np.float64)
    out = np.zeros(len(t1), dtype=bool)
    for src, dst in ((t1, t2), (t2, t1)):
        for i, j in ((0, 1), (1, 2), (2, 0)):
            todo = np.flatnonzero(~out)
            if todo.size == 0:
                return out
            out[todo] |= segments_hit_triangles(src[todo, i], src[todo, j], dst[todo])
    return out


def candidate_face_pairs(mesh: TriMesh) -> np.ndarray:
    """Face pairs with overlapping bounding boxes and no shared vertex."""
    tri = mesh.vertices[mesh.faces]
    lo, hi = tri.min(axis=1), tri.max(axis=1)
    centre = 0.5 * (lo + hi)
    reach = np.linalg.norm(hi - lo, axis=1).max()
    pairs = cKDTree(centre).query_pairs(reach, output_type="ndarray")
    if len(pairs) == 0:
        return pairs.reshape(0, 2)
    i, j = pairs[:, 0], pairs[:, 1]
    overlap = np.all((lo[i] <= hi[j]) & (lo[j] <= hi[i]), axis=1)
    f = mesh.faces
    shared = (f[i][:, :, None] == f[j][:, None, :]).any(axis=(1, 2))
    return pairs[overlap & ~shared]


def intersecting_faces(mesh: TriMesh) -> np.ndarray:
    """Boolean mask of faces meeting at least one face they share no vertex with."""
    pairs = candidate_face_pairs(mesh)
    flags = np.zeros(mesh.n_faces, dtype=bool)
    if len(pairs):
        tri = mesh.vertices[mesh.faces]
        hit = triangles_intersect(tri[pairs[:, 0]], tri[pairs[:, 1]])
        flags[pairs[hit, 0]] = True
        flags[pairs[hit, 1]] = True
    return flags


def self_intersection_pct(mesh: TriMesh) -> float:
    """Percentage of faces involved in a self-intersection."""
    return float(100.0 * intersecting_faces(mesh).sum() / mesh.n_faces)


# ---------------------------------------------------------------------------
# reports


@dataclass
class StructureMetrics:
    dice: float
    jaccard: float
    assd_mm: float
    hd_mm: float
    ane: float
    anld: float
    self_intersection_pct: float


@dataclass
class MetricReport:
    structures: list = field(default_factory=list)
    whole: StructureMetrics | None = None

    def to_dict(self) -> dict:
        return {"structures": [asdict(s) for s in self.structures],
                "whole": asdict(self.whole) if self.whole is not None else None}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def mean(self, key: str) -> float:
        return float(np.mean([getattr(s, key) for s in self.structures]))


def _merge(meshes: list[TriMesh]) -> TriMesh:
    offs = np.cumsum([0] + [m.n_vertices for m in meshes])
    return TriMesh(np.concatenate([m.vertices for m in meshes]),
                   np.concatenate([m.faces + o for m, o in zip(meshes, offs)]))


def evaluate_meshes(pred: list[TriMesh], truth: list[TriMesh], reference: VoxelVolume,
                    truth_masks: list | None = None, sample_density: float | None = None) -> MetricReport:
    """Metrics per structure and for the whole scene.

    Overlap is measured after voxelizing the predictions onto ``reference``;
    ground-truth masks default to voxelized ground-truth meshes.
    """
    if len(pred) != len(truth):
        raise ValueError("prediction and ground truth must list the same structures")
    pm = [_mask(voxelize(m, reference)) for m in pred]
    gm = [_mask(t) for t in truth_masks] if truth_masks is not None else [_mask(voxelize(m, reference)) for m in truth]
    report = MetricReport()
    for p, g, pv, gv in zip(pred, truth, pm, gm):
        report.structures.append(StructureMetrics(
            dice(pv, gv), jaccard(pv, gv), assd(p, g, sample_density), hd(p, g, sample_density),
            ane(p, g), anld(p), self_intersection_pct(p)))
    pu, gu = np.any(pm, axis=0), np.any(gm, axis=0)
    pw, gw = _merge(pred), _merge(truth)
    si = sum(intersecting_faces(p).sum() for p in pred) * 100.0 / pw.n_faces
    report.whole = StructureMetrics(
        dice(pu, gu), jaccard(pu, gu), assd(pw, gw, sample_density), hd(pw, gw, sample_density),
        ane(pw, gw, np.concatenate([vertex_normals(p) for p in pred]),
            np.concatenate([vertex_normals(t) for t in truth])),
        float(np.mean([s.anld for s in report.structures])), float(si))
    return report
