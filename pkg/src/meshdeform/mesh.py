"""Triangle meshes, graph Laplacian operators and sphere templates."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph


class MeshError(ValueError):
    """Raised when a mesh or graph violates a structural requirement."""


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Indexed triangle surface.

    Parameters
    ----------
    vertices : array_like, shape (N, 3)
        Vertex coordinates in world units (mm).
    faces : array_like, shape (F, 3)
        Vertex index triples, counter-clockwise when seen from outside.
    structure_id : int
        Label of the structure this surface represents.
    """

    vertices: np.ndarray
    faces: np.ndarray
    structure_id: int = 0

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.array(self.faces, dtype=np.int64).reshape(-1, 3)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise MeshError(f"face index out of range for {len(v)} vertices")
        if f.size and np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            raise MeshError("degenerate face with repeated vertex index")
        v.flags.writeable = False
        f.flags.writeable = False
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        object.__setattr__(self, "structure_id", int(self.structure_id))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def with_vertices(self, vertices) -> "TriMesh":
        """Same topology, new coordinates."""
        vertices = np.asarray(vertices, dtype=np.float64)
        if vertices.shape != self.vertices.shape:
            raise MeshError(f"expected vertices of shape {self.vertices.shape}, got {vertices.shape}")
        return TriMesh(vertices, self.faces, self.structure_id)

    def directed_edges(self) -> np.ndarray:
        """Half-edges (a, b) in face order, shape (3F, 2)."""
        f = self.faces
        return np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])

    def edges(self) -> np.ndarray:
        """Unique undirected edges with a < b, shape (E, 2)."""
        e = np.sort(self.directed_edges(), axis=1)
        return np.unique(e, axis=0)

    def adjacency(self) -> sparse.csr_matrix:
        """Symmetric binary vertex adjacency."""
        e = self.edges()
        n = self.n_vertices
        rows = np.concatenate([e[:, 0], e[:, 1]])
        cols = np.concatenate([e[:, 1], e[:, 0]])
        a = sparse.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
        a.sum_duplicates()
        a.data[:] = 1.0
        return a

    def euler_characteristic(self) -> int:
        used = np.unique(self.faces).size
        return used - len(self.edges()) + self.n_faces

    def is_watertight(self) -> bool:
        """Every undirected edge is shared by exactly two faces."""
        e = np.sort(self.directed_edges(), axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return bool(np.all(counts == 2))

    def is_consistently_oriented(self) -> bool:
        """Each half-edge occurs once, so neighbours traverse shared edges in opposite directions."""
        d = self.directed_edges()
        return len(np.unique(d, axis=0)) == len(d)

    def face_normals(self, normalize: bool = True) -> np.ndarray:
        v = self.vertices
        f = self.faces
        n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        if normalize:
            norm = np.linalg.norm(n, axis=1, keepdims=True)
            n = np.divide(n, norm, out=np.zeros_like(n), where=norm > 0)
        return n

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_normals(normalize=False), axis=1)

    def surface_area(self) -> float:
        return float(self.face_areas().sum())

    def signed_volume(self) -> float:
        v = self.vertices
        f = self.faces
        return float(np.einsum("ij,ij->i", v[f[:, 0]], np.cross(v[f[:, 1]], v[f[:, 2]])).sum() / 6.0)

    def mean_edge_length(self) -> float:
        e = self.edges()
        return float(np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1).mean())

    def connected_components(self) -> int:
        n_comp, _ = csgraph.connected_components(self.adjacency(), directed=False)
        return int(n_comp)


@dataclass(frozen=True, eq=False)
class GraphOperator:
    """Sparse Laplacian algebra bound to one mesh topology.

    ``laplacian_scaled`` is ``2 * L_norm / lambda_max - I``, the argument of the
    Chebyshev filters used by the graph convolutions.
    """

    adjacency: sparse.csr_matrix
    degree: np.ndarray
    laplacian: sparse.csr_matrix
    laplacian_normalized: sparse.csr_matrix
    laplacian_scaled: sparse.csr_matrix
    lambda_max: float
    _torch_cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_vertices(self) -> int:
        return self.adjacency.shape[0]

    def torch_scaled(self, dtype=None):
        """``laplacian_scaled`` as a torch sparse COO tensor, cached per dtype."""
        import torch

        dtype = dtype or torch.get_default_dtype()
        if dtype not in self._torch_cache:
            coo = self.laplacian_scaled.tocoo()
            idx = torch.from_numpy(np.vstack([coo.row, coo.col]).astype(np.int64))
            vals = torch.from_numpy(coo.data.copy()).to(dtype)
            self._torch_cache[dtype] = torch.sparse_coo_tensor(idx, vals, coo.shape, check_invariants=False).coalesce()
        return self._torch_cache[dtype]

    @staticmethod
    def block_diag(ops: list["GraphOperator"]) -> "GraphOperator":
        """Disjoint union of several operators; one block per structure."""
        lam = {op.lambda_max for op in ops}
        if len(lam) != 1:
            raise MeshError("cannot stack operators with different lambda_max")
        return GraphOperator(
            adjacency=sparse.block_diag([op.adjacency for op in ops], format="csr"),
            degree=np.concatenate([op.degree for op in ops]),
            laplacian=sparse.block_diag([op.laplacian for op in ops], format="csr"),
            laplacian_normalized=sparse.block_diag([op.laplacian_normalized for op in ops], format="csr"),
            laplacian_scaled=sparse.block_diag([op.laplacian_scaled for op in ops], format="csr"),
            lambda_max=lam.pop(),
        )


def _power_iteration(m: sparse.spmatrix, iters: int = 1000, tol: float = 1e-12) -> float:
    n = m.shape[0]
    # fixed, non-symmetric start vector so the result is reproducible
    x = np.cos(np.arange(n) * 1.618033988749895) + 1.5
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(iters):
        y = m @ x
        new = float(x @ y)
        norm = np.linalg.norm(y)
        if norm == 0:
            return 0.0
        x = y / norm
        if abs(new - lam) <= tol * max(1.0, abs(new)):
            lam = new
            break
        lam = new
    return lam


def graph_operator_from_adjacency(adjacency, lambda_mode: str = "fixed_two") -> GraphOperator:
    a = sparse.csr_matrix(adjacency, dtype=np.float64)
    n = a.shape[0]
    if (a != a.T).nnz:
        raise MeshError("adjacency must be symmetric")
    if a.diagonal().any():
        raise MeshError("adjacency must have zero diagonal")
    deg = np.asarray(a.sum(axis=0)).ravel()
    if np.any(deg == 0):
        raise MeshError(f"isolated vertex: {int(np.flatnonzero(deg == 0)[0])} has degree 0")
    n_comp, _ = csgraph.connected_components(a, directed=False)
    if n_comp != 1:
        raise MeshError(f"graph is disconnected: {n_comp} connected components")
    eye = sparse.identity(n, format="csr")
    lap = (sparse.diags(deg) - a).tocsr()
    dinv = sparse.diags(1.0 / np.sqrt(deg))
    lnorm = (eye - dinv @ a @ dinv).tocsr()
    if lambda_mode == "fixed_two":
        lam = 2.0
    elif lambda_mode == "power_iteration":
        lam = _power_iteration(lnorm)
    else:
        raise ValueError(f"unknown lambda_mode {lambda_mode!r}")
    scaled = ((2.0 / lam) * lnorm - eye).tocsr()
    for m in (lap, lnorm, scaled):
        m.sort_indices()
    return GraphOperator(a, deg, lap, lnorm, scaled, float(lam))


def build_graph_operator(mesh: TriMesh, lambda_mode: str = "fixed_two") -> GraphOperator:
    """Adjacency, degree, Laplacian, normalized and scaled Laplacian of a mesh graph."""
    return graph_operator_from_adjacency(mesh.adjacency(), lambda_mode)


_ICO_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _unit_icosphere(subdivisions: int) -> tuple[np.ndarray, np.ndarray]:
    if subdivisions in _ICO_CACHE:
        return _ICO_CACHE[subdivisions]
    t = (1.0 + 5.0**0.5) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    v = [np.array(p, dtype=np.float64) / np.linalg.norm(p) for p in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(a: int, b: int) -> int:
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                m = v[a] + v[b]
                v.append(m / np.linalg.norm(m))
                cache[key] = len(v) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    out = (np.array(v), np.array(faces, dtype=np.int64))
    _ICO_CACHE[subdivisions] = out
    return out


def icosphere(subdivisions: int = 3, center=(0.0, 0.0, 0.0), radius: float = 1.0, structure_id: int = 0) -> TriMesh:
    """Subdivided icosahedron with ``10 * 4**s + 2`` vertices, outward CCW faces."""
    if radius <= 0:
        raise MeshError(f"radius must be positive, got {radius}")
    if not 0 <= subdivisions <= 7:
        raise MeshError(f"subdivisions must be in [0, 7], got {subdivisions}")
    v, f = _unit_icosphere(int(subdivisions))
    return TriMesh(v * radius + np.asarray(center, dtype=np.float64), f, structure_id)


def vertex_normals(mesh: TriMesh) -> np.ndarray:
    """Unit vertex normals with Max's weights.

    Each incident corner contributes ``(e1 x e2) / (|e1|^2 |e2|^2)``, which is
    exact for vertices whose one-ring lies on a sphere. Zero-area corners
    contribute nothing.
    """
    v, f = mesh.vertices, mesh.faces
    acc = np.zeros_like(v)
    for k in range(3):
        i, j, l = f[:, k], f[:, (k + 1) % 3], f[:, (k + 2) % 3]
        e1, e2 = v[j] - v[i], v[l] - v[i]
        w = (e1 * e1).sum(axis=1) * (e2 * e2).sum(axis=1)
        cr = np.cross(e1, e2)
        ok = w > 0
        np.add.at(acc, i[ok], cr[ok] / w[ok, None])
    norm = np.linalg.norm(acc, axis=1)
    bad = np.flatnonzero(norm == 0)
    if bad.size:
        raise MeshError(f"vertex {int(bad[0])} has no non-degenerate incident face")
    return acc / norm[:, None]


def neighbor_lists(mesh: TriMesh) -> list[np.ndarray]:
    a = mesh.adjacency()
    return [a.indices[a.indptr[i]:a.indptr[i + 1]] for i in range(mesh.n_vertices)]


def one_ring(mesh: TriMesh, vertex: int) -> set[int]:
    """Indices of vertices sharing an edge with ``vertex``."""
    if not 0 <= vertex < mesh.n_vertices:
        raise IndexError(f"vertex {vertex} out of range")
    f = mesh.faces[np.any(mesh.faces == vertex, axis=1)]
    return set(int(i) for i in np.unique(f)) - {int(vertex)}


def uniform_mean_operator(mesh: TriMesh) -> sparse.csr_matrix:
    """Row-normalized adjacency: ``M @ v`` gives each vertex's one-ring mean."""
    a = mesh.adjacency()
    deg = np.asarray(a.sum(axis=1)).ravel()
    if np.any(deg == 0):
        raise MeshError(f"isolated vertex: {int(np.flatnonzero(deg == 0)[0])}")
    return (sparse.diags(1.0 / deg) @ a).tocsr()


def laplacian_smooth(mesh: TriMesh, iterations: int = 50, step: float = 1.0) -> TriMesh:
    """Uniform-weight Laplacian smoothing; topology is untouched."""
    if not 0 < step <= 1:
        raise ValueError(f"step must be in (0, 1], got {step}")
    if iterations == 0:
        return mesh
    m = uniform_mean_operator(mesh)
    v = mesh.vertices.copy()
    for _ in range(iterations):
        v = v + step * (m @ v - v)
    return mesh.with_vertices(v)


_SID = re.compile(r"_s(\d+)\.obj$")


def write_obj(path, mesh: TriMesh) -> None:
    """Write ``v``/``f`` records with 1-based indices and 9 significant digits."""
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path, structure_id: int | None = None) -> TriMesh:
    path = Path(path)
    verts, faces = [], []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        try:
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                for k in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[k], idx[k + 1]])
        except ValueError as exc:
            raise MeshError(f"{path}:{lineno}: malformed record {line!r}") from exc
    if structure_id is None:
        m = _SID.search(path.name)
        structure_id = int(m.group(1)) if m else 0
    return TriMesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3), structure_id)
