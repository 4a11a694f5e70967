"""Independent brute-force reference implementations used by the tests."""

import numpy as np


def brute_chamfer(p, g):
    d = ((p[:, None] - g[None]) ** 2).sum(-1)
    return d.min(1).sum() + d.min(0).sum()


def brute_directed(a, b):
    return np.sqrt(((a[:, None] - b[None]) ** 2).sum(-1)).min(1)


def dense_chebyshev(L, K):
    T = [np.eye(len(L)), L]
    for _ in range(K - 1):
        T.append(2 * L @ T[-1] - T[-2])
    return T[:K + 1]


def _segment_hits(p, q, tri):
    """Moller-Trumbore for stacked segments p->q against stacked triangles, in floating point."""
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    d = q - p
    e1, e2 = b - a, c - a
    h = np.cross(d, e2)
    det = (e1 * h).sum(1)
    ok = np.abs(det) > 1e-14
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    s = p - a
    u = (s * h).sum(1) * inv
    qv = np.cross(s, e1)
    v = (d * qv).sum(1) * inv
    t = (e2 * qv).sum(1) * inv
    return ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t >= 0) & (t <= 1)


def brute_self_intersection_pct(vertices, faces):
    """All O(F^2) face pairs without a shared vertex, edge-versus-triangle both ways.

    Valid for meshes in general position (no coplanar touching pairs).
    """
    F = len(faces)
    i, j = np.triu_indices(F, 1)
    shared = (faces[i][:, :, None] == faces[j][:, None, :]).any(axis=(1, 2))
    i, j = i[~shared], j[~shared]
    tri = vertices[faces]
    hit = np.zeros(len(i), dtype=bool)
    for src, dst in ((i, j), (j, i)):
        for k, l in ((0, 1), (1, 2), (2, 0)):
            hit |= _segment_hits(tri[src, k], tri[src, l], tri[dst])
    flags = np.zeros(F, dtype=bool)
    flags[i[hit]] = True
    flags[j[hit]] = True
    return 100.0 * flags.sum() / F


def crafted_meshes():
    """Ten generic meshes with and without self-intersections."""
    from meshdeform.mesh import TriMesh, icosphere

    rng = np.random.default_rng(2024)
    out = []
    base = icosphere(2)
    jit = lambda m, s=1e-3: m.with_vertices(m.vertices + rng.normal(scale=s, size=m.vertices.shape))
    out.append(jit(base))
    spike = base.vertices.copy()
    spike[0] *= -1.5
    out.append(jit(base.with_vertices(spike)))
    spike2 = base.vertices.copy()
    spike2[[3, 40, 77]] *= -1.3
    out.append(jit(base.with_vertices(spike2)))
    dent = base.vertices.copy()
    cap = dent[:, 2] > 0.6
    dent[cap, 2] = 1.2 - dent[cap, 2] - 0.9
    out.append(jit(base.with_vertices(dent)))
    flat = base.vertices * np.array([1.0, 1.0, 0.05])
    out.append(jit(base.with_vertices(flat)))
    twist = base.vertices.copy()
    ang = 3.0 * twist[:, 2]
    twist[:, 0], twist[:, 1] = (np.cos(ang) * base.vertices[:, 0] - np.sin(ang) * base.vertices[:, 1],
                                np.sin(ang) * base.vertices[:, 0] + np.cos(ang) * base.vertices[:, 1])
    out.append(jit(base.with_vertices(twist)))
    a, b = icosphere(1), icosphere(1, (0.8, 0.1, 0.05), 0.7)
    out.append(jit(TriMesh(np.concatenate([a.vertices, b.vertices]), np.concatenate([a.faces, b.faces + 42]))))
    out.append(jit(TriMesh(np.concatenate([a.vertices, b.vertices + 3.0]), np.concatenate([a.faces, b.faces + 42]))))
    noisy = base.with_vertices(base.vertices + rng.normal(scale=0.15, size=base.vertices.shape))
    out.append(noisy)
    tri = TriMesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0.2, 0.2, -0.5], [0.3, 0.25, 0.5], [0.6, 0.7, 0.1]]),
                  np.array([[0, 1, 2], [3, 4, 5]]))
    out.append(jit(tri))
    return out
