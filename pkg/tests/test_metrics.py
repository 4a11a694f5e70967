import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import brute_directed, brute_self_intersection_pct, crafted_meshes

from meshdeform.metrics import (
    MetricReport,
    anld,
    anld_per_vertex,
    ane,
    assd,
    dice,
    directed_distances,
    evaluate_meshes,
    hd,
    jaccard,
    orient2d,
    orient3d,
    sample_surface,
    self_intersection_pct,
    triangles_intersect,
)
from meshdeform.mesh import TriMesh, icosphere, vertex_normals
from meshdeform.volume import VoxelVolume, voxelize


def test_overlap_examples():
    a = np.zeros((4, 4, 4), bool)
    a[0, 0, :2] = True
    assert dice(a, a) == 1 and jaccard(a, a) == 1
    b = np.zeros_like(a)
    b[3, 3, 3] = True
    assert dice(a, b) == 0 and jaccard(a, b) == 0
    c = np.zeros_like(a)
    c[0, 0, 1:3] = True
    assert dice(a, c) == 0.5 and jaccard(a, c) == pytest.approx(1 / 3, abs=1e-15)
    empty = np.zeros_like(a)
    assert dice(empty, empty) == 1 and jaccard(empty, empty) == 1
    with pytest.raises(ValueError):
        dice(a, np.zeros((3, 3, 3)))


@given(st.integers(0, 2 ** 31))
def test_jaccard_dice_identity(seed):
    rng = np.random.default_rng(seed)
    p, g = rng.random((6, 6, 6)) < rng.random(), rng.random((6, 6, 6)) < rng.random()
    d, j = dice(p, g), jaccard(p, g)
    assert 0 <= j <= d <= 1
    assert j == pytest.approx(d / (2 - d), abs=1e-12)


def test_distances_zero_and_translation():
    m = icosphere(3)
    assert assd(m, m) == 0 and hd(m, m) == 0
    t = m.with_vertices(m.vertices + [3.0, 0, 0])
    assert hd(m, t) == pytest.approx(3.0, abs=0.1)
    assert assd(m, t) <= 3.0


def test_distances_match_brute_force():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(500, 3)), rng.normal(size=(500, 3)) + 0.3
    assert np.array_equal(directed_distances(a, b), brute_directed(a, b))
    ref_assd = 0.5 * (brute_directed(a, b).mean() + brute_directed(b, a).mean())
    ref_hd = max(brute_directed(a, b).max(), brute_directed(b, a).max())
    assert assd(a, b) == pytest.approx(ref_assd, rel=1e-15)
    assert hd(a, b) == ref_hd


@given(st.integers(0, 10_000))
def test_distances_symmetric_and_ordered(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(40, 3)), rng.normal(size=(30, 3)) * 2
    assert assd(a, b) == pytest.approx(assd(b, a), rel=1e-14)
    assert hd(a, b) == hd(b, a)
    assert hd(a, b) >= assd(a, b) >= 0


def test_surface_sampling_density():
    m = icosphere(2, radius=3.0)
    pts = sample_surface(m, 2.0, seed=1)
    assert len(pts) == m.n_vertices + int(np.ceil(m.surface_area() * 2.0))
    r = np.linalg.norm(pts, axis=1)
    assert r.max() <= 3.0 + 1e-9 and r.min() > 2.7
    assert np.array_equal(pts, sample_surface(m, 2.0, seed=1))


def test_ane_examples():
    m = icosphere(3)
    n = vertex_normals(m)
    assert ane(m, m) < 1e-6
    assert ane(m, m, n, -n) == pytest.approx(2 - ane(m, m, n, n), abs=1e-12)
    rng = np.random.default_rng(0)
    noise = rng.normal(size=m.vertices.shape)
    vals = [ane(m.with_vertices(m.vertices + s * noise), m) for s in (0.005, 0.02, 0.05)]
    assert 0 < vals[0] < vals[1] < vals[2]


def test_anld_examples():
    # regular triangular lattice patch
    n = 7
    pts = np.array([[i + 0.5 * j, j * np.sqrt(3) / 2, 0.0] for j in range(n) for i in range(n)])
    faces = []
    for j in range(n - 1):
        for i in range(n - 1):
            a, b, c, d = j * n + i, j * n + i + 1, (j + 1) * n + i, (j + 1) * n + i + 1
            faces += [[a, b, c], [b, d, c]]
    lattice = TriMesh(pts, np.array(faces))
    per = anld_per_vertex(lattice).reshape(n, n)
    assert np.abs(per[1:-1, 1:-1]).max() < 1e-12
    ico = icosphere(3)
    base = anld(ico)
    assert 0 < base < 0.2
    assert anld(ico.with_vertices(5.0 * ico.vertices)) == pytest.approx(base, rel=1e-12)
    spiked = ico.vertices.copy()
    spiked[0] *= 1.5
    assert anld(ico.with_vertices(spiked)) > base


def test_orientation_predicates_exact_near_degeneracy():
    a, b, c = np.array([0.0, 0, 0]), np.array([1.0, 0, 0]), np.array([0.0, 1, 0])
    assert orient3d(a, b, c, [0.1, 0.1, 0.0])[0] == 0
    assert orient3d(a, b, c, [0.1, 0.1, 1e-300])[0] == -orient3d(a, b, c, [0.1, 0.1, -1e-300])[0] != 0
    p = np.array([0.1, 0.1])
    q = np.array([0.1 + 2 ** -50, 0.1 + 2 ** -50])
    assert orient2d(p, q, np.array([0.3, 0.3])) == 0
    assert orient2d([0.0, 0], [1.0, 0], [0.5, 1e-320]) == 1


def test_self_intersection_examples():
    assert self_intersection_pct(icosphere(3)) == 0
    cross = TriMesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0.2, 0.2, -0.5], [0.3, 0.25, 0.5], [0.6, 0.7, 0.1]]),
                    np.array([[0, 1, 2], [3, 4, 5]]))
    assert self_intersection_pct(cross) == 100
    coplanar = np.array([[[0, 0, 0], [2, 0, 0], [0, 2, 0]]], float)
    assert triangles_intersect(coplanar, coplanar + [0.5, 0.5, 0])[0]
    assert not triangles_intersect(coplanar, coplanar + [3, 3, 0])[0]
    touching = np.array([[[2, 0, 0], [3, 0, 0], [2, 1, 0]]], float)
    assert triangles_intersect(coplanar, touching)[0]


def test_self_intersection_matches_brute_force_oracle():
    for m in crafted_meshes():
        assert self_intersection_pct(m) == brute_self_intersection_pct(m.vertices, m.faces)


def test_evaluate_meshes_report():
    ref = VoxelVolume(np.zeros((24, 24, 24)))
    truth = [icosphere(3, (8, 12, 12), 5), icosphere(3, (17, 12, 12), 4)]
    pred = [m.with_vertices(m.vertices + [0.5, 0, 0]) for m in truth]
    rep = evaluate_meshes(pred, truth, ref)
    assert isinstance(rep, MetricReport) and len(rep.structures) == 2
    for s in rep.structures + [rep.whole]:
        assert 0 < s.jaccard <= s.dice < 1
        assert s.hd_mm >= s.assd_mm > 0
        assert 0 <= s.ane <= 2 and s.self_intersection_pct == 0
    masks = [voxelize(t, ref) for t in truth]
    assert evaluate_meshes(truth, truth, ref, masks).mean("dice") == 1.0
    d = rep.to_dict()
    assert set(d) == {"structures", "whole"} and "assd_mm" in d["whole"]
    with pytest.raises(ValueError):
        evaluate_meshes(pred[:1], truth, ref)
