import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from meshdeform.augment import (
    AugmentConfig,
    BSplineField,
    FoldOverError,
    affine_augment,
    apply_affine,
    apply_displacement,
    augment,
    elastic_deform,
    min_jacobian,
    random_affine,
)
from meshdeform.mesh import icosphere
from meshdeform.metrics import dice
from meshdeform.volume import VoxelVolume, voxelize


def ball_scene(n=24):
    geom = VoxelVolume(np.zeros((n, n, n)), (1.0, 1.0, 1.0), (2.0, -1.0, 0.5))
    c = geom.center
    r = 0.3 * n
    occ = (np.linalg.norm(geom.voxel_centers() - c, axis=-1) < r).astype(np.uint8)
    image = geom.with_data(np.where(occ, 0.8, -0.6) + np.random.default_rng(0).normal(0, 0.05, occ.shape))
    return [image, geom.with_data(occ)], [icosphere(3, c, r)]


def test_zero_displacement_is_identity_bitwise():
    vols, meshes = ball_scene()
    field = BSplineField(vols[0], np.zeros((16, 16, 16, 3)))
    out_v, out_m = apply_displacement(vols, meshes, field)
    assert all(np.array_equal(a.data, b.data) and a.data.dtype == b.data.dtype for a, b in zip(out_v, vols))
    assert np.array_equal(out_m[0].vertices, meshes[0].vertices)


def test_constant_displacement_shifts_everything():
    vols, meshes = ball_scene()
    d = np.array([2.0, -1.0, 3.0])
    field = BSplineField(vols[0], np.broadcast_to(d, (16, 16, 16, 3)).copy())
    np.testing.assert_allclose(field(np.random.default_rng(0).uniform(0, 20, (50, 3))), np.tile(d, (50, 1)), atol=1e-12)
    out_v, out_m = apply_displacement(vols, meshes, field)
    np.testing.assert_allclose(out_m[0].vertices, meshes[0].vertices + d, atol=1e-12)
    # interior voxels are an exact integer shift of the source
    shifted = out_v[0].data[4:-4, 4:-4, 4:-4]
    src = vols[0].data[2:-6, 5:-3, 1:-7]
    np.testing.assert_allclose(shifted, src, atol=1e-9)


def test_identity_affine_ranges():
    cfg = AugmentConfig(scale=0, rotation_deg=0, shear_deg=0)
    m = random_affine(cfg, np.random.default_rng(0))
    assert np.array_equal(m, np.eye(3))
    vols, meshes = ball_scene()
    out_v, out_m = affine_augment(vols, meshes, cfg, np.random.default_rng(1))
    assert np.array_equal(out_m[0].vertices, meshes[0].vertices)
    assert all(np.array_equal(a.data, b.data) for a, b in zip(out_v, vols))


def test_pure_scale_about_center():
    vols, _ = ball_scene()
    c = vols[0].center
    m = icosphere(2, c + np.array([3.0, -2.0, 1.0]), 2.0)
    _, (out,) = apply_affine(vols, [m], 1.05 * np.eye(3))
    before = np.linalg.norm(m.vertices.mean(0) - c)
    after = np.linalg.norm(out.vertices.mean(0) - c)
    assert after == pytest.approx(1.05 * before, rel=1e-12)


def test_random_affine_within_ranges_and_deterministic():
    cfg = AugmentConfig()
    a = random_affine(cfg, np.random.default_rng(5))
    b = random_affine(cfg, np.random.default_rng(5))
    assert np.array_equal(a, b)
    assert 0.95 ** 3 - 1e-9 <= abs(np.linalg.det(a)) <= 1.05 ** 3 + 1e-9


@settings(max_examples=10)
@given(st.integers(0, 1000))
def test_augment_seed_determinism_and_binary(seed):
    vols, meshes = ball_scene(16)
    a_v, a_m = augment(vols, meshes, AugmentConfig(), np.random.default_rng(seed))
    b_v, b_m = augment(vols, meshes, AugmentConfig(), np.random.default_rng(seed))
    assert np.array_equal(a_m[0].vertices, b_m[0].vertices)
    assert np.array_equal(a_v[0].data, b_v[0].data)
    assert a_v[1].data.dtype == np.uint8 and set(np.unique(a_v[1].data)) <= {0, 1}
    assert np.array_equal(a_m[0].faces, meshes[0].faces)


def test_fold_over_raises():
    vols, meshes = ball_scene(16)
    with pytest.raises(FoldOverError):
        elastic_deform(vols, meshes, AugmentConfig(elastic_magnitude=0.5), np.random.default_rng(0), max_retries=2)


def test_min_jacobian_of_identity_and_compression():
    g = np.zeros((6, 6, 6, 3))
    assert min_jacobian(g, (1, 1, 1)) == pytest.approx(1.0)
    x = np.arange(6, dtype=float)
    g[..., 0] = -2 * x[:, None, None]
    assert min_jacobian(g, (1, 1, 1)) == pytest.approx(-1.0)


def test_augmented_mesh_matches_augmented_occupancy():
    vols, meshes = ball_scene(32)
    rng = np.random.default_rng(3)
    for _ in range(3):
        (_, occ), (m,) = augment(vols, meshes, AugmentConfig(), rng)
        assert dice(voxelize(m, occ), occ) >= 0.95
