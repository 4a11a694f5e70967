import numpy as np
import pytest

from meshdeform.synthetic import SyntheticConfig, gen_synthetic_dataset, load_dataset, save_dataset
from meshdeform.volume import marching_cubes


def test_noise_free_isosurface_tracks_ground_truth():
    cfg = SyntheticConfig(noise_sigma=0.0, bias_amplitude=0.0)
    (sc,) = gen_synthetic_dataset(1, 1, 32, seed=4, cfg=cfg)
    img = sc.image
    level = 0.5 * (img.data.min() + img.data.max())
    iso = marching_cubes(img, level, inside="above")
    shape = sc.shapes[0]
    dist = np.linalg.norm(shape.project(iso.vertices) - iso.vertices, axis=1)
    assert dist.max() < 1.0 * min(img.spacing)


def test_same_seed_same_scenes():
    a = gen_synthetic_dataset(2, 2, 24, seed=9)
    b = gen_synthetic_dataset(2, 2, 24, seed=9)
    c = gen_synthetic_dataset(2, 2, 24, seed=10)
    for x, y in zip(a, b):
        assert np.array_equal(x.image.data, y.image.data)
        assert all(np.array_equal(m.vertices, n.vertices) for m, n in zip(x.meshes, y.meshes))
    assert not np.array_equal(a[0].image.data, c[0].image.data)


def test_meshes_are_closed_spheres(small_scenes):
    for sc in small_scenes:
        assert len(sc.meshes) == 2
        for sid, m in enumerate(sc.meshes):
            assert m.is_watertight() and m.euler_characteristic() == 2
            assert m.structure_id == sid
        assert sc.image.data.min() == -1 and sc.image.data.max() == 1


def test_structure_count_validation():
    with pytest.raises(ValueError):
        gen_synthetic_dataset(1, 0, 16)


def test_save_load_roundtrip(tmp_path, small_scenes):
    save_dataset(tmp_path, small_scenes, {"seed": 11})
    loaded, manifest = load_dataset(tmp_path)
    assert manifest == {"seed": 11, "n_scenes": 3}
    for a, b in zip(small_scenes, loaded):
        np.testing.assert_allclose(b.image.data, a.image.data, atol=1e-6)
        assert np.array_equal(b.occupancy.data, a.occupancy.data)
        for m, n in zip(a.meshes, b.meshes):
            np.testing.assert_allclose(n.vertices, m.vertices, atol=1e-9)
            assert np.array_equal(n.faces, m.faces)
