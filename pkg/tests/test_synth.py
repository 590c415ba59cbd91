import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial import cKDTree

from metricseg.errors import ValidationError
from metricseg.geometry import PointCloud, write_point_cloud
from metricseg.synth import (
    AugmentConfig, SceneConfig, augment, generate_scene, rotation_x, rotation_z, sample_x_rotation,
)


def dense_surface(p, step=0.004):
    """Fine sampling of a primitive's surface, independent of the generator's samplers."""
    cx, cy = p.center
    if p.kind == "box":
        sx, sy, sz = p.size
        xs = np.arange(-sx / 2, sx / 2 + step, step)
        ys = np.arange(-sy / 2, sy / 2 + step, step)
        zs = np.arange(0, sz + step, step)
        faces = []
        for x in (-sx / 2, sx / 2):
            Y, Z = np.meshgrid(ys, zs)
            faces.append(np.column_stack([np.full(Y.size, x), Y.ravel(), Z.ravel()]))
        for y in (-sy / 2, sy / 2):
            X, Z = np.meshgrid(xs, zs)
            faces.append(np.column_stack([X.ravel(), np.full(X.size, y), Z.ravel()]))
        X, Y = np.meshgrid(xs, ys)
        faces.append(np.column_stack([X.ravel(), Y.ravel(), np.full(X.size, sz)]))
        pts = np.concatenate(faces)
    elif p.kind == "cylinder":
        r, h = p.size
        th = np.arange(0, 2 * np.pi, step / r)
        T, Z = np.meshgrid(th, np.arange(0, h + step, step))
        pts = np.column_stack([r * np.cos(T.ravel()), r * np.sin(T.ravel()), Z.ravel()])
    else:
        r = p.size[0]
        n = int(4 * np.pi * r * r / step**2)
        k = np.arange(n) + 0.5
        phi = np.arccos(1 - 2 * k / n)
        th = np.pi * (1 + 5**0.5) * k
        pts = r * np.column_stack([np.cos(th) * np.sin(phi), np.sin(th) * np.sin(phi), np.cos(phi)])
        pts[:, 2] += r
    return pts + [cx, cy, 0.0]


def has_touching_pair(placed, tol=0.02):
    surfaces = [dense_surface(p) for p in placed]
    trees = [cKDTree(s) for s in surfaces]
    for i in range(len(placed)):
        for j in range(i + 1, len(placed)):
            d, _ = trees[j].query(surfaces[i], k=1)
            if d.min() < tol:
                return True
    return False


def test_two_objects_no_contact():
    cfg = SceneConfig(min_objects=2, max_objects=2, contact_probability=0.0)
    for seed in range(5):
        cloud, placed = generate_scene(cfg, seed=seed, return_layout=True)
        ids = set(np.unique(cloud.instance_ids))
        assert ids == {0, 1, 2}
        assert not has_touching_pair(placed)


def test_labels_are_well_formed():
    cloud = generate_scene(SceneConfig(), seed=11)
    cloud.validate()
    bg = cloud.instance_ids == 0
    assert set(np.unique(cloud.semantic_ids[bg])) <= {0, 1}
    assert not np.isin(cloud.semantic_ids[~bg], [0, 1]).any()
    ids = np.unique(cloud.instance_ids[~bg])
    np.testing.assert_array_equal(ids, np.arange(1, len(ids) + 1))
    for i in ids:
        assert len(np.unique(cloud.semantic_ids[cloud.instance_ids == i])) == 1


def test_same_seed_same_bytes(tmp_path):
    cfg = SceneConfig()
    write_point_cloud(generate_scene(cfg, seed=5), tmp_path / "a.pc")
    write_point_cloud(generate_scene(cfg, seed=5), tmp_path / "b.pc")
    assert (tmp_path / "a.pc").read_bytes() == (tmp_path / "b.pc").read_bytes()
    write_point_cloud(generate_scene(cfg, seed=6), tmp_path / "c.pc")
    assert (tmp_path / "c.pc").read_bytes() != (tmp_path / "a.pc").read_bytes()


def test_contact_fraction_near_half():
    cfg = SceneConfig(contact_probability=0.5)
    touching = sum(has_touching_pair(generate_scene(cfg, seed=s, return_layout=True)[1]) for s in range(100))
    assert 35 <= touching <= 65


def test_contact_probability_one_always_touches():
    cfg = SceneConfig(min_objects=2, max_objects=4, contact_probability=1.0)
    assert all(has_touching_pair(generate_scene(cfg, seed=s, return_layout=True)[1]) for s in range(10))


def test_overfull_room_raises():
    cfg = SceneConfig(room_extent=0.5, min_objects=6, max_objects=6, max_retries=5)
    with pytest.raises(ValidationError, match="could not place"):
        generate_scene(cfg, seed=0)


@pytest.mark.parametrize("bad", [
    dict(room_extent=0.0), dict(min_objects=0), dict(min_objects=3, max_objects=2),
    dict(contact_probability=1.5), dict(point_density=-1.0),
])
def test_invalid_config(bad):
    with pytest.raises(ValidationError):
        SceneConfig(**bad).validate()


# --- augmentation ----------------------------------------------------------


def small_cloud(seed=0, n=200):
    rng = np.random.default_rng(seed)
    return PointCloud(rng.uniform(0, 2, (n, 3)), rng.uniform(0, 1, (n, 3)), rng.integers(0, 6, n), rng.integers(0, 5, n))


def pairwise(x):
    return np.linalg.norm(x[:, None] - x[None], axis=2)


def test_identity_augmentation():
    cloud = small_cloud()
    cfg = AugmentConfig(color_sigma=0.0, scale_min=1.0, scale_max=1.0, rotate_z=False, x_rot_sigma_deg=0.0)
    out = augment(cloud, 3, cfg)
    np.testing.assert_array_equal(out.positions, cloud.positions)
    np.testing.assert_array_equal(out.colors, cloud.colors)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_labels_and_count_preserved(seed):
    cloud = small_cloud()
    out = augment(cloud, seed)
    assert len(out) == len(cloud)
    np.testing.assert_array_equal(out.instance_ids, cloud.instance_ids)
    np.testing.assert_array_equal(out.semantic_ids, cloud.semantic_ids)
    assert out.colors.min() >= 0 and out.colors.max() <= 1


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_rotation_only_preserves_distances(seed):
    cloud = small_cloud(n=60)
    out = augment(cloud, seed, AugmentConfig(color_sigma=0.0, scale_min=1.0, scale_max=1.0))
    np.testing.assert_allclose(pairwise(out.positions), pairwise(cloud.positions), atol=1e-9)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_scale_only_scales_distances(seed):
    cloud = small_cloud(n=60)
    cfg = AugmentConfig(color_sigma=0.0, rotate_z=False, x_rot_sigma_deg=0.0)
    out = augment(cloud, seed, cfg)
    d0, d1 = pairwise(cloud.positions), pairwise(out.positions)
    mask = d0 > 0
    ratio = d1[mask] / d0[mask]
    assert 0.8 <= ratio[0] <= 1.2
    np.testing.assert_allclose(ratio, ratio[0], rtol=1e-12)


def test_rotation_matrices_orthonormal():
    for t in np.linspace(0, 7, 11):
        for r in (rotation_x(t), rotation_z(t)):
            np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-15)
            assert math.isclose(np.linalg.det(r), 1.0, abs_tol=1e-12)


def truncated_normal_std(sigma, a):
    """Std of N(0, sigma^2) conditioned on |x| < a (closed form)."""
    z = a / sigma
    pdf = math.exp(-z * z / 2) / math.sqrt(2 * math.pi)
    mass = math.erf(z / math.sqrt(2))
    return sigma * math.sqrt(1 - 2 * z * pdf / mass)


def test_x_rotation_distribution():
    rng = np.random.default_rng(123)
    x = sample_x_rotation(rng, 100_000)
    assert np.abs(x).max() <= 10.0
    kept = x[np.abs(x) < 10.0]
    # quartiles sit well inside the clip range, so the IQR scale estimate is unbiased
    q1, q3 = np.percentile(x, [25, 75])
    assert abs((q3 - q1) / 1.3489795 - 5.0) < 0.1
    # the unclipped body has the spread of a normal truncated at +-2 sigma
    assert abs(kept.std() - truncated_normal_std(5.0, 10.0)) < 0.1
    # clipped mass matches P(|z| > 2)
    assert abs((np.abs(x) == 10.0).mean() - (1 - math.erf(2 / math.sqrt(2)))) < 0.005


def test_augment_empty_rejected():
    with pytest.raises(ValidationError):
        augment(PointCloud(np.zeros((0, 3)), np.zeros((0, 3))), 0)
