import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_multispectral
from forestseg.geometry import (
    FULL_MASK,
    GEOMETRIC_COLUMNS,
    ABLATION_SCENARIOS,
    FeatureMask,
    FeatureTable,
    compute_feature_table,
    eigen_features,
    geometric_block,
    read_feature_table,
    stack_tables,
    write_feature_table,
)
from forestseg.model import Channel, CloudError, MultispectralCloud
from forestseg.spatial import SpatialIndex

BOUNDED = ("linearity", "planarity", "sphericity", "anisotropy", "verticality", "pca1", "pca2",
           "surface_variation")


def line(n=100):
    t = np.linspace(0, 1, n)
    return np.column_stack([t, 0.5 * t, 0.2 * t])


def plane(rng, n=20):
    # Regular grid plus sub-millimetre height noise: l1 == l2 up to noise.
    g = np.linspace(0, 1, n)
    xx, yy = np.meshgrid(g, g)
    return np.column_stack([xx.ravel(), yy.ravel(), 1e-4 * rng.normal(size=n * n)])


def ball(rng, n=1000):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * rng.uniform(0, 1, n)[:, None] ** (1 / 3)


def cylinder(rng, n=4000, radius=0.2, height=6.0):
    phi = rng.uniform(0, 2 * np.pi, n)
    return np.column_stack([radius * np.cos(phi), radius * np.sin(phi), rng.uniform(0, height, n)])


def test_line_features():
    f = eigen_features(line())
    assert f.linearity >= 0.99 and f.planarity <= 0.01 and f.sphericity == pytest.approx(0, abs=1e-9)


def test_plane_features(rng):
    f = eigen_features(plane(rng))
    assert f.planarity >= 0.95 and f.verticality <= 0.05


def test_ball_features(rng):
    f = eigen_features(ball(rng))
    assert f.sphericity >= 0.8 and f.eigenentropy >= 0.95 * math.log(3)


def test_vertical_cylinder_wall(rng):
    xyz = cylinder(rng)
    index = SpatialIndex(xyz)
    wall = [i for i in range(len(xyz)) if 1.5 < xyz[i, 2] < 4.5][:50]
    for i in wall:
        f = eigen_features(xyz[index.radius_query(xyz[i], 1.0)])
        assert f.verticality >= 0.9
        assert f.linearity + f.planarity >= 0.9


def test_vertical_line_is_maximally_vertical():
    z = np.linspace(0, 1, 30)
    f = eigen_features(np.column_stack([np.zeros(30), np.zeros(30), z]))
    assert f.verticality == pytest.approx(1.0)


def test_coincident_points_are_degenerate():
    f = eigen_features(np.ones((5, 3)))
    assert f.degenerate_flag and f.linearity == 0 and f.neighbor_count == 5


def test_too_few_points():
    with pytest.raises(ValueError, match="at least 3"):
        eigen_features(np.zeros((2, 3)))


def _check_row(f):
    for name in BOUNDED:
        assert 0.0 <= getattr(f, name) <= 1.0, name
    assert 0.0 <= f.eigenentropy <= math.log(3)
    if not f.degenerate_flag:
        assert f.linearity + f.planarity + f.sphericity == pytest.approx(1.0, abs=1e-9)


@given(st.integers(0, 2**32), st.integers(3, 40), st.floats(1e-3, 1e3))
def test_bounded_features_in_range(seed, n, scale):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(n, 3)) * scale * rng.uniform(0, 1, 3)
    _check_row(eigen_features(pts))


@given(st.integers(0, 2**32), st.floats(0, 2 * np.pi))
def test_rotation_about_vertical_axis(seed, angle):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(30, 3)) * [3, 1, 0.5]
    c, s = np.cos(angle), np.sin(angle)
    rot = pts @ np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]]).T
    a, b = eigen_features(pts), eigen_features(rot)
    for name in ("linearity", "planarity", "sphericity", "verticality", "eigenentropy", "omnivariance"):
        assert getattr(a, name) == pytest.approx(getattr(b, name), abs=1e-6)


@given(st.integers(0, 2**32), st.floats(0.1, 10))
def test_uniform_scaling(seed, s):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(25, 3))
    a, b = eigen_features(pts), eigen_features(s * pts)
    assert b.eigenvalue_sum == pytest.approx(s * s * a.eigenvalue_sum, rel=1e-9)
    for name in ("linearity", "planarity", "sphericity", "pca1", "pca2", "surface_variation"):
        assert getattr(b, name) == pytest.approx(getattr(a, name), abs=1e-9)


def test_batched_block_matches_single_neighbourhoods(rng):
    xyz = rng.uniform(0, 6, size=(3000, 3))
    block = geometric_block(xyz, 1.0)
    index = SpatialIndex(xyz)
    for i in rng.choice(len(xyz), 200, replace=False):
        nb = index.radius_query(xyz[i], 1.0)
        assert block[i, 13] == len(nb)
        if len(nb) >= 3:
            np.testing.assert_allclose(block[i], eigen_features(xyz[nb]).as_array(), atol=1e-9)


def test_isolated_point_gets_fallback_row(rng):
    xyz = np.vstack([rng.uniform(0, 1, size=(50, 3)), [[100.0, 100.0, 100.0]]])
    row = geometric_block(xyz)[-1]
    assert row[13] == 1 and row[14] == 1 and np.all(row[:13] == 0)


def test_adding_far_point_changes_no_row(rng):
    xyz = rng.uniform(0, 5, size=(500, 3))
    a = geometric_block(xyz)
    b = geometric_block(np.vstack([xyz, [[50.0, 50.0, 50.0]]]))
    np.testing.assert_array_equal(a, b[:-1])


def test_sum_of_shape_ratios_on_random_neighbourhoods(rng):
    worst = 0.0
    for _ in range(10_000):
        n = int(rng.integers(3, 12))
        f = eigen_features(rng.normal(size=(n, 3)) * rng.uniform(0.01, 5, 3))
        if not f.degenerate_flag:
            worst = max(worst, abs(f.linearity + f.planarity + f.sphericity - 1))
    assert worst <= 1e-9


# ---------------------------------------------------------------------------
# feature tables


def test_coordinates_mask_has_three_columns(rng):
    cloud = random_multispectral(rng, 50, z_norm=True)
    table = compute_feature_table(cloud, mask=ABLATION_SCENARIOS["Coordinates"])
    assert table.columns == ("x", "y", "z_norm")
    assert table.values.min() >= 0 and table.values.max() <= 1


def test_spectral_vi_mask_has_seven_columns(rng):
    cloud = random_multispectral(rng, 50, z_norm=True)
    mask = ABLATION_SCENARIOS["+SWIR + NIR + Green + VI"]
    assert len(compute_feature_table(cloud, mask=mask).columns) == 7
    full = compute_feature_table(cloud, mask=FULL_MASK)
    assert full.columns[7:] == GEOMETRIC_COLUMNS


def test_nine_scenarios_in_table_order():
    names = list(ABLATION_SCENARIOS)
    assert len(names) == 9 and names[0] == "Coordinates" and names[-1] == "+SWIR + NIR + Green + VI"
    assert all(ABLATION_SCENARIOS[n].scenario_name == n for n in names)


def test_coordinates_need_normalised_height(rng):
    with pytest.raises(CloudError, match="z_normalized"):
        compute_feature_table(random_multispectral(rng, 20), mask=FULL_MASK)


def test_mask_parse_round_trip():
    m = FeatureMask.parse("coords+green+swir+vi")
    assert m.channels == (Channel.SWIR, Channel.GREEN)
    assert FeatureMask.parse(m.to_string()) == m
    with pytest.raises(ValueError):
        FeatureMask.parse("coords+red")


@pytest.mark.parametrize("suffix", [".npz", ".txt"])
def test_feature_table_round_trip(tmp_path, rng, suffix):
    cloud = random_multispectral(rng, 60, z_norm=True)
    table = compute_feature_table(cloud, mask=FULL_MASK)
    write_feature_table(table, tmp_path / f"t{suffix}")
    back = read_feature_table(tmp_path / f"t{suffix}")
    assert back.columns == table.columns
    np.testing.assert_array_equal(back.values, table.values)
    np.testing.assert_array_equal(back.labels, table.labels)


def test_table_rejects_non_finite():
    with pytest.raises(ValueError):
        FeatureTable(("a",), [[np.nan]])


def test_stack_checks_schema(rng):
    a = FeatureTable(("a",), rng.normal(size=(3, 1)))
    b = FeatureTable(("b",), rng.normal(size=(3, 1)))
    with pytest.raises(ValueError, match="schemas"):
        stack_tables([a, b])


def test_trunk_points_of_scene_are_vertical(small_scene):
    ref = small_scene.reference
    block = geometric_block(ref.xyz)
    trunk = (ref.labels == 2) & (block[:, 13] >= 10)
    # Branch and foliage points inside the 1 m ball pull some rows away from vertical.
    assert np.median(block[trunk, 3]) >= 0.8


def test_table_on_multispectral_only():
    cloud = MultispectralCloud(np.zeros((3, 3)), np.zeros((3, 3)), z_normalized=np.zeros(3))
    assert len(compute_feature_table(cloud, mask=ABLATION_SCENARIOS["+NIR"])) == 3
