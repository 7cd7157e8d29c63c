import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from forestseg.model import (
    CHANNEL_ORDER,
    UNLABELED,
    Channel,
    ChannelCloud,
    ChannelPoint,
    CloudError,
    MultispectralCloud,
    SemanticClass,
    class_distribution,
    concatenate,
)
from forestseg.synthetic import SceneSpec, generate_scene


def test_channel_wavelengths_fixed():
    assert [c.wavelength_nm for c in Channel] == [1550, 905, 532]
    assert len(Channel) == 3
    assert [c.column for c in CHANNEL_ORDER] == [0, 1, 2]


def test_class_codes_follow_table_order():
    assert [int(c) for c in SemanticClass] == [0, 1, 2, 3, 4, 5]
    assert SemanticClass.WOODY_DEBRIS.display_name == "Woody debris"


def _cloud(labels):
    n = len(labels)
    return MultispectralCloud(np.zeros((n, 3)), np.zeros((n, 3)), labels)


def test_single_class_distribution():
    dist = class_distribution(_cloud([0, 0, 0, 0]))
    assert dist[SemanticClass.GROUND] == 1.0
    assert all(dist[c] == 0.0 for c in SemanticClass if c != SemanticClass.GROUND)


def test_two_class_distribution():
    dist = class_distribution(_cloud([0, 4, 0, 4]))
    assert dist[SemanticClass.GROUND] == 0.5 and dist[SemanticClass.FOLIAGE] == 0.5
    assert sum(dist.values()) == pytest.approx(1.0, abs=1e-9)


def test_unlabeled_point_reports_first_index():
    with pytest.raises(CloudError, match="point 2"):
        class_distribution(_cloud([0, 1, UNLABELED, UNLABELED]))


def test_distribution_of_generated_scene_matches_requested_fractions():
    fractions = dict(zip(SemanticClass, [0.20, 0.07, 0.02, 0.03, 0.65, 0.03]))
    scene = generate_scene(SceneSpec(extent_m=(30, 30), n_trees=16, total_points=50_000,
                                     class_fractions=fractions, seed=11))
    dist = class_distribution(scene.reference)
    for c in SemanticClass:
        assert abs(dist[c] - fractions[c]) <= 0.02


@given(st.lists(st.integers(0, 5), min_size=1, max_size=200), st.randoms(use_true_random=False))
def test_distribution_permutation_invariant(labels, rnd):
    shuffled = list(labels)
    rnd.shuffle(shuffled)
    a = class_distribution(_cloud(labels))
    b = class_distribution(_cloud(shuffled))
    assert a == b
    assert sum(a.values()) == pytest.approx(1.0, abs=1e-9)


def test_clouds_are_read_only(rng):
    cloud = MultispectralCloud(rng.normal(size=(5, 3)), rng.normal(size=(5, 3)))
    with pytest.raises(ValueError):
        cloud.xyz[0, 0] = 1.0


@pytest.mark.parametrize("bad", [np.nan, np.inf])
def test_non_finite_coordinates_rejected(bad):
    xyz = np.zeros((3, 3))
    xyz[1, 2] = bad
    with pytest.raises(CloudError, match="point 1"):
        ChannelCloud(Channel.NIR, xyz, np.zeros(3))


def test_negative_normalized_height_rejected():
    with pytest.raises(CloudError):
        MultispectralCloud(np.zeros((2, 3)), np.zeros((2, 3)), z_normalized=[0.0, -0.1])


def test_multispectral_needs_three_reflectances():
    with pytest.raises(CloudError):
        MultispectralCloud(np.zeros((2, 3)), np.zeros((2, 2)))


def test_channel_cloud_rejects_foreign_points():
    p = ChannelPoint(0.0, 0.0, 0.0, -3.0, Channel.SWIR, None)
    with pytest.raises(CloudError, match="SWIR"):
        ChannelCloud.from_points(Channel.GREEN, [p])


def test_point_views_round_trip(rng):
    cloud = MultispectralCloud(rng.normal(size=(4, 3)), rng.normal(size=(4, 3)), [0, 1, UNLABELED, 5],
                               [0.0, 1.0, 2.0, 3.0])
    back = MultispectralCloud.from_points(list(cloud))
    np.testing.assert_array_equal(back.xyz, cloud.xyz)
    np.testing.assert_array_equal(back.reflectance_db, cloud.reflectance_db)
    np.testing.assert_array_equal(back.labels, cloud.labels)
    assert cloud[2].label is None and cloud[3].label is SemanticClass.WOODY_DEBRIS


def test_concatenate_keeps_order(rng):
    a = MultispectralCloud(rng.normal(size=(3, 3)), rng.normal(size=(3, 3)), [0, 1, 2])
    b = MultispectralCloud(rng.normal(size=(2, 3)), rng.normal(size=(2, 3)), [3, 4])
    c = concatenate([a, b])
    np.testing.assert_array_equal(c.labels, [0, 1, 2, 3, 4])
    np.testing.assert_array_equal(c.xyz[3:], b.xyz)
