import numpy as np
import pytest

from forestseg.geometry import eigen_features
from forestseg.model import Channel, SemanticClass, class_distribution
from forestseg.scene_defaults import CLASS_FRACTIONS
from forestseg.synthetic import SceneError, SceneSpec, generate_scene, parse_scene_config

SMALL = dict(extent_m=(20, 20), n_trees=6, total_points=30_000, seed=11)


def test_treeless_scene_has_ground_and_low_vegetation_only():
    scene = generate_scene(SceneSpec(**{**SMALL, "n_trees": 0}))
    assert set(np.unique(scene.reference.labels)) == {SemanticClass.GROUND, SemanticClass.LOW_VEGETATION}


def test_generation_is_deterministic():
    a, b = generate_scene(SceneSpec(**SMALL)), generate_scene(SceneSpec(**SMALL))
    for ca, cb in zip(a, b):
        np.testing.assert_array_equal(ca.xyz, cb.xyz)
    np.testing.assert_array_equal(a.reference.reflectance_db, b.reference.reflectance_db)
    c = generate_scene(SceneSpec(**{**SMALL, "seed": 12}))
    assert not np.array_equal(a.reference.xyz, c.reference.xyz)


def test_class_fractions_and_total(small_scene):
    ref = small_scene.reference
    assert len(ref) == 40_000
    dist = class_distribution(ref)
    total = sum(CLASS_FRACTIONS.values())
    for cls, f in CLASS_FRACTIONS.items():
        assert dist[cls] == pytest.approx(f / total, abs=0.02)


def test_channel_thinning_ratios(small_scene):
    n = len(small_scene.reference)
    probs = SceneSpec().keep_probabilities()
    assert sum(probs.values()) == pytest.approx(1.0)
    for cloud in small_scene.channels:
        assert len(cloud) / n == pytest.approx(probs[cloud.channel], abs=0.01)
    assert small_scene.swir.channel is Channel.SWIR


def test_degenerate_extent_rejected():
    with pytest.raises(SceneError, match="extent"):
        SceneSpec(extent_m=(0, 10))
    with pytest.raises(SceneError):
        SceneSpec(n_trees=-1)


def test_trunk_points_form_vertical_walls(small_scene):
    ref = small_scene.reference
    trunk = ref.xyz[ref.labels == SemanticClass.TRUNK]
    # The trunk points of one tree are the ones closest to its lowest trunk point.
    seed = trunk[np.argmin(trunk[:, 2])]
    near = trunk[np.linalg.norm(trunk[:, :2] - seed[:2], axis=1) < 0.7]
    assert eigen_features(near).verticality >= 0.9


def test_reference_channels_follow_spectral_model(small_scene):
    ref = small_scene.reference
    model = SceneSpec().spectral_model
    for cls in (SemanticClass.GROUND, SemanticClass.FOLIAGE):
        vals = ref.reflectance_db[ref.labels == cls]
        for ch in Channel:
            assert vals[:, ch.column].mean() == pytest.approx(model[cls][ch][0], abs=0.1)


def test_config_parsing():
    spec = parse_scene_config("""
        # small plot
        extent_m = 30 40
        n_trees = 5
        seed = 99
        low_vegetation = false
        fraction.trunk = 0.2
        spectral.woody_debris.swir = -2 0.5
        channel_ratio.green = 100
    """)
    assert spec.extent_m == (30.0, 40.0) and spec.n_trees == 5 and spec.seed == 99
    assert spec.low_vegetation is False
    assert spec.class_fractions[SemanticClass.TRUNK] == 0.2
    assert spec.spectral_model[SemanticClass.WOODY_DEBRIS][Channel.SWIR] == (-2.0, 0.5)
    assert spec.channel_ratio[Channel.GREEN] == 100


@pytest.mark.parametrize("text,match", [
    ("extent_m = 1", "line 1"),
    ("colour = red", "unknown key"),
    ("fraction.shrub = 0.1", "line 1"),
    ("just words", "key = value"),
])
def test_config_errors(text, match):
    with pytest.raises(SceneError, match=match):
        parse_scene_config(text)


def test_scene_without_low_vegetation():
    scene = generate_scene(SceneSpec(**{**SMALL, "low_vegetation": False}))
    assert SemanticClass.LOW_VEGETATION not in set(np.unique(scene.reference.labels))
