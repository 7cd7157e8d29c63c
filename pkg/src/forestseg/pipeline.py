"""End-to-end preprocessing chain and the synthetic benchmark plots."""

from __future__ import annotations

from .io import SplitSpec, split_train_test, tile_cloud
from .model import ChannelCloud, MultispectralCloud
from .preprocess import HeightNormParams, MergeParams, SorParams, merge_channels, normalize_height, sor_filter

BENCHMARK_TILES = 5
BENCHMARK_SEED = 7


def prepare_plot(swir: ChannelCloud, nir: ChannelCloud, green: ChannelCloud,
                 sor: SorParams = SorParams(), merge: MergeParams = MergeParams(),
                 height: HeightNormParams = HeightNormParams(), workers: int = 1) -> MultispectralCloud:
    """Outlier removal per channel, channel merge, then height normalisation."""
    filtered = [sor_filter(c, sor, workers)[0] for c in (swir, nir, green)]
    return normalize_height(merge_channels(*filtered, params=merge, workers=workers), height)


def benchmark_plots(scene, n_tiles: int = BENCHMARK_TILES, seed: int = BENCHMARK_SEED, workers: int = 1):
    """Prepare a synthetic scene and split its X strips into (train, test) plots."""
    cloud = prepare_plot(scene.swir, scene.nir, scene.green, workers=workers)
    return split_train_test(tile_cloud(cloud, n_tiles), SplitSpec(seed=seed, unit="per_plot"))
