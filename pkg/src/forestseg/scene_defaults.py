"""Default parameters of the synthetic forest scene.

Spectral means are invented values in dB. They are chosen only to get the
qualitative orderings right: foliage and low vegetation look alike at NIR
and Green but differ strongly at SWIR, woody parts are dark in every band,
and ground sits in between.
"""

from .model import CHANNEL_DENSITY, Channel, SemanticClass

# Share of reference points per class in a scene with trees.
CLASS_FRACTIONS = {
    SemanticClass.GROUND: 0.2014,
    SemanticClass.LOW_VEGETATION: 0.0654,
    SemanticClass.TRUNK: 0.0151,
    SemanticClass.BRANCHES: 0.0252,
    SemanticClass.FOLIAGE: 0.6908,
    SemanticClass.WOODY_DEBRIS: 0.0023,
}

# (mean_db, std_db) per class and channel.
SPECTRAL_MODEL = {
    SemanticClass.GROUND: {Channel.SWIR: (-6.0, 0.8), Channel.NIR: (-8.0, 0.8), Channel.GREEN: (-11.0, 0.8)},
    SemanticClass.LOW_VEGETATION: {Channel.SWIR: (-3.0, 0.8), Channel.NIR: (-3.0, 0.8), Channel.GREEN: (-6.0, 0.8)},
    SemanticClass.TRUNK: {Channel.SWIR: (-11.0, 0.8), Channel.NIR: (-9.0, 0.8), Channel.GREEN: (-12.0, 0.8)},
    SemanticClass.BRANCHES: {Channel.SWIR: (-8.0, 0.8), Channel.NIR: (-6.0, 0.8), Channel.GREEN: (-9.5, 0.8)},
    SemanticClass.FOLIAGE: {Channel.SWIR: (-10.0, 0.8), Channel.NIR: (-3.0, 0.8), Channel.GREEN: (-6.0, 0.8)},
    SemanticClass.WOODY_DEBRIS: {Channel.SWIR: (-2.0, 0.8), Channel.NIR: (-6.0, 0.8), Channel.GREEN: (-9.0, 0.8)},
}

# Relative sizes of the thinned channel clouds.
CHANNEL_RATIO = dict(CHANNEL_DENSITY)

EXTENT_M = (60.0, 60.0)
N_TREES = 100
TOTAL_POINTS = 1_000_000
SLOPE = 0.0
SEED = 7

# Tree shape ranges in metres.
CROWN_RADIUS_M = (2.2, 3.0)
CROWN_HALF_HEIGHT_M = (2.5, 4.0)
CROWN_BASE_M = (3.0, 6.0)
TRUNK_RADIUS_M = (0.15, 0.3)
BRANCHES_PER_TREE = (6, 10)
BRANCH_RADIUS_M = 0.06
FOLIAGE_SHELL_INNER = 0.8
TUFT_POINTS = 300
TUFT_RADIUS_M = (0.4, 0.8)
TUFT_HEIGHT_M = (0.3, 0.9)
LOG_LENGTH_M = (2.0, 4.0)
LOG_RADIUS_M = (0.1, 0.2)
GROUND_NOISE_M = 0.02
