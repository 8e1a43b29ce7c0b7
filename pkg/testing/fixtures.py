"""Small hand-checked networks and helpers shared by the tests."""
import sys

import numpy as np

sys.path.append(".")
from sobolprune.network import MlpModel


# Two inputs, two ReLU hidden layers of width 2, one output.
# Weight matrices are (out, in).
SMALL_LAYERS = [
    (np.array([[0.12544, 0.0277], [0.11213, -0.0023]]),
     np.array([0.1619, 0.2785])),
    (np.array([[0.1574, 0.2666], [0.4937, 0.8483]]),
     np.array([0.0937, 0.299])),
    (np.array([[0.4287, 1.3663]]), np.array([0.2184])),
]
SMALL_BOX = [(1.0, 10.0), (1.0, 10.0)]

# Hand-computed enclosures of SMALL_LAYERS over SMALL_BOX.
SMALL_POST_0 = [(0.31504, 1.6933), (0.36763, 1.3975)]
SMALL_POST_1 = [(0.241297, 0.732799), (0.766396, 2.320481)]
SMALL_OUTPUT = (1.368971, 3.703025)
SMALL_ADJOINT_0 = [(0.742019, 0.742019), (1.273323, 1.273323)]
SMALL_ADJOINT_1 = [(0.4287, 0.4287), (1.3663, 1.3663)]
SMALL_SIGNIFICANCE_0 = [1.02270, 1.31136]
SMALL_SIGNIFICANCE_1 = [0.210707, 2.123347]
# Bias added to the output when node 0 of the last hidden layer goes.
SMALL_COMPENSATION = 0.208797


def small_model(activation: str = "relu") -> MlpModel:
    """The two-layer network above."""
    return MlpModel(
        [(w.copy(), b.copy()) for w, b in SMALL_LAYERS], activation)


def uniform_points(
    rng: np.random.Generator, box, n: int) -> np.ndarray:
    """n uniform points of a box given as (lo, hi) pairs."""
    lo = np.array([pair[0] for pair in box], dtype=float)
    hi = np.array([pair[1] for pair in box], dtype=float)
    return lo + (hi - lo) * rng.random((n, len(box)))
