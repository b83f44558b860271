"""fflow: text-to-image flow matching in a frozen visual-feature latent space.

The pieces, bottom up: a float32 tensor library with tape autodiff
(`fflow.tensor`), frozen patch featurizers (`fflow.featurizer`), the
pixel decoder and residual branch (`fflow.autoencoder`), a single-stream
velocity transformer over joint text+image tokens (`fflow.dit`), the
flow-matching objective and Euler sampler (`fflow.flow`), caption policy
and hash text embedding (`fflow.textcond`), staged training
(`fflow.pipeline`), and feature-space diagnostics (`fflow.analysis`).
"""

from .errors import ConfigError, DataError, FlowError, FrozenWeightsError, NumericsError, ShapeError
from .rng import Rng
from .tensor import Tensor, gaussian, no_grad

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "FlowError",
    "FrozenWeightsError",
    "NumericsError",
    "Rng",
    "ShapeError",
    "Tensor",
    "gaussian",
    "no_grad",
    "__version__",
]
