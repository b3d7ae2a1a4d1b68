"""Draw-and-discard private distributed learning of generalized linear models."""

from .client import PrivacyParams, client_update, clip, laplace_sample
from .errors import DDMLError
from .glm import FeatureDef, ModelSpec, average_gradient, average_models, expand_features, loss, predict
from .pool import InstancePool, SpamPolicy, Strategy, init_pool
from .sim import SimConfig, run_sim

__all__ = [
    "DDMLError",
    "FeatureDef",
    "InstancePool",
    "ModelSpec",
    "PrivacyParams",
    "SimConfig",
    "SpamPolicy",
    "Strategy",
    "average_gradient",
    "average_models",
    "client_update",
    "clip",
    "expand_features",
    "init_pool",
    "laplace_sample",
    "loss",
    "predict",
    "run_sim",
]

__version__ = "0.1.0"
