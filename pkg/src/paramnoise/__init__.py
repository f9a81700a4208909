"""DQN and NoisyNet agents on toy pixel environments, with FGSM test-time and
policy-induction training-time attacks."""

from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
