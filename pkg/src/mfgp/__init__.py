"""Multi-fidelity Gaussian-process models: MF-DGP, AR1 and NARGP."""

import jax

# All covariance algebra needs double precision.
jax.config.update("jax_enable_x64", True)

__version__ = "0.1.0"
