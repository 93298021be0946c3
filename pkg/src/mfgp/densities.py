"""Gaussian and equal-weight Gaussian-mixture log densities."""

import numpy as np
from scipy.special import logsumexp

LOG_2PI = float(np.log(2.0 * np.pi))


def gaussian_log_density(y, mean, var):
    y, mean, var = (np.asarray(a, dtype=np.float64) for a in (y, mean, var))
    return -0.5 * (LOG_2PI + np.log(var) + (y - mean) ** 2 / var)


def mixture_log_density(y, means, variances):
    """Log of ``mean_s N(y | means[s], variances[s])``; components on axis 0."""
    comp = gaussian_log_density(y, means, variances)
    return logsumexp(comp, axis=0) - np.log(comp.shape[0])
