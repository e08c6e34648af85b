"""Gauss-Hermite expectations of Gaussian functionals (closed-form references)."""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from numpy.polynomial.hermite_e import hermegauss

DEFAULT_NODES = 128


@lru_cache(maxsize=8)
def _rule(q: int) -> tuple[np.ndarray, np.ndarray]:
    z, w = hermegauss(q)
    return z, w / np.sqrt(2.0 * np.pi)


def gaussian_expectation(fn, mean, std, nodes: int = DEFAULT_NODES):
    """``E[fn(mean + std * Z)]`` for standard normal ``Z``; broadcasts over ``mean``/``std``."""
    z, w = _rule(nodes)
    mean = np.asarray(mean, dtype=float)[..., None]
    std = np.asarray(std, dtype=float)[..., None]
    return np.sum(w * fn(mean + std * z), axis=-1)


def sech2(x):
    return 1.0 / np.cosh(x) ** 2


def tanh_dd(x):
    return -2.0 * np.tanh(x) * sech2(x)


def heat_tanh(tau, x, nodes: int = DEFAULT_NODES):
    """``E[tanh(x + W_tau)]`` and its derivatives in ``x`` and ``tau``.

    Returns ``(value, d/dx, d2/dx2, d/dtau)``. The time derivative is computed by
    differentiating the quadrature formula in ``tau`` directly, not through the heat equation.
    """
    tau = float(tau)
    if tau <= 0.0:
        x = float(x)
        return np.tanh(x), sech2(x), tanh_dd(x), 0.5 * tanh_dd(x)
    z, w = _rule(nodes)
    s = np.sqrt(tau)
    a = x + s * z
    v = np.sum(w * np.tanh(a))
    vx = np.sum(w * sech2(a))
    vxx = np.sum(w * tanh_dd(a))
    vtau = np.sum(w * sech2(a) * z) / (2.0 * s)
    return float(v), float(vx), float(vxx), float(vtau)


def integrated_bm_tanh(tau, x1, x2, nodes: int = DEFAULT_NODES) -> float:
    """``E[tanh(x2 + x1 tau + int_0^tau W_s ds)]`` (the integral has variance ``tau^3 / 3``)."""
    return float(gaussian_expectation(np.tanh, x2 + x1 * tau, np.sqrt(max(tau, 0.0) ** 3 / 3.0), nodes))
