"""Shared test oracles: finite differences and straight-line re-implementations.

Everything here is deliberately independent of the package's tensor engine:
plain numpy forward passes and central differences, used to cross-check the
analytic gradients and derivatives.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from flowrl.diffcore import MlpSpec, ParamSet


def ref_gelu(x: np.ndarray) -> np.ndarray:
    return x * 0.5 * (1.0 + erf(x / math.sqrt(2.0)))


def ref_layer_norm(x: np.ndarray, scale: np.ndarray, offset: np.ndarray,
                   eps: float = 1e-6) -> np.ndarray:
    mu = x.mean(axis=1, keepdims=True)
    c = x - mu
    var = (c * c).mean(axis=1, keepdims=True)
    return c / np.sqrt(var + eps) * scale + offset


def ref_mlp(params: ParamSet, x: np.ndarray, spec: MlpSpec) -> np.ndarray:
    """Straight-line numpy re-implementation of the MLP forward pass."""
    h = np.asarray(x, dtype=np.float64)
    last = len(spec.layer_dims) - 1
    for i in range(len(spec.layer_dims)):
        h = h @ params[f"w{i}"] + params[f"b{i}"]
        if i < last:
            if spec.layer_norm:
                h = ref_layer_norm(h, params[f"ln{i}_scale"], params[f"ln{i}_offset"])
            h = ref_gelu(h)
    return h


def finite_diff_param_grads(loss_fn, params: ParamSet, step: float = 1e-4) -> ParamSet:
    """Central-difference gradient of ``loss_fn(params)`` w.r.t. every entry."""
    grads = {}
    for name, arr in params.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            hi = loss_fn(params)
            flat[j] = orig - step
            lo = loss_fn(params)
            flat[j] = orig
            gflat[j] = (hi - lo) / (2.0 * step)
        grads[name] = g
    return grads


def grad_match_fraction(analytic: ParamSet, numeric: ParamSet,
                        rel_tol: float = 1e-3, abs_tol: float = 1e-6) -> float:
    """Fraction of components where analytic and numeric gradients agree."""
    ok = 0
    total = 0
    for name in numeric:
        a = analytic[name].reshape(-1)
        n = numeric[name].reshape(-1)
        denom = np.maximum(np.abs(a), np.abs(n))
        close = (np.abs(a - n) <= rel_tol * denom) | (np.abs(a - n) <= abs_tol)
        ok += int(close.sum())
        total += a.size
    return ok / total


def random_params_like(params: ParamSet, rng: np.random.Generator,
                       scale: float = 0.4) -> ParamSet:
    """Re-randomize every parameter (including norms/biases) for gradient checks."""
    return {k: rng.normal(0.0, scale, size=v.shape) for k, v in params.items()}
