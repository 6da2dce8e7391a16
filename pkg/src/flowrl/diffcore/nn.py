"""MLP layers over the tensor engine.

Networks are GELU MLPs with optional per-layer layer normalization, matching
the critic/policy trunks used throughout the package. A ``ParamSet`` is a
plain dict of named float64 arrays; shapes are fixed at init time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from flowrl.errors import ConfigError, ContractError
from flowrl.diffcore.tensor import Tensor, _INV_SQRT_2PI, _SQRT2

ParamSet = dict[str, np.ndarray]

_LN_EPS = 1e-6


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of one MLP: sizes plus the layer-norm switch."""

    in_dim: int
    hidden: tuple[int, ...]
    out_dim: int
    layer_norm: bool = True

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1 or any(h < 1 for h in self.hidden):
            raise ConfigError(f"invalid MLP sizes: {self}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.in_dim, *self.hidden, self.out_dim]
        return list(zip(dims[:-1], dims[1:]))


def init_mlp(spec: MlpSpec, rng: np.random.Generator) -> ParamSet:
    """Scaled-uniform fan-in weights, zero biases, identity layer norms."""
    params: ParamSet = {}
    for i, (fan_in, fan_out) in enumerate(spec.layer_dims):
        bound = 1.0 / np.sqrt(fan_in)
        params[f"w{i}"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        params[f"b{i}"] = np.zeros(fan_out)
        if spec.layer_norm and i < len(spec.layer_dims) - 1:
            params[f"ln{i}_scale"] = np.ones(fan_out)
            params[f"ln{i}_offset"] = np.zeros(fan_out)
    return params


def param_count(params: ParamSet) -> int:
    return sum(v.size for v in params.values())


def clone_params(params: ParamSet) -> ParamSet:
    return {k: v.copy() for k, v in params.items()}


def _check_arch(params: ParamSet, x: np.ndarray, spec: MlpSpec) -> None:
    if x.ndim != 2 or x.shape[1] != spec.in_dim:
        raise ConfigError(f"input shape {x.shape} does not match in_dim {spec.in_dim}")
    for i, (fan_in, fan_out) in enumerate(spec.layer_dims):
        w = params.get(f"w{i}")
        if w is None or w.shape != (fan_in, fan_out):
            raise ConfigError(f"parameter w{i} missing or shaped {None if w is None else w.shape}, "
                              f"expected {(fan_in, fan_out)}")


@dataclass
class MlpTape:
    """Forward-pass record: output node plus the leaves gradients flow into."""

    output: Tensor
    inputs: Tensor
    params: dict[str, Tensor]
    spec: MlpSpec = field(repr=False, default=None)


def mlp_forward(params: ParamSet, x, spec: MlpSpec, *, inputs_need_grad: bool = False,
                params_need_grad: bool = True) -> MlpTape:
    """Run the MLP and record a tape for reverse-mode differentiation.

    ``x`` may be a plain (batch, in_dim) array or an existing graph Tensor
    (e.g. a concat containing a policy output).
    """
    if isinstance(x, Tensor):
        x_t = x
    else:
        x_t = Tensor(np.asarray(x, dtype=np.float64), requires_grad=inputs_need_grad)
    _check_arch(params, x_t.data, spec)

    leaves = {name: Tensor(arr, requires_grad=params_need_grad) for name, arr in params.items()}
    h = x_t
    last = len(spec.layer_dims) - 1
    for i in range(len(spec.layer_dims)):
        h = h @ leaves[f"w{i}"] + leaves[f"b{i}"]
        if i < last:
            if spec.layer_norm:
                mu = h.mean(axis=1, keepdims=True)
                centered = h - mu
                var = (centered**2).mean(axis=1, keepdims=True)
                h = centered * (var + _LN_EPS) ** -0.5 * leaves[f"ln{i}_scale"] + leaves[f"ln{i}_offset"]
            h = h.gelu()
    return MlpTape(output=h, inputs=x_t, params=leaves, spec=spec)


def backward(tape: MlpTape, output_grad) -> ParamSet:
    """Gradients of every parameter given d(loss)/d(output); untouched -> zeros."""
    tape.output.backward(np.asarray(output_grad, dtype=np.float64))
    return {name: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data))
            for name, leaf in tape.params.items()}


def mlp_value(params: ParamSet, x: np.ndarray, spec: MlpSpec) -> np.ndarray:
    """Fast tape-free forward pass."""
    _check_arch(params, np.atleast_2d(x), spec)
    h = np.asarray(x, dtype=np.float64)
    last = len(spec.layer_dims) - 1
    for i in range(len(spec.layer_dims)):
        h = h @ params[f"w{i}"] + params[f"b{i}"]
        if i < last:
            if spec.layer_norm:
                mu = h.mean(axis=1, keepdims=True)
                c = h - mu
                var = (c * c).mean(axis=1, keepdims=True)
                h = c / np.sqrt(var + _LN_EPS) * params[f"ln{i}_scale"] + params[f"ln{i}_offset"]
            h = h * 0.5 * (1.0 + erf(h / _SQRT2))
    return h


def mlp_value_and_input_jvp(params: ParamSet, x: np.ndarray, spec: MlpSpec,
                            tangent: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Forward pass plus the directional input derivative J @ tangent, per row.

    ``tangent`` has the same shape as ``x``; the returned pair is
    (output, d(output)/d(input) . tangent). Used for the per-sample dv/dz
    needed by the flow-derivative ODE without building a tape per step.
    """
    h = np.asarray(x, dtype=np.float64)
    _check_arch(params, h, spec)
    dh = np.asarray(tangent, dtype=np.float64)
    last = len(spec.layer_dims) - 1
    for i in range(len(spec.layer_dims)):
        w = params[f"w{i}"]
        h = h @ w + params[f"b{i}"]
        dh = dh @ w
        if i < last:
            if spec.layer_norm:
                mu = h.mean(axis=1, keepdims=True)
                c = h - mu
                var = (c * c).mean(axis=1, keepdims=True)
                s = 1.0 / np.sqrt(var + _LN_EPS)
                dmu = dh.mean(axis=1, keepdims=True)
                dc = dh - dmu
                dvar = 2.0 * (c * dc).mean(axis=1, keepdims=True)
                ds = -0.5 * s**3 * dvar
                g = params[f"ln{i}_scale"]
                dh = g * (dc * s + c * ds)
                h = c * s * g + params[f"ln{i}_offset"]
            cdf = 0.5 * (1.0 + erf(h / _SQRT2))
            pdf = _INV_SQRT_2PI * np.exp(-0.5 * h * h)
            dh = (cdf + h * pdf) * dh
            h = h * cdf
    return h, dh


def input_derivative(params: ParamSet, x: np.ndarray, spec: MlpSpec, component: int) -> float:
    """Exact derivative of a scalar-output net w.r.t. one input coordinate."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if spec.out_dim != 1 or x.shape[0] != 1:
        raise ContractError("input_derivative requires a single row and scalar output")
    tape = mlp_forward(params, x, spec, inputs_need_grad=True, params_need_grad=False)
    tape.output.backward(np.ones((1, 1)))
    return float(tape.inputs.grad[0, component])
