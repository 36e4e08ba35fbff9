"""Fourier neural operator mapping intra-cycle signals to an SoC trajectory.

Input per time step is ``[V, I, T, Q_max]`` in scaled units, the capacity
broadcast over the cycle. Shapes follow ``(..., N, C)``: time on the
second-to-last axis, channels last, optional leading batch axes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import (
    as_real,
    dense_stack_backward,
    dense_stack_forward,
    gelu,
    gelu_grad,
    init_dense_stack,
    irfft_pad,
    irfft_pad_adjoint,
    rfft_norm,
    rfft_norm_adjoint,
)

TIME_AXIS = -2


@dataclass(frozen=True)
class FnoConfig:
    n_in: int = 4
    lift_width: int = 32
    hidden: int = 48
    project_width: int = 32
    n_layers: int = 4
    modes: int = 20

    @property
    def min_length(self) -> int:
        return 2 * self.modes + 1


@dataclass(frozen=True)
class FourierLayer:
    R: np.ndarray  # complex, (modes + 1, c_out, c_in)
    W: np.ndarray
    bias: np.ndarray


@dataclass
class FnoModel:
    config: FnoConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def layer(self, i: int) -> FourierLayer:
        p = self.params
        return FourierLayer(p[f"layers.{i}.R_re"] + 1j * p[f"layers.{i}.R_im"],
                            p[f"layers.{i}.W"], p[f"layers.{i}.b"])

    def copy(self) -> "FnoModel":
        return FnoModel(self.config, {k: v.copy() for k, v in self.params.items()})


def init_fno(config: FnoConfig, rng: np.random.Generator) -> FnoModel:
    c = config.hidden
    params = init_dense_stack(rng, "lift", [config.n_in, config.lift_width, c])
    spec_bound = math.sqrt(1.0 / (c * (config.modes + 1)))
    for i in range(config.n_layers):
        shape = (config.modes + 1, c, c)
        params[f"layers.{i}.R_re"] = rng.uniform(-spec_bound, spec_bound, size=shape)
        params[f"layers.{i}.R_im"] = rng.uniform(-spec_bound, spec_bound, size=shape)
        params.update({k.replace("pw.0", f"layers.{i}"): v
                       for k, v in init_dense_stack(rng, "pw", [c, c]).items()})
    params.update(init_dense_stack(rng, "project", [c, config.project_width, 1]))
    return FnoModel(config, params)


def _check_length(model: FnoModel, n: int) -> None:
    if n < model.config.min_length:
        raise ValueError(f"cycle has {n} samples; modes={model.config.modes} needs at least "
                         f"{model.config.min_length}")


def lift(model: FnoModel, x) -> np.ndarray:
    out, _ = dense_stack_forward(model.params, "lift", 2, as_real(x), "gelu")
    return out


def spectral_conv(v: np.ndarray, R: np.ndarray) -> np.ndarray:
    """Per-mode complex channel mixing of the lowest modes; higher modes dropped."""
    n = v.shape[TIME_AXIS]
    vh = rfft_norm(v, R.shape[0] - 1, axis=TIME_AXIS)
    yh = np.einsum("koi,...ki->...ko", R, vh)
    return irfft_pad(yh, n, axis=TIME_AXIS)


def fourier_layer(v, layer: FourierLayer) -> np.ndarray:
    v = as_real(v)
    return gelu(spectral_conv(v, layer.R) + v @ layer.W.T + layer.bias)


def project(model: FnoModel, v) -> np.ndarray:
    out, _ = dense_stack_forward(model.params, "project", 2, as_real(v), "gelu")
    return out


def build_input(u_cycle, q_max_hat) -> np.ndarray:
    """Append the capacity estimate as a constant fourth channel."""
    u = as_real(u_cycle)
    q = np.broadcast_to(as_real(q_max_hat)[..., None, None], (*u.shape[:-1], 1))
    return np.concatenate([u, q], axis=-1)


def fno_forward(model: FnoModel, u_cycle, q_max_hat) -> np.ndarray:
    """SoC trajectory (scaled) for ``u_cycle`` of shape (..., N, 3)."""
    x = build_input(u_cycle, q_max_hat)
    _check_length(model, x.shape[TIME_AXIS])
    v = lift(model, x)
    for i in range(model.config.n_layers):
        v = fourier_layer(v, model.layer(i))
    return project(model, v)[..., 0]


# -- training pass with hand-written backward --------------------------------

def forward_train(model: FnoModel, x: np.ndarray):
    """Forward for a batch ``x`` of shape (B, N, n_in); returns output (B, N) and cache."""
    _check_length(model, x.shape[TIME_AXIS])
    p = model.params
    K = model.config.modes
    v, lift_cache = dense_stack_forward(p, "lift", 2, x, "gelu")
    layer_caches = []
    for i in range(model.config.n_layers):
        R = p[f"layers.{i}.R_re"] + 1j * p[f"layers.{i}.R_im"]
        vh = rfft_norm(v, K, axis=TIME_AXIS)
        yh = np.einsum("koi,bki->bko", R, vh)
        pre = irfft_pad(yh, v.shape[TIME_AXIS], axis=TIME_AXIS) + v @ p[f"layers.{i}.W"].T + p[f"layers.{i}.b"]
        layer_caches.append((v, vh, R, pre))
        v = gelu(pre)
    out, proj_cache = dense_stack_forward(p, "project", 2, v, "gelu")
    return out[..., 0], (lift_cache, layer_caches, proj_cache)


def backward(model: FnoModel, cache, grad_out: np.ndarray):
    """Return (parameter grads, grad w.r.t. the input x)."""
    p = model.params
    lift_cache, layer_caches, proj_cache = cache
    grads: dict[str, np.ndarray] = {}
    g = dense_stack_backward(p, "project", 2, proj_cache, grad_out[..., None], "gelu", grads)
    for i in reversed(range(model.config.n_layers)):
        v, vh, R, pre = layer_caches[i]
        n = v.shape[TIME_AXIS]
        g = g * gelu_grad(pre)
        g2 = g.reshape(-1, g.shape[-1])
        grads[f"layers.{i}.W"] = g2.T @ v.reshape(-1, v.shape[-1])
        grads[f"layers.{i}.b"] = g2.sum(axis=0)
        gy = irfft_pad_adjoint(g, R.shape[0], axis=TIME_AXIS)
        gR = np.einsum("bko,bki->koi", gy, vh.conj())
        grads[f"layers.{i}.R_re"] = gR.real
        grads[f"layers.{i}.R_im"] = gR.imag
        gvh = np.einsum("koi,bko->bki", R.conj(), gy)
        g = g @ p[f"layers.{i}.W"] + rfft_norm_adjoint(gvh, n, axis=TIME_AXIS)
    gx = dense_stack_backward(p, "lift", 2, lift_cache, g, "gelu", grads)
    return grads, gx
