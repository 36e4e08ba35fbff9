"""Array primitives shared by the Koopman and FNO pathways.

Everything here works on float64 numpy arrays. Activations come with their
derivatives because every model in the package carries a hand-written
backward pass; ``grad_check`` is the harness that keeps those honest.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np
from scipy.special import erf

SELU_LAMBDA = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


# -- activations -------------------------------------------------------------

def as_real(x) -> np.ndarray:
    """Array view of ``x`` keeping float64/longdouble, promoting anything else to float64."""
    x = np.asarray(x)
    return x if x.dtype.kind == "f" else x.astype(float)


def _erf(x: np.ndarray) -> np.ndarray:
    if x.dtype == np.longdouble and np.finfo(np.longdouble).eps < np.finfo(float).eps:
        return _erf_extended(x)
    return erf(x)


def _erf_extended(x: np.ndarray) -> np.ndarray:
    # scipy has no long-double erf; only used by extended-precision gradient checks
    import mpmath

    def one(v):
        n, d = np.longdouble(v).as_integer_ratio()
        with mpmath.workdps(30):
            return np.longdouble(mpmath.nstr(mpmath.erf(mpmath.mpf(n) / d), 25))

    return np.vectorize(one, otypes=[np.longdouble])(x) if x.size else x.copy()


def selu(x):
    x = as_real(x)
    return SELU_LAMBDA * np.where(x > 0, x, SELU_ALPHA * np.expm1(np.minimum(x, 0.0)))


def selu_grad(x):
    x = as_real(x)
    return SELU_LAMBDA * np.where(x > 0, 1.0, SELU_ALPHA * np.exp(np.minimum(x, 0.0)))


def gelu(x):
    """Exact (erf) GELU, not the tanh approximation."""
    x = as_real(x)
    return 0.5 * x * (1.0 + _erf(x / _SQRT2))


def gelu_grad(x):
    x = as_real(x)
    cdf = 0.5 * (1.0 + _erf(x / _SQRT2))
    return cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


ACTIVATIONS: dict[str, tuple[Callable, Callable]] = {
    "selu": (selu, selu_grad),
    "gelu": (gelu, gelu_grad),
}


# -- dense stacks ------------------------------------------------------------

def dense_stack_forward(params: Mapping[str, np.ndarray], prefix: str, n_layers: int,
                        x: np.ndarray, activation: str):
    """Affine layers ``prefix.{i}.W/b`` on the last axis, activation between them.

    No activation follows the final layer. Returns the output and a cache of
    pre-activations for :func:`dense_stack_backward`.
    """
    act, _ = ACTIVATIONS[activation]
    inputs, pre = [], []
    h = x
    for i in range(n_layers):
        W = params[f"{prefix}.{i}.W"]
        b = params[f"{prefix}.{i}.b"]
        inputs.append(h)
        a = h @ W.T + b
        if i < n_layers - 1:
            pre.append(a)
            h = act(a)
        else:
            h = a
    return h, (inputs, pre)


def dense_stack_backward(params: Mapping[str, np.ndarray], prefix: str, n_layers: int,
                         cache, grad_out: np.ndarray, activation: str,
                         grads: dict[str, np.ndarray]) -> np.ndarray:
    """Accumulate parameter gradients into ``grads``; return d(loss)/d(input)."""
    _, act_grad = ACTIVATIONS[activation]
    inputs, pre = cache
    g = grad_out
    for i in reversed(range(n_layers)):
        if i < n_layers - 1:
            g = g * act_grad(pre[i])
        W = params[f"{prefix}.{i}.W"]
        h = inputs[i]
        g2 = g.reshape(-1, g.shape[-1])
        h2 = h.reshape(-1, h.shape[-1])
        _accumulate(grads, f"{prefix}.{i}.W", g2.T @ h2)
        _accumulate(grads, f"{prefix}.{i}.b", g2.sum(axis=0))
        g = g @ W
    return g


def _accumulate(grads: dict[str, np.ndarray], key: str, value: np.ndarray) -> None:
    if key in grads:
        grads[key] = grads[key] + value
    else:
        grads[key] = value


def init_dense_stack(rng: np.random.Generator, prefix: str, widths: list[int]) -> dict[str, np.ndarray]:
    """Uniform(+-sqrt(1/fan_in)) weights and biases for consecutive ``widths``."""
    params = {}
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        bound = math.sqrt(1.0 / fan_in)
        params[f"{prefix}.{i}.W"] = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        params[f"{prefix}.{i}.b"] = rng.uniform(-bound, bound, size=fan_out)
    return params


# -- Fourier transforms ------------------------------------------------------

def rfft_norm(signal, K: int, axis: int = 0) -> np.ndarray:
    """Forward real DFT divided by N, keeping modes 0..K along ``axis``.

    Dividing by N makes the coefficients amplitudes of the underlying
    function, independent of how densely it was sampled.
    """
    x = as_real(signal)
    n = x.shape[axis]
    if K < 0 or n < 2 * K + 1:
        raise ValueError(f"rfft_norm needs length >= 2K+1 = {2 * K + 1}, got {n}")
    coeffs = np.fft.rfft(x, axis=axis) / n
    return np.take(coeffs, np.arange(K + 1), axis=axis)


def irfft_pad(coeffs, n: int, axis: int = 0) -> np.ndarray:
    """Inverse of :func:`rfft_norm`: zero-pad above the kept modes, synthesise n samples.

    The imaginary part of the DC coefficient is ignored so that the output is
    real (conjugate symmetry is implied for k > 0).
    """
    c = np.asarray(coeffs)
    if c.dtype.kind != "c":
        c = c.astype(complex)
    modes = c.shape[axis]
    if n < 2 * (modes - 1) + 1:
        raise ValueError(f"irfft_pad needs n >= {2 * (modes - 1) + 1} for {modes} modes, got {n}")
    return np.fft.irfft(c, n=n, axis=axis) * n


def rfft_norm_adjoint(grad_coeffs, n: int, axis: int = 0) -> np.ndarray:
    """Gradient of a real loss w.r.t. the signal given its gradient w.r.t. rfft_norm output.

    Complex gradients follow the convention ``dL/dRe + i dL/dIm``.
    """
    g = np.array(grad_coeffs, dtype=complex)
    idx = [slice(None)] * g.ndim
    idx[axis] = slice(1, None)
    g[tuple(idx)] *= 0.5
    return np.fft.irfft(g, n=n, axis=axis)


def irfft_pad_adjoint(grad_signal, modes: int, axis: int = 0) -> np.ndarray:
    """Gradient w.r.t. the coefficients fed to :func:`irfft_pad`."""
    g = np.fft.rfft(np.asarray(grad_signal, dtype=float), axis=axis)
    g = np.take(g, np.arange(modes), axis=axis)
    idx = [slice(None)] * g.ndim
    idx[axis] = slice(1, None)
    g[tuple(idx)] *= 2.0
    idx[axis] = slice(0, 1)
    g[tuple(idx)] = g[tuple(idx)].real
    return g


# -- eigendecomposition ------------------------------------------------------

class EigenDecompositionError(np.linalg.LinAlgError):
    def __init__(self, message: str, residual: float = float("nan")):
        super().__init__(f"{message} (residual={residual:.3e})")
        self.residual = residual


@dataclass(frozen=True)
class EigenPair:
    values: np.ndarray
    vectors: np.ndarray


def eig(A, rtol: float = 1e-8) -> EigenPair:
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"eig needs a square matrix, got shape {A.shape}")
    try:
        values, vectors = np.linalg.eig(A)
    except np.linalg.LinAlgError as exc:
        raise EigenDecompositionError(f"eigensolver did not converge: {exc}") from exc
    scale = max(np.abs(A).max(), np.finfo(float).tiny)
    residual = float(np.abs(A @ vectors - vectors * values).max())
    if not np.isfinite(residual) or residual > rtol * scale:
        raise EigenDecompositionError("eigendecomposition residual too large", residual)
    return EigenPair(values, vectors)


def spectral_radius(A) -> float:
    return float(np.abs(np.linalg.eigvals(np.asarray(A, dtype=float))).max())


# -- gradient verification ---------------------------------------------------

class GradCheckError(RuntimeError):
    pass


def grad_check(loss: Callable[[dict[str, np.ndarray]], float],
               grad: Callable[[dict[str, np.ndarray]], Mapping[str, np.ndarray]],
               params: Mapping[str, np.ndarray], probes: int = 50, seed: int = 0,
               h: float = 1e-5, precision=np.longdouble) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``grad(params)`` returns float64 gradients keyed like ``params``.
    ``loss(params)`` must accept parameters of dtype ``precision``; the
    finite differences are taken in that precision so their round-off stays
    far below the 1e-8 denominator floor. Probes are spread round-robin over
    the parameter blocks, so every block is visited. The relative error uses
    ``max(|g_analytic|, |g_fd|, 1e-8)`` as denominator.
    """
    grads = grad({k: np.array(v, dtype=float) for k, v in params.items()})
    base = {k: np.array(v, dtype=precision) for k, v in params.items()}
    rng = np.random.default_rng(seed)
    keys = [k for k in base if base[k].size > 0]
    step = precision(h)
    worst = 0.0
    for p in range(probes):
        key = keys[p % len(keys)]
        flat = int(rng.integers(base[key].size))
        orig = base[key].flat[flat]
        base[key].flat[flat] = orig + step
        plus = loss(base)
        base[key].flat[flat] = orig - step
        minus = loss(base)
        base[key].flat[flat] = orig
        if not (np.isfinite(plus) and np.isfinite(minus)):
            raise GradCheckError(f"non-finite loss probing {key}[{flat}]")
        g_fd = float((plus - minus) / (2 * step))
        g_block = grads.get(key)
        g_a = 0.0 if g_block is None else float(np.asarray(g_block).flat[flat])
        err = abs(g_a - g_fd) / max(abs(g_a), abs(g_fd), 1e-8)
        worst = max(worst, err)
    return worst
