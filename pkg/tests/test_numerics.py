import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kfno import numerics as nm


def brute_dft(x, K):
    n = len(x)
    idx = np.arange(n)
    return np.array([np.sum(x * np.exp(-2j * np.pi * k * idx / n)) / n for k in range(K + 1)])


def brute_synth(c, n):
    idx = np.arange(n)
    out = np.full(n, c[0].real)
    for k in range(1, len(c)):
        out += 2 * np.real(c[k] * np.exp(2j * np.pi * k * idx / n))
    return out


# -- activations -------------------------------------------------------------

def test_selu_matches_scalar_definition():
    xs = np.linspace(-4, 4, 41)
    ref = [nm.SELU_LAMBDA * (x if x > 0 else nm.SELU_ALPHA * (math.exp(x) - 1)) for x in xs]
    np.testing.assert_allclose(nm.selu(xs), ref, rtol=1e-14, atol=1e-15)


def test_gelu_matches_erf_form():
    xs = np.linspace(-5, 5, 51)
    ref = [0.5 * x * (1 + math.erf(x / math.sqrt(2))) for x in xs]
    np.testing.assert_allclose(nm.gelu(xs), ref, rtol=1e-14, atol=1e-16)


@pytest.mark.parametrize("name", ["selu", "gelu"])
def test_activation_derivatives_match_finite_differences(name):
    f, df = nm.ACTIVATIONS[name]
    xs = np.array([-3.0, -1.2, -0.3, 0.2, 0.7, 2.5])
    h = 1e-6
    fd = (f(xs + h) - f(xs - h)) / (2 * h)
    np.testing.assert_allclose(df(xs), fd, rtol=1e-7)


def test_gelu_longdouble_agrees_with_float64():
    xs = np.linspace(-3, 3, 13)
    np.testing.assert_allclose(nm.gelu(xs.astype(np.longdouble)).astype(float), nm.gelu(xs), rtol=1e-13,
                               atol=1e-17)


# -- dense stacks ------------------------------------------------------------

def test_dense_stack_backward_matches_finite_differences():
    rng = np.random.default_rng(3)
    params = nm.init_dense_stack(rng, "net", [3, 5, 2])
    x = rng.standard_normal((4, 3))
    gout = rng.standard_normal((4, 2))

    def loss(p, xx=x):
        return float(np.sum(nm.dense_stack_forward(p, "net", 2, xx, "selu")[0] * gout))

    _, cache = nm.dense_stack_forward(params, "net", 2, x, "selu")
    grads = {}
    gx = nm.dense_stack_backward(params, "net", 2, cache, gout, "selu", grads)
    h = 1e-6
    for key, val in params.items():
        for j in range(val.size):
            p = {k: v.copy() for k, v in params.items()}
            p[key].flat[j] += h
            up = loss(p)
            p[key].flat[j] -= 2 * h
            fd = (up - loss(p)) / (2 * h)
            assert abs(fd - grads[key].flat[j]) < 1e-7
    xp = x.copy()
    xp[1, 2] += h
    xm = x.copy()
    xm[1, 2] -= h
    assert abs((loss(params, xp) - loss(params, xm)) / (2 * h) - gx[1, 2]) < 1e-7


def test_init_dense_stack_bounds_and_shapes():
    params = nm.init_dense_stack(np.random.default_rng(0), "e", [1, 128, 64])
    assert params["e.0.W"].shape == (128, 1)
    assert params["e.1.W"].shape == (64, 128)
    assert np.abs(params["e.1.W"]).max() <= math.sqrt(1 / 128)
    assert np.abs(params["e.0.b"]).max() <= 1.0


# -- Fourier transforms ------------------------------------------------------

@given(st.integers(min_value=0, max_value=8), st.integers(min_value=0, max_value=20), st.integers(0, 2**31))
@settings(max_examples=40, deadline=None)
def test_rfft_norm_matches_brute_force_dft(K, extra, seed):
    n = 2 * K + 1 + extra
    x = np.random.default_rng(seed).standard_normal(n)
    np.testing.assert_allclose(nm.rfft_norm(x, K), brute_dft(x, K), atol=1e-12)


@given(st.integers(min_value=1, max_value=6), st.integers(min_value=0, max_value=10), st.integers(0, 2**31))
@settings(max_examples=40, deadline=None)
def test_irfft_pad_matches_brute_force_synthesis(modes, extra, seed):
    n = 2 * (modes - 1) + 1 + extra
    rng = np.random.default_rng(seed)
    c = rng.standard_normal(modes) + 1j * rng.standard_normal(modes)
    np.testing.assert_allclose(nm.irfft_pad(c, n), brute_synth(c, n), atol=1e-12)


def test_roundtrip_recovers_band_limited_signal():
    n, K = 45, 6
    t = np.arange(n) / n
    x = 0.3 + np.cos(2 * np.pi * 2 * t) - 0.5 * np.sin(2 * np.pi * 5 * t)
    np.testing.assert_allclose(nm.irfft_pad(nm.rfft_norm(x, K), n), x, atol=1e-13)


def test_normalisation_is_resolution_independent():
    # amplitudes of a sampled cosine do not depend on the sampling density
    for n in (15, 45, 90, 906):
        t = np.arange(n) / n
        c = nm.rfft_norm(2.0 + np.cos(2 * np.pi * 3 * t), 4)
        np.testing.assert_allclose(c, [2, 0, 0, 0.5, 0], atol=1e-12)


def test_rfft_norm_rejects_short_signals():
    with pytest.raises(ValueError, match="2K\\+1"):
        nm.rfft_norm(np.zeros(8), 4)
    nm.rfft_norm(np.zeros(9), 4)


def test_rfft_norm_along_time_axis_of_batch():
    x = np.random.default_rng(1).standard_normal((3, 20, 4))
    c = nm.rfft_norm(x, 5, axis=-2)
    assert c.shape == (3, 6, 4)
    np.testing.assert_allclose(c[1, :, 2], brute_dft(x[1, :, 2], 5), atol=1e-12)


@given(st.integers(min_value=1, max_value=6), st.integers(min_value=0, max_value=9), st.integers(0, 2**31))
@settings(max_examples=40, deadline=None)
def test_rfft_norm_adjoint_identity(K, extra, seed):
    n = 2 * K + 1 + extra
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n)
    g = rng.standard_normal(K + 1) + 1j * rng.standard_normal(K + 1)
    c = nm.rfft_norm(x, K)
    lhs = np.sum(g.real * c.real + g.imag * c.imag)
    rhs = np.sum(x * nm.rfft_norm_adjoint(g, n))
    assert abs(lhs - rhs) < 1e-11


@given(st.integers(min_value=1, max_value=6), st.integers(min_value=0, max_value=9), st.integers(0, 2**31))
@settings(max_examples=40, deadline=None)
def test_irfft_pad_adjoint_identity(modes, extra, seed):
    n = 2 * (modes - 1) + 1 + extra
    rng = np.random.default_rng(seed)
    c = rng.standard_normal(modes) + 1j * rng.standard_normal(modes)
    g = rng.standard_normal(n)
    lhs = np.sum(g * nm.irfft_pad(c, n))
    adj = nm.irfft_pad_adjoint(g, modes)
    rhs = np.sum(adj.real * c.real + adj.imag * c.imag)
    assert abs(lhs - rhs) < 1e-10
    assert adj[0].imag == 0.0


# -- eigen -------------------------------------------------------------------

def test_eig_residual_and_radius():
    A = np.array([[0.5, 1.0], [0.0, -0.8]])
    pair = nm.eig(A)
    np.testing.assert_allclose(A @ pair.vectors, pair.vectors * pair.values, atol=1e-14)
    assert nm.spectral_radius(A) == pytest.approx(0.8)


def test_eig_rejects_non_square_and_nan():
    with pytest.raises(ValueError):
        nm.eig(np.zeros((2, 3)))
    with pytest.raises(np.linalg.LinAlgError):
        nm.eig(np.array([[np.nan, 0.0], [0.0, 1.0]]))


def test_rotation_matrix_eigenvalues_on_unit_circle():
    th = 0.3
    R = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    vals = np.sort_complex(nm.eig(R).values)
    np.testing.assert_allclose(vals, [complex(math.cos(th), -math.sin(th)),
                                      complex(math.cos(th), math.sin(th))], atol=1e-14)


# -- grad_check harness ------------------------------------------------------

def test_grad_check_accepts_correct_and_flags_wrong_gradient():
    params = {"a": np.array([0.3, -1.2]), "b": np.array([[2.0]])}

    def loss(p):
        return np.sum(np.sin(p["a"])) * p["b"][0, 0] ** 2

    def good(p):
        return {"a": np.cos(p["a"]) * p["b"][0, 0] ** 2, "b": np.array([[2 * p["b"][0, 0] * np.sum(np.sin(p["a"]))]])}

    def bad(p):
        g = good(p)
        g["b"] = g["b"] * 1.01
        return g

    assert nm.grad_check(loss, good, params, probes=10) < 1e-8
    assert nm.grad_check(loss, bad, params, probes=10) > 5e-3


def test_grad_check_float64_mode():
    params = {"w": np.array([0.5, 1.5, -0.7])}
    err = nm.grad_check(lambda p: np.sum(p["w"] ** 3), lambda p: {"w": 3 * p["w"] ** 2}, params,
                        probes=6, precision=np.float64)
    assert err < 1e-8
