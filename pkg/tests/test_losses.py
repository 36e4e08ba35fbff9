import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kfno import fno as F
from kfno import koopman as km
from kfno import losses as L
from kfno.numerics import grad_check

TINY_K = km.KoopmanConfig(encoder_hidden=(6,), latent_dim=4, decoder_hidden=(5,))
TINY_F = F.FnoConfig(lift_width=5, hidden=4, project_width=3, n_layers=1, modes=2)


def tiny_models(seed=0):
    rng = np.random.default_rng(seed)
    return km.init_koopman(TINY_K, rng), F.init_fno(TINY_F, rng)


def tiny_batch(seed=1, B=3, N=8, weights=None):
    rng = np.random.default_rng(seed)
    return L.PairBatch(q_c=rng.uniform(size=B), q_next=rng.uniform(size=B), u_bar=rng.uniform(size=(B, 3)),
                       grid_next=rng.uniform(size=(B, N, 3)), soc_next=rng.uniform(size=(B, N)),
                       weights=weights)


def zero_decoder(model):
    m = model.copy()
    for k in m.params:
        if k.startswith("dec."):
            m.params[k] = np.zeros_like(m.params[k])
    return m


# -- huber -------------------------------------------------------------------

def test_huber_examples():
    assert L.huber(0.5, 1.0) == 0.125
    assert L.huber(2.0, 1.0) == 1.5
    for d in (0.1, 1.0, 3.0):
        assert L.huber(d, d) == pytest.approx(0.5 * d * d)
        assert L.huber(-d, d) == pytest.approx(0.5 * d * d)
    with pytest.raises(ValueError):
        L.huber(1.0, 0.0)


@given(st.floats(-50, 50), st.floats(0.01, 5))
def test_huber_properties(e, d):
    assert L.huber(e, d) >= 0
    assert abs(L.huber_grad(e, d)) <= d
    assert L.huber(e, d) == L.huber(-e, d)


def test_huber_c1_at_threshold():
    d, h = 0.7, 1e-7
    left = (L.huber(d, d) - L.huber(d - h, d)) / h
    right = (L.huber(d + h, d) - L.huber(d, d)) / h
    assert left == pytest.approx(right, abs=1e-6)
    assert L.huber_grad(d, d) == pytest.approx(d)


# -- individual losses -------------------------------------------------------

def test_rec_loss_with_zero_decoder():
    k, _ = tiny_models()
    assert float(L.rec_loss(np.array([0.5]), zero_decoder(k))) == 0.5
    with pytest.raises(ValueError):
        L.rec_loss(np.array([]), k)


def test_pred_loss_constant_zero_forecast():
    k, _ = tiny_models()
    z = zero_decoder(k)
    assert float(L.pred_loss(np.array([0.1, 0.9]), np.array([0.3, 0.5]), np.zeros((2, 3)), z)) == pytest.approx(0.4)


def test_lin_loss_identity_operator():
    k, _ = tiny_models()
    k = k.copy()
    k.params["K"] = np.eye(4)
    k.params["B"] = np.zeros((4, 3))
    q = np.array([0.2, 0.7])
    assert float(L.lin_loss(q, q, np.ones((2, 3)), k)) == 0.0


def test_lin_loss_zero_encoder():
    k, _ = tiny_models()
    k = k.copy()
    for key in k.params:
        if key.startswith("enc."):
            k.params[key] = np.zeros_like(k.params[key])
    k.params["B"] = np.zeros((4, 3))
    assert float(L.lin_loss(np.array([0.1, 0.3]), np.array([0.9, 0.2]), np.ones((2, 3)), k)) == 0.0


def test_losses_match_scalar_loop_oracle():
    k, f = tiny_models(3)
    b = tiny_batch(4)
    rec = lin = pred = soc = 0.0
    for j in range(len(b)):
        zc = km.encode(k, b.q_c[j])
        zn = km.encode(k, b.q_next[j])
        zp = k.K @ zc + k.B @ b.u_bar[j]
        rec += abs(b.q_c[j] - float(km.decode(k, zc)))
        lin += sum(abs(zn[i] - zp[i]) for i in range(len(zn))) / len(zn)
        qh = float(km.decode(k, zp))
        pred += abs(b.q_next[j] - qh)
        s = F.fno_forward(f, b.grid_next[j], qh)
        soc += sum(float(L.huber(s[t] - b.soc_next[j, t], 1.0)) for t in range(len(s))) / len(s)
    n = len(b)
    comp = L.components(b, k, f)
    assert float(comp.rec) == pytest.approx(rec / n, rel=1e-12)
    assert float(comp.lin) == pytest.approx(lin / n, rel=1e-12)
    assert float(comp.pred) == pytest.approx(pred / n, rel=1e-12)
    assert float(comp.soc) == pytest.approx(soc / n, rel=1e-12)


def test_soc_loss_examples():
    t = np.linspace(0, 1, 10)
    assert float(L.soc_loss(t, t)) == 0.0
    assert float(L.soc_loss(t + 0.3, t, 1.0)) == pytest.approx(0.045)
    with pytest.raises(ValueError):
        L.soc_loss(np.zeros(5), np.zeros(6))


# -- total -------------------------------------------------------------------

def test_weighted_sum_examples():
    w = L.LossWeights()
    assert (w.l1_rec, w.l2_lin, w.l3_pred, w.l4_soc) == (1.0, 1e-4, 1.0, 1.0)
    assert L.LossComponents(0, 0, 0, 0).weighted(w) == 0
    assert L.LossComponents(1, 1, 1, 1).weighted(w) == pytest.approx(3.0001)
    with pytest.raises(ValueError):
        L.LossWeights(l2_lin=-1.0)


def test_total_is_sum_of_components_and_linear_in_weights():
    k, f = tiny_models(5)
    b = tiny_batch(6)
    w1 = L.LossWeights(1, 2, 3, 4)
    w2 = L.LossWeights(0.5, 0.1, 0, 2)
    t1, c = L.total_loss(b, k, f, w1)
    t2, _ = L.total_loss(b, k, f, w2)
    t12, _ = L.total_loss(b, k, f, L.LossWeights(1.5, 2.1, 3, 6))
    assert float(t1) == pytest.approx(float(c.rec + 2 * c.lin + 3 * c.pred + 4 * c.soc), rel=1e-13)
    assert float(t12) == pytest.approx(float(t1 + t2), rel=1e-12)


def test_joint_loss_value_matches_total_loss():
    k, f = tiny_models(7)
    b = tiny_batch(8, weights=np.array([0.5, 1.0, 1.5]))
    for coupled in (True, False):
        tot, comp = L.total_loss(b, k, f, coupled=coupled)
        jt, jc, gk, gf = L.joint_loss_and_grads(b, k, f, coupled=coupled)
        assert jt == pytest.approx(float(tot), rel=1e-12)
        assert set(gk) == set(k.params) and set(gf) == set(f.params)


def test_coupled_equals_decoupled_when_forecast_is_exact():
    k, f = tiny_models(9)
    b = tiny_batch(10)
    exact = L.PairBatch(b.q_c, km.forecast_next(k, b.q_c, b.u_bar), b.u_bar, b.grid_next, b.soc_next)
    c1 = L.components(exact, k, f, coupled=True)
    c2 = L.components(exact, k, f, coupled=False)
    assert float(c1.soc) == float(c2.soc)


def test_decoupled_soc_gradient_does_not_reach_koopman():
    k, f = tiny_models(11)
    b = tiny_batch(12)
    w = L.LossWeights(0, 0, 0, 1)
    _, _, gk, _ = L.joint_loss_and_grads(b, k, f, w, coupled=False)
    assert all(np.all(g == 0) for g in gk.values())
    _, _, gk, _ = L.joint_loss_and_grads(b, k, f, w, coupled=True)
    assert any(np.any(g != 0) for g in gk.values())


@pytest.mark.parametrize("coupled", [True, False])
def test_joint_gradients_pass_grad_check(coupled):
    k, f = tiny_models(13)
    b = tiny_batch(14, B=2, N=6, weights=np.array([0.7, 1.3]))
    w = L.LossWeights(1.0, 0.5, 1.0, 1.0)
    nk = len(k.params)

    def split(p):
        kp = {n: p["k:" + n] for n in k.params}
        fp = {n: p["f:" + n] for n in f.params}
        return km.KoopmanModel(TINY_K, kp), F.FnoModel(TINY_F, fp)

    def loss(p):
        kk, ff = split(p)
        dt = next(iter(p.values())).dtype
        bb = L.PairBatch(*(np.asarray(a, dtype=dt) for a in (b.q_c, b.q_next, b.u_bar, b.grid_next, b.soc_next)),
                         weights=b.weights.astype(dt))
        return L.total_loss(bb, kk, ff, w, 0.1, coupled)[0]

    def grad(p):
        kk, ff = split(p)
        _, _, gk, gf = L.joint_loss_and_grads(b, kk, ff, w, 0.1, coupled)
        return {**{"k:" + n: v for n, v in gk.items()}, **{"f:" + n: v for n, v in gf.items()}}

    params = {**{"k:" + n: v for n, v in k.params.items()}, **{"f:" + n: v for n, v in f.params.items()}}
    assert len(params) == nk + len(f.params)
    assert grad_check(loss, grad, params, probes=2 * len(params), seed=1) < 1e-4
