"""Training losses for the joint capacity/SoC model.

Three L1 terms train the Koopman pathway (reconstruction, latent linearity,
next-cycle prediction) and a Huber term trains the SoC pathway. Vector L1
norms are averaged over coordinates as well as over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import fno as fno_mod
from . import koopman as koop_mod
from .fno import FnoModel
from .koopman import KoopmanModel
from .numerics import as_real


@dataclass(frozen=True)
class LossWeights:
    l1_rec: float = 1.0
    l2_lin: float = 1e-4
    l3_pred: float = 1.0
    l4_soc: float = 1.0

    def __post_init__(self):
        if min(self.l1_rec, self.l2_lin, self.l3_pred, self.l4_soc) < 0:
            raise ValueError("loss weights must be non-negative")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.l1_rec, self.l2_lin, self.l3_pred, self.l4_soc)


@dataclass(frozen=True)
class LossComponents:
    rec: float
    lin: float
    pred: float
    soc: float

    def weighted(self, w: LossWeights) -> float:
        return w.l1_rec * self.rec + w.l2_lin * self.lin + w.l3_pred * self.pred + w.l4_soc * self.soc


@dataclass
class PairBatch:
    """Consecutive-cycle pairs (c, c+1), stacked.

    ``q_c``/``q_next`` are scaled capacities, ``u_bar`` the mean inputs of
    cycle c, ``grid_next`` (B, N, 3) and ``soc_next`` (B, N) the signals and
    targets of cycle c+1. ``weights`` rescale each pair's contribution
    (pooled multi-battery objective); they default to ones.
    """

    q_c: np.ndarray
    q_next: np.ndarray
    u_bar: np.ndarray
    grid_next: np.ndarray
    soc_next: np.ndarray
    weights: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.q_c)

    @property
    def w(self) -> np.ndarray:
        return np.ones(len(self)) if self.weights is None else self.weights


def _wmean(values: np.ndarray, weights: np.ndarray | None):
    # numpy scalar, not float(): extended-precision callers keep their dtype
    if weights is None:
        return np.mean(values)
    return np.mean(values * weights)


# -- scalar-style definitions ------------------------------------------------

def huber(e, delta: float = 1.0):
    if delta <= 0:
        raise ValueError("huber delta must be positive")
    a = np.abs(e)
    return np.where(a <= delta, 0.5 * a * a, delta * (a - 0.5 * delta))


def huber_grad(e, delta: float = 1.0):
    return np.clip(e, -delta, delta)


def rec_loss(q, model: KoopmanModel, weights=None) -> float:
    q = np.atleast_1d(as_real(q))
    if q.size == 0:
        raise ValueError("rec_loss needs a non-empty batch")
    q_rec = koop_mod.decode(model, koop_mod.encode(model, q))
    return _wmean(np.abs(q - q_rec), weights)


def lin_loss(q_c, q_next, u_bar, model: KoopmanModel, weights=None) -> float:
    z_next = koop_mod.encode(model, np.atleast_1d(q_next))
    z_pred = koop_mod.latent_step(model, koop_mod.encode(model, np.atleast_1d(q_c)), np.atleast_2d(u_bar))
    return _wmean(np.abs(z_next - z_pred).mean(axis=-1), weights)


def pred_loss(q_c, q_next, u_bar, model: KoopmanModel, weights=None) -> float:
    q_hat = koop_mod.forecast_next(model, np.atleast_1d(q_c), np.atleast_2d(u_bar))
    return _wmean(np.abs(np.atleast_1d(q_next) - q_hat), weights)


def soc_loss(pred, target, delta: float = 1.0, weights=None) -> float:
    """Mean Huber loss over time steps (and over the cycles of a batch)."""
    pred = as_real(pred)
    target = as_real(target)
    if pred.shape != target.shape:
        raise ValueError(f"soc_loss shape mismatch: {pred.shape} vs {target.shape}")
    per_cycle = huber(pred - target, delta).mean(axis=-1)
    return _wmean(per_cycle, weights)


def components(batch: PairBatch, koopman: KoopmanModel, fno: FnoModel,
               delta: float = 1.0, coupled: bool = True) -> LossComponents:
    w = batch.weights
    q_hat = koop_mod.forecast_next(koopman, batch.q_c, batch.u_bar)
    q_in = q_hat if coupled else batch.q_next
    soc_hat = fno_mod.fno_forward(fno, batch.grid_next, q_in)
    return LossComponents(
        rec=rec_loss(batch.q_c, koopman, w),
        lin=lin_loss(batch.q_c, batch.q_next, batch.u_bar, koopman, w),
        pred=pred_loss(batch.q_c, batch.q_next, batch.u_bar, koopman, w),
        soc=soc_loss(soc_hat, batch.soc_next, delta, w),
    )


def total_loss(batch: PairBatch, koopman: KoopmanModel, fno: FnoModel,
               weights: LossWeights = LossWeights(), delta: float = 1.0,
               coupled: bool = True) -> tuple[float, LossComponents]:
    comp = components(batch, koopman, fno, delta, coupled)
    return comp.weighted(weights), comp


# -- value and gradient ------------------------------------------------------

def _l1_grad(residual: np.ndarray) -> np.ndarray:
    # subgradient of |x| at 0 taken as 0
    return np.sign(residual)


def joint_loss_and_grads(batch: PairBatch, koopman: KoopmanModel, fno: FnoModel,
                         weights: LossWeights = LossWeights(), delta: float = 1.0,
                         coupled: bool = True, train_koopman: bool = True, train_fno: bool = True):
    """Weighted objective, its components, and gradients for both parameter sets.

    With ``coupled`` the SoC head sees the Koopman forecast, so the SoC term
    also back-propagates into the Koopman parameters. Either pathway can be
    left out (its gradient dict is then empty and its terms are skipped).
    """
    B = len(batch)
    w = batch.w
    kp = koopman.params
    kcfg = koopman.config
    gk: dict[str, np.ndarray] = {}
    gf: dict[str, np.ndarray] = {}
    rec = lin = pred = soc = 0.0

    need_koop = train_koopman or coupled
    if need_koop:
        q_both = np.concatenate([batch.q_c, batch.q_next])
        z_both, enc_cache = koop_mod.encode_train(koopman, q_both)
        z_c, z_next = z_both[:B], z_both[B:]
        z_pred = z_c @ kp["K"].T + batch.u_bar @ kp["B"].T
        dec_in = np.concatenate([z_c, z_pred])
        dec_out, dec_cache = koop_mod.decode_train(koopman, dec_in)
        q_rec, q_hat = dec_out[:B], dec_out[B:]
    else:
        q_hat = None

    if train_fno or coupled:
        q_in = q_hat if coupled else batch.q_next
        x = fno_mod.build_input(batch.grid_next, q_in)
        soc_hat, fno_cache = fno_mod.forward_train(fno, x)
        err = soc_hat - batch.soc_next
        n = err.shape[-1]
        soc = float(np.mean(huber(err, delta).mean(axis=-1) * w))
        g_soc = weights.l4_soc * huber_grad(err, delta) * (w[:, None] / (B * n))
        gf, gx = fno_mod.backward(fno, fno_cache, g_soc)
        g_q_hat_soc = gx[..., 3].sum(axis=-1) if coupled else None
        if not train_fno:
            gf = {}
    else:
        g_q_hat_soc = None

    if need_koop:
        r_rec = q_rec - batch.q_c
        r_lin = z_next - z_pred
        r_pred = q_hat - batch.q_next
        rec = float(np.mean(np.abs(r_rec) * w))
        lin = float(np.mean(np.abs(r_lin).mean(axis=-1) * w))
        pred = float(np.mean(np.abs(r_pred) * w))

        g_dec_out = np.zeros(2 * B)
        g_z_both = np.zeros_like(z_both)
        g_z_pred = np.zeros_like(z_pred)
        if train_koopman:
            g_dec_out[:B] = weights.l1_rec * _l1_grad(r_rec) * w / B
            g_dec_out[B:] = weights.l3_pred * _l1_grad(r_pred) * w / B
            g_lin = weights.l2_lin * _l1_grad(r_lin) * (w[:, None] / (B * kcfg.latent_dim))
            g_z_both[B:] += g_lin
            g_z_pred -= g_lin
        if g_q_hat_soc is not None:
            g_dec_out[B:] += g_q_hat_soc
        g_dec_in = koop_mod.decode_backward(koopman, dec_cache, g_dec_out, gk)
        g_z_both[:B] += g_dec_in[:B]
        g_z_pred += g_dec_in[B:]
        gk["K"] = g_z_pred.T @ z_c
        gk["B"] = g_z_pred.T @ batch.u_bar
        g_z_both[:B] += g_z_pred @ kp["K"]
        koop_mod.encode_backward(koopman, enc_cache, g_z_both, gk)
        if not train_koopman:
            gk = {}

    comp = LossComponents(rec, lin, pred, soc)
    active = LossWeights(
        weights.l1_rec if train_koopman else 0.0,
        weights.l2_lin if train_koopman else 0.0,
        weights.l3_pred if train_koopman else 0.0,
        weights.l4_soc if (train_fno or coupled) else 0.0,
    )
    return comp.weighted(active), comp, gk, gf
