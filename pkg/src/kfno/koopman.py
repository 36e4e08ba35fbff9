"""Cycle-level capacity forecaster with linear latent dynamics.

A SELU encoder lifts the (scaled) maximum capacity into an ``N_k``-dimensional
latent state, one cycle is a linear step ``z' = K z + B u_bar`` and a SELU
decoder maps back. ``K`` is kept stable by projecting its eigenvalues onto
the disc of radius ``rho_max``.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import (
    as_real,
    EigenDecompositionError,
    dense_stack_backward,
    dense_stack_forward,
    eig,
    init_dense_stack,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class KoopmanConfig:
    encoder_hidden: tuple[int, ...] = (128, 64, 32, 16)
    latent_dim: int = 32
    decoder_hidden: tuple[int, ...] = (32, 16)
    n_state: int = 1
    n_inputs: int = 3
    rho_max: float = 1.0

    @property
    def encoder_layers(self) -> int:
        return len(self.encoder_hidden) + 1

    @property
    def decoder_layers(self) -> int:
        return len(self.decoder_hidden) + 1


@dataclass
class KoopmanModel:
    config: KoopmanConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def K(self) -> np.ndarray:
        return self.params["K"]

    @property
    def B(self) -> np.ndarray:
        return self.params["B"]

    def copy(self) -> "KoopmanModel":
        return KoopmanModel(self.config, {k: v.copy() for k, v in self.params.items()})


def init_koopman(config: KoopmanConfig, rng: np.random.Generator) -> KoopmanModel:
    enc = [config.n_state, *config.encoder_hidden, config.latent_dim]
    dec = [config.latent_dim, *config.decoder_hidden, config.n_state]
    params = init_dense_stack(rng, "enc", enc)
    bound = math.sqrt(1.0 / config.latent_dim)
    params["K"] = rng.uniform(-bound, bound, size=(config.latent_dim, config.latent_dim))
    bound = math.sqrt(1.0 / config.n_inputs)
    params["B"] = rng.uniform(-bound, bound, size=(config.latent_dim, config.n_inputs))
    params.update(init_dense_stack(rng, "dec", dec))
    model = KoopmanModel(config, params)
    model.params["K"] = spectral_clip(model.K, config.rho_max)
    return model


# -- single-shot operations --------------------------------------------------

def encode(model: KoopmanModel, q_max) -> np.ndarray:
    """Lift scaled capacity (scalar or batch) to the latent state."""
    q = as_real(q_max)
    z, _ = dense_stack_forward(model.params, "enc", model.config.encoder_layers,
                               q.reshape(*q.shape, 1), "selu")
    return z


def latent_step(model: KoopmanModel, z, u_bar) -> np.ndarray:
    return as_real(z) @ model.K.T + as_real(u_bar) @ model.B.T


def decode(model: KoopmanModel, z) -> np.ndarray:
    """Project latent state(s) back to scaled capacity; returns a scalar array per state."""
    out, _ = dense_stack_forward(model.params, "dec", model.config.decoder_layers,
                                 as_real(z), "selu")
    return out[..., 0]


def forecast_next(model: KoopmanModel, q_max, u_bar) -> np.ndarray:
    return decode(model, latent_step(model, encode(model, q_max), u_bar))


def rollout(model: KoopmanModel, q_max_0: float, u_bars) -> np.ndarray:
    """Multi-cycle forecast: encode once, step in latent space, decode every step."""
    u_bars = np.asarray(u_bars, dtype=float)
    if u_bars.ndim != 2 or len(u_bars) == 0:
        raise ValueError("rollout needs a non-empty (steps, n_inputs) input sequence")
    z = encode(model, q_max_0)
    latents = []
    for u in u_bars:
        z = latent_step(model, z, u)
        latents.append(z)
    return decode(model, np.stack(latents))


# -- batched pass used in training -------------------------------------------

def encode_train(model: KoopmanModel, q: np.ndarray):
    z, cache = dense_stack_forward(model.params, "enc", model.config.encoder_layers,
                                   q[:, None], "selu")
    return z, cache


def encode_backward(model: KoopmanModel, cache, grad_z: np.ndarray, grads: dict) -> np.ndarray:
    g = dense_stack_backward(model.params, "enc", model.config.encoder_layers,
                             cache, grad_z, "selu", grads)
    return g[:, 0]


def decode_train(model: KoopmanModel, z: np.ndarray):
    out, cache = dense_stack_forward(model.params, "dec", model.config.decoder_layers, z, "selu")
    return out[:, 0], cache


def decode_backward(model: KoopmanModel, cache, grad_q: np.ndarray, grads: dict) -> np.ndarray:
    return dense_stack_backward(model.params, "dec", model.config.decoder_layers,
                                cache, grad_q[:, None], "selu", grads)


# -- spectral stability ------------------------------------------------------

def clip_spectrum(K, rho_max: float) -> tuple[np.ndarray, str]:
    """Project eigenvalues of ``K`` with modulus above ``rho_max`` onto that circle.

    Returns the clipped matrix and what happened: ``"none"`` (already inside),
    ``"clipped"`` (eigenvalue projection) or ``"fallback"`` (eigenvectors too
    ill-conditioned; the whole matrix was rescaled instead).
    """
    K = np.asarray(K, dtype=float)
    if not 0.0 < rho_max <= 1.0:
        raise ValueError(f"rho_max must lie in (0, 1], got {rho_max}")
    # max row sum bounds the spectral radius; skips the eigensolver in the common case
    if np.abs(K).sum(axis=1).max() <= rho_max:
        return K.copy(), "none"
    try:
        pair = eig(K)
    except EigenDecompositionError as exc:
        log.warning("spectral clip fallback: %s", exc)
        return _rescale(K, rho_max), "fallback"
    lam = pair.values
    mod = np.abs(lam)
    if mod.max() <= rho_max:
        return K.copy(), "none"
    S = pair.vectors
    lam_new = np.where(mod > rho_max, rho_max * lam / np.where(mod > 0, mod, 1.0), lam)
    try:
        clipped = np.linalg.solve(S.T, (S * lam_new).T).T
        recon = np.linalg.solve(S.T, (S * lam).T).T
    except np.linalg.LinAlgError:
        log.warning("spectral clip fallback: singular eigenvector matrix")
        return _rescale(K, rho_max), "fallback"
    scale = np.abs(K).max()
    if (np.abs(recon - K).max() > 1e-8 * scale
            or np.abs(clipped.imag).max() > 1e-8 * max(scale, 1.0)):
        log.warning("spectral clip fallback: eigenvector reconstruction failed")
        return _rescale(K, rho_max), "fallback"
    return np.ascontiguousarray(clipped.real), "clipped"


def _rescale(K: np.ndarray, rho_max: float) -> np.ndarray:
    try:
        rho = float(np.abs(np.linalg.eigvals(K)).max())
    except np.linalg.LinAlgError:
        rho = float(np.linalg.norm(K, 2))
    if rho <= rho_max:
        return K.copy()
    return K * (rho_max / rho)


def spectral_clip(K, rho_max: float = 1.0) -> np.ndarray:
    return clip_spectrum(K, rho_max)[0]


def spectrum(K) -> tuple[np.ndarray, float]:
    """Eigenvalues sorted by descending modulus, and the spectral radius."""
    lam = eig(K).values
    order = np.lexsort((-lam.imag, -lam.real, -np.abs(lam)))
    lam = lam[order]
    return lam, float(np.abs(lam).max())


def write_spectrum_csv(path, eigenvalues, rho: float) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        fh.write(f"# rho={rho!r}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["index", "re", "im", "modulus"])
        for i, lam in enumerate(eigenvalues):
            writer.writerow([i, repr(float(lam.real)), repr(float(lam.imag)), repr(float(abs(lam)))])


def read_spectrum_csv(path) -> tuple[np.ndarray, float]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("# rho="):
        raise ValueError(f"{path}: missing '# rho=' header line")
    rho = float(lines[0][len("# rho="):])
    rows = list(csv.DictReader(lines[1:]))
    values = np.array([complex(float(r["re"]), float(r["im"])) for r in rows])
    return values, rho
