"""End-to-end training and evaluation of the coupled Koopman/FNO estimator.

Training pairs consecutive cycles (c, c+1) of the same battery. The Koopman
pathway forecasts the scaled capacity of cycle c+1 from cycle c; the FNO
estimates the SoC trajectory of cycle c+1 from its signals plus that
forecast (coupled) or the measured capacity (decoupled). Koopman parameters
are updated with Adam, FNO parameters with AdamW, and the latent operator is
spectrally clipped after every Koopman update.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import data as data_mod
from . import fno as fno_mod
from . import koopman as koop_mod
from .data import BatteryDataset, Cycle, ScalerState, SplitSpec
from .fno import FnoConfig, FnoModel
from .koopman import KoopmanConfig, KoopmanModel
from .losses import LossWeights, PairBatch, joint_loss_and_grads, total_loss
from .optim import EarlyStopping, OptimState, StepSchedule, adam_step, adamw_step, lr_at

log = logging.getLogger(__name__)

RHO_TOL = 1e-9


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    koopman: KoopmanConfig = KoopmanConfig()
    fno: FnoConfig = FnoConfig()
    loss_weights: LossWeights = LossWeights()
    huber_delta: float = 1.0
    coupled: bool = True
    koopman_lr: float = 1e-4
    koopman_batch: int = 3
    fno_lr: float = 5e-4
    fno_batch: int = 6
    decoupled_fno_lr: float = 5e-3
    decoupled_fno_batch: int = 4
    weight_decay: float = 1e-4
    lr_step_size: int = 30
    lr_gamma: float = 0.5
    patience: int = 30
    max_epochs: int = 300
    val_fraction: float = 0.1
    adapt_epochs: int = 30
    n_c: int = 90
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return _dataclass_from_dict(cls, d)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def architecture_hash(self) -> str:
        blob = json.dumps({"koopman": asdict(self.koopman), "fno": asdict(self.fno), "n_c": self.n_c},
                          sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _dataclass_from_dict(cls, d: dict):
    names = {f.name: f for f in fields(cls)}
    unknown = set(d) - set(names)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kw = {}
    defaults = cls()
    for key, value in d.items():
        current = getattr(defaults, key)
        if is_dataclass(current):
            kw[key] = _dataclass_from_dict(type(current), value)
        elif isinstance(current, tuple):
            kw[key] = tuple(value)
        else:
            kw[key] = value
    return cls(**kw)


@dataclass
class Metrics:
    soc_rmse_pct: float
    soc_mae_pct: float
    qmax_rmse_ah: float
    qmax_mae_ah: float
    inference_time_s: float
    soc_rmse_clamped_pct: float = 0.0
    soc_mae_clamped_pct: float = 0.0
    n_cycles: int = 0
    n_points: int = 0

    def to_json_record(self, scenario: str, k_shot: float) -> dict:
        return {"scenario": scenario, "k_shot": k_shot,
                "soc_rmse_pct": self.soc_rmse_pct, "soc_mae_pct": self.soc_mae_pct,
                "qmax_rmse_ah": self.qmax_rmse_ah, "qmax_mae_ah": self.qmax_mae_ah,
                "time_s": self.inference_time_s,
                "soc_rmse_clamped_pct": self.soc_rmse_clamped_pct,
                "soc_mae_clamped_pct": self.soc_mae_clamped_pct}


@dataclass
class Estimator:
    """Trained models plus the scaler they were trained under."""

    koopman: KoopmanModel
    fno: FnoModel
    scaler: ScalerState
    config: TrainConfig
    history: list[dict] = field(default_factory=list)
    epochs_run: int | None = None

    @property
    def epochs(self) -> int:
        """Epochs of optimisation behind these weights (where a resumed schedule picks up)."""
        return len(self.history) if self.epochs_run is None else self.epochs_run


# -- batching ----------------------------------------------------------------

def make_pairs(cycles: Sequence[Cycle]) -> list[tuple[Cycle, Cycle]]:
    """Consecutive (c, c+1) pairs, never crossing a battery boundary."""
    return [(a, b) for a, b in zip(cycles[:-1], cycles[1:]) if a.battery_id == b.battery_id]


def stack_pairs(pairs: Sequence[tuple[Cycle, Cycle]], weights=None) -> PairBatch:
    return PairBatch(
        q_c=np.array([a.q_max for a, _ in pairs]),
        q_next=np.array([b.q_max for _, b in pairs]),
        u_bar=np.stack([a.u_bar for a, _ in pairs]),
        grid_next=np.stack([b.grid for _, b in pairs]),
        soc_next=np.stack([b.soc for _, b in pairs]),
        weights=None if weights is None else np.asarray(weights, dtype=float),
    )


def pooled_weights(groups: Sequence[Sequence]) -> list[np.ndarray]:
    """Per-item weights making a flat mean equal the mean over groups of group means."""
    sizes = [len(g) for g in groups if len(g)]
    total = sum(sizes)
    n_groups = len(sizes)
    return [np.full(len(g), total / (n_groups * len(g))) if len(g) else np.zeros(0) for g in groups]


# -- training ----------------------------------------------------------------

def _snapshot(koopman: KoopmanModel, fno: FnoModel):
    return koopman.copy(), fno.copy()


def _evaluate_loss(batch: PairBatch | None, koopman, fno, config: TrainConfig):
    if batch is None or len(batch) == 0:
        return math.nan, None
    return total_loss(batch, koopman, fno, config.loss_weights, config.huber_delta, config.coupled)


def _fit(train_pairs, train_w, val_pairs, val_w, config: TrainConfig,
         koopman: KoopmanModel, fno: FnoModel, max_epochs: int, rng: np.random.Generator,
         start_epoch: int = 0):
    """Shared optimisation loop; mutates and returns the models plus history.

    ``start_epoch`` offsets the step schedules, so a run that continues from
    an earlier one keeps that run's decayed learning rates.
    """
    if not train_pairs:
        raise ValueError("training needs at least two consecutive cycles")
    coupled = config.coupled
    k_sched = StepSchedule(config.koopman_lr, config.lr_step_size, config.lr_gamma)
    f_sched = StepSchedule(config.fno_lr if coupled else config.decoupled_fno_lr,
                           config.lr_step_size, config.lr_gamma)
    k_state = OptimState(alpha=k_sched.alpha0)
    f_state = OptimState(alpha=f_sched.alpha0, weight_decay=config.weight_decay)
    rho_max = koopman.config.rho_max
    full_train = stack_pairs(train_pairs, train_w)
    full_val = stack_pairs(val_pairs, val_w) if val_pairs else None
    stopper = EarlyStopping(config.patience)
    history = []
    train_w = np.asarray(train_w, dtype=float)

    def koopman_update(grads):
        adam_step(koopman.params, grads, k_state)
        koopman.params["K"], event = koop_mod.clip_spectrum(koopman.params["K"], rho_max)
        rho = float(np.abs(np.linalg.eigvals(koopman.params["K"])).max())
        if rho > rho_max + RHO_TOL:
            raise AssertionError(f"spectral radius {rho} exceeds rho_max {rho_max} after clipping")
        return event

    def passes(batch_size, train_k, train_f):
        order = rng.permutation(len(train_pairs))
        events = []
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            batch = stack_pairs([train_pairs[i] for i in idx], train_w[idx])
            loss, _, gk, gf = joint_loss_and_grads(batch, koopman, fno, config.loss_weights,
                                                   config.huber_delta, coupled, train_k, train_f)
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, batch starting {start}")
            if train_k:
                events.append(koopman_update(gk))
            if train_f:
                adamw_step(fno.params, gf, f_state)
        return events

    for epoch in range(start_epoch, start_epoch + max_epochs):
        k_state.alpha = lr_at(epoch, k_sched)
        f_state.alpha = lr_at(epoch, f_sched)
        if coupled:
            events = passes(config.fno_batch, True, True)
        else:
            events = passes(config.koopman_batch, True, False)
            passes(config.decoupled_fno_batch, False, True)
        train_loss, comp = _evaluate_loss(full_train, koopman, fno, config)
        val_loss, _ = _evaluate_loss(full_val, koopman, fno, config)
        monitored = val_loss if full_val is not None else train_loss
        if not math.isfinite(monitored):
            raise TrainingDivergedError(f"non-finite loss after epoch {epoch}")
        rho = float(np.abs(np.linalg.eigvals(koopman.K)).max())
        history.append({
            "epoch": epoch, "lr_koopman": k_state.alpha, "lr_fno": f_state.alpha,
            "train_loss": float(train_loss), "rec": float(comp.rec), "lin": float(comp.lin),
            "pred": float(comp.pred), "soc": float(comp.soc),
            "val_loss": float(val_loss), "rho": rho,
            "clip_events": sum(e != "none" for e in events),
            "fallbacks": sum(e == "fallback" for e in events),
        })
        log.debug("epoch %d train %.6g val %.6g rho %.4f", epoch, train_loss, val_loss, rho)
        stop, _ = stopper.update(float(monitored), lambda: _snapshot(koopman, fno))
        if stop:
            break
    if stopper.best_snapshot is not None:
        best_k, best_f = stopper.best_snapshot
        koopman.params, fno.params = best_k.params, best_f.params
    return koopman, fno, history


def _rng(config: TrainConfig, stream: int) -> np.random.Generator:
    return np.random.default_rng([config.seed, stream])


def init_models(config: TrainConfig) -> tuple[KoopmanModel, FnoModel]:
    rng = _rng(config, 0)
    return koop_mod.init_koopman(config.koopman, rng), fno_mod.init_fno(config.fno, rng)


def train_joint(train_data: Sequence[Cycle], val_data: Sequence[Cycle], config: TrainConfig,
                models: tuple[KoopmanModel, FnoModel] | None = None, weights=None):
    """Train on one ordered cycle sequence; returns (koopman, fno, history)."""
    koopman, fno = models if models is not None else init_models(config)
    pairs = make_pairs(list(train_data))
    w = np.ones(len(pairs)) if weights is None else np.asarray(weights, dtype=float)
    val_pairs = make_pairs(list(val_data))
    return _fit(pairs, w, val_pairs, np.ones(len(val_pairs)), config, koopman, fno,
                config.max_epochs, _rng(config, 1))


def split_validation(cycles: Sequence[Cycle], fraction: float):
    """Hold out the last ``fraction`` of a battery's training cycles (contiguous).

    The validation segment starts with the last training cycle so its first
    pair has a measured predecessor.
    """
    if fraction <= 0 or len(cycles) < 4:
        return list(cycles), []
    train, val = data_mod.contiguous_split(cycles, fraction)
    return train, [train[-1], *val]


def pooled_train(datasets: Sequence[Sequence[Cycle]], config: TrainConfig,
                 models: tuple[KoopmanModel, FnoModel] | None = None, max_epochs: int | None = None,
                 extra_val: Sequence[Sequence[Cycle]] = (), start_epoch: int = 0):
    """Train one model on several batteries, each battery weighted equally.

    Each battery's pairs get weight ``P / (B * N_b)`` so the epoch objective
    is the mean over batteries of per-battery mean losses.
    """
    if not datasets:
        raise ValueError("pooled training needs at least one battery")
    train_groups, val_groups = [], []
    for cycles in datasets:
        tr, va = split_validation(cycles, config.val_fraction)
        train_groups.append(make_pairs(tr))
        val_groups.append(make_pairs(va))
    val_groups.extend(make_pairs(list(c)) for c in extra_val)
    tw = pooled_weights(train_groups)
    vw = pooled_weights(val_groups)
    train_pairs = [p for g in train_groups for p in g]
    val_pairs = [p for g in val_groups for p in g]
    koopman, fno = models if models is not None else init_models(config)
    return _fit(train_pairs, np.concatenate(tw), val_pairs,
                np.concatenate(vw) if val_pairs else np.zeros(0), config, koopman, fno,
                max_epochs if max_epochs is not None else config.max_epochs, _rng(config, 1), start_epoch)


# -- inference ---------------------------------------------------------------

@dataclass
class CyclePrediction:
    battery_id: str
    index: int
    t: np.ndarray
    q_max_hat_ah: float
    q_max_true_ah: float
    soh_hat_pct: float
    soc_pred_pct: np.ndarray
    soc_pred_clamped_pct: np.ndarray
    soc_true_pct: np.ndarray


def predict_cycle(est: Estimator, cycle: Cycle, prev_qmax: float, prev_u_bar,
                  nominal_capacity_ah: float | None = None) -> CyclePrediction:
    """Forecast this cycle's capacity from the previous one and estimate its SoC trajectory.

    ``prev_qmax`` is scaled. The SoC head sees the forecast when coupled and
    the measured capacity of ``cycle`` when decoupled.
    """
    q_hat = float(koop_mod.forecast_next(est.koopman, prev_qmax, prev_u_bar))
    q_in = q_hat if est.config.coupled else cycle.q_max
    soc = fno_mod.fno_forward(est.fno, cycle.grid, q_in)
    return _to_prediction(est, cycle, q_hat, soc, nominal_capacity_ah)


def _to_prediction(est: Estimator, cycle: Cycle, q_hat_scaled: float, soc_scaled, q_nominal):
    q_ah = float(data_mod.invert_scaler(q_hat_scaled, est.scaler, "q_max"))
    soc_pct = data_mod.invert_scaler(soc_scaled, est.scaler, "soc")
    soh = float(data_mod.soh(q_ah, q_nominal)) if q_nominal else math.nan
    return CyclePrediction(cycle.battery_id, cycle.index, cycle.t, q_ah, cycle.q_max_ah, soh,
                           soc_pct, np.clip(soc_pct, 0.0, 100.0), cycle.soc_pct)


def evaluate(est: Estimator, test_cycles: Sequence[Cycle], mode: str = "one-step",
             prev_cycle: Cycle | None = None, nominal_capacity_ah: float | None = None):
    """Metrics over a test sequence plus per-cycle predictions.

    One-step mode forecasts each cycle from the measured capacity of its
    predecessor; rollout mode starts from the predecessor once and feeds its
    own forecasts forward. Without ``prev_cycle`` the first test cycle acts
    as its own predecessor.
    """
    cycles = list(test_cycles)
    if not cycles:
        raise ValueError("evaluate needs at least one test cycle")
    if mode not in ("one-step", "rollout"):
        raise ValueError(f"unknown evaluation mode {mode!r}")
    prevs = [prev_cycle or cycles[0], *cycles[:-1]]
    t0 = time.perf_counter()
    if mode == "one-step":
        q_hat = koop_mod.forecast_next(est.koopman, np.array([p.q_max for p in prevs]),
                                       np.stack([p.u_bar for p in prevs]))
    else:
        q_hat = koop_mod.rollout(est.koopman, prevs[0].q_max, np.stack([p.u_bar for p in prevs]))
    q_in = q_hat if est.config.coupled else np.array([c.q_max for c in cycles])
    soc = _batched_fno(est.fno, cycles, q_in)
    elapsed = time.perf_counter() - t0
    preds = [_to_prediction(est, c, float(q), s, nominal_capacity_ah) for c, q, s in zip(cycles, q_hat, soc)]
    return compute_metrics(preds, elapsed), preds


def _batched_fno(fno: FnoModel, cycles: Sequence[Cycle], q_in: np.ndarray) -> list[np.ndarray]:
    lengths = {c.n for c in cycles}
    if len(lengths) == 1:
        return list(fno_mod.fno_forward(fno, np.stack([c.grid for c in cycles]), q_in))
    return [fno_mod.fno_forward(fno, c.grid, q) for c, q in zip(cycles, q_in)]


def compute_metrics(preds: Sequence[CyclePrediction], elapsed: float = 0.0) -> Metrics:
    q_err = np.array([p.q_max_hat_ah - p.q_max_true_ah for p in preds])
    soc_err = np.concatenate([p.soc_pred_pct - p.soc_true_pct for p in preds])
    soc_err_c = np.concatenate([p.soc_pred_clamped_pct - p.soc_true_pct for p in preds])
    return Metrics(
        soc_rmse_pct=float(np.sqrt(np.mean(soc_err ** 2))),
        soc_mae_pct=float(np.mean(np.abs(soc_err))),
        qmax_rmse_ah=float(np.sqrt(np.mean(q_err ** 2))),
        qmax_mae_ah=float(np.mean(np.abs(q_err))),
        inference_time_s=elapsed,
        soc_rmse_clamped_pct=float(np.sqrt(np.mean(soc_err_c ** 2))),
        soc_mae_clamped_pct=float(np.mean(np.abs(soc_err_c))),
        n_cycles=len(preds),
        n_points=int(soc_err.size),
    )


# -- end-to-end drivers ------------------------------------------------------

def prepare_battery(ds: BatteryDataset, n_c: int) -> list[data_mod.RawCycle]:
    return data_mod.prepare(ds.cycles, n_c)


def fit_single(ds: BatteryDataset, config: TrainConfig, test_fraction: float = 0.25):
    """Contiguous split of one battery, scaler fitted on the training part, joint training.

    Returns ``(estimator, train_cycles, test_cycles)`` with cycles scaled.
    """
    raw = prepare_battery(ds, config.n_c)
    raw_train, raw_test = data_mod.contiguous_split(raw, test_fraction)
    scaler = data_mod.fit_scaler(raw_train)
    train = [data_mod.build_cycle(c, scaler) for c in raw_train]
    test = [data_mod.build_cycle(c, scaler) for c in raw_test]
    koopman, fno, history = pooled_train([train], config)
    return Estimator(koopman, fno, scaler, config, history), train, test


@dataclass
class OodResult:
    k_shot: float
    metrics: Metrics
    eigenvalues: np.ndarray
    rho: float
    predictions: list[CyclePrediction]
    history: list[dict]


def run_ood(datasets: Sequence[BatteryDataset], spec: SplitSpec, k_list: Sequence[float],
            config: TrainConfig, mode: str = "one-step") -> tuple[Estimator, list[OodResult]]:
    """Pooled training on the source batteries, then zero-/few-shot evaluation.

    For each k > 0 the earliest ceil(k*N) cycles of the held-out battery join
    the pool as an extra battery and training continues from the pooled
    checkpoint for at most ``config.adapt_epochs`` epochs, resuming the
    learning-rate schedule where pooled training stopped. The scaler stays
    the one fitted on source batteries.
    """
    sources, target = data_mod.ood_split(datasets, spec)
    raw_sources = [prepare_battery(d, config.n_c) for d in sources]
    scaler = data_mod.fit_scaler([c for cs in raw_sources for c in cs])
    src = [[data_mod.build_cycle(c, scaler) for c in cs] for cs in raw_sources]
    tgt = [data_mod.build_cycle(c, scaler) for c in prepare_battery(target, config.n_c)]
    koopman, fno, history = pooled_train(src, config)
    base = Estimator(koopman, fno, scaler, config, history)
    q_n = target.meta.nominal_capacity_ah
    return base, [adapt_and_evaluate(base, src, tgt, k, mode, q_n) for k in k_list]


def adapt_and_evaluate(base: Estimator, sources: Sequence[Sequence[Cycle]], target: Sequence[Cycle],
                       k: float, mode: str = "one-step", nominal_capacity_ah: float | None = None) -> OodResult:
    """One row of the k-sweep: optional few-shot adaptation, then evaluation on the rest.

    The support set (earliest ceil(k*N) target cycles) joins the pool as its
    own battery and also serves as extra validation data for early stopping.
    Optimisation continues from ``base`` with the step schedule resumed at
    ``base.epochs``. ``base`` is never modified.
    """
    config = base.config
    support, rest = data_mod.fewshot_select(list(target), k)
    if not rest:
        raise ValueError(f"k={k} leaves no target cycles to evaluate")
    est, hist = base, []
    if len(make_pairs(support)) > 0:
        km, fm, hist = pooled_train([*sources, support], config,
                                    models=(base.koopman.copy(), base.fno.copy()),
                                    max_epochs=config.adapt_epochs, extra_val=[support],
                                    start_epoch=base.epochs)
        est = Estimator(km, fm, base.scaler, config, hist, base.epochs + len(hist))
    metrics, preds = evaluate(est, rest, mode, prev_cycle=support[-1] if support else None,
                              nominal_capacity_ah=nominal_capacity_ah)
    lam, rho = koop_mod.spectrum(est.koopman.K)
    return OodResult(k, metrics, lam, rho, preds, hist)


# -- artifacts ---------------------------------------------------------------

HISTORY_COLUMNS = ["epoch", "lr_koopman", "lr_fno", "train_loss", "rec", "lin", "pred", "soc",
                   "val_loss", "rho", "clip_events", "fallbacks"]
PREDICTION_COLUMNS = ["battery_id", "cycle_index", "t_s", "soc_true_pct", "soc_pred_pct",
                      "qmax_true_ah", "qmax_pred_ah"]


def write_history_csv(path, history: Sequence[dict]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for row in history:
            w.writerow([repr(row[c]) for c in HISTORY_COLUMNS])


def write_predictions_csv(path, preds: Sequence[CyclePrediction]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PREDICTION_COLUMNS)
        for p in preds:
            for t, st, sp in zip(p.t, p.soc_true_pct, p.soc_pred_pct):
                w.writerow([p.battery_id, p.index, repr(float(t)), repr(float(st)), repr(float(sp)),
                            repr(p.q_max_true_ah), repr(p.q_max_hat_ah)])


def write_metrics_json(path, records: Sequence[dict], include_time: bool = True) -> None:
    """Metrics records as JSON; ``include_time=False`` drops the wall-clock field
    so repeated runs compare byte-for-byte."""
    out = [r if include_time else {k: v for k, v in r.items() if k != "time_s"} for r in records]
    Path(path).write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")


# -- checkpoints -------------------------------------------------------------

CHECKPOINT_MAGIC = b"KFNOCKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, est: Estimator, extra: dict | None = None) -> None:
    """Write a versioned binary checkpoint.

    Layout: 8-byte magic ``KFNOCKPT``, uint32 version, uint64 header length,
    UTF-8 JSON header (sorted keys), then every array as little-endian
    float64 in C order at the offsets listed in the header.
    """
    arrays = [(f"koopman/{k}", v) for k, v in est.koopman.params.items()]
    arrays += [(f"fno/{k}", v) for k, v in est.fno.params.items()]
    entries, offset, blobs = [], 0, []
    for name, arr in arrays:
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format": "kfno-checkpoint", "version": CHECKPOINT_VERSION,
        "config": est.config.to_dict(), "config_hash": est.config.hash(),
        "architecture_hash": est.config.architecture_hash(),
        "scaler": est.scaler.to_dict(), "arrays": entries, "extra": extra or {}, "epochs": est.epochs,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(head)))
        fh.write(head)
        for b in blobs:
            fh.write(b)


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> tuple[Estimator, dict]:
    blob = Path(path).read_bytes()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a kfno checkpoint")
    version, head_len = struct.unpack("<IQ", blob[8:20])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(blob[20:20 + head_len].decode("utf-8"))
    config = TrainConfig.from_dict(header["config"])
    if config.hash() != header["config_hash"]:
        raise CheckpointError(f"{path}: config hash mismatch; file is corrupt or hand-edited")
    body = blob[20 + head_len:]
    params: dict[str, dict[str, np.ndarray]] = {"koopman": {}, "fno": {}}
    for e in header["arrays"]:
        arr = np.frombuffer(body, dtype="<f8", count=e["nbytes"] // 8, offset=e["offset"])
        group, name = e["name"].split("/", 1)
        params[group][name] = arr.reshape(e["shape"]).astype(float)
    est = Estimator(KoopmanModel(config.koopman, params["koopman"]), FnoModel(config.fno, params["fno"]),
                    ScalerState.from_dict(header["scaler"]), config, epochs_run=int(header["epochs"]))
    return est, header
