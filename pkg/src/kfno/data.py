"""Cycle ingestion, resampling, scaling and train/test splitting.

Raw cycles come from a long-format CSV (one row per sample). They are
linearly resampled onto ``N_c`` evenly spaced points between the first and
last timestamp, min-max scaled with statistics fitted on training cycles only,
and turned into :class:`Cycle` records the models consume.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

CSV_COLUMNS = ["battery_id", "cycle_index", "t_s", "voltage_v", "current_a",
               "temperature_c", "q_discharged_ah", "q_max_ah", "soc_pct"]
REQUIRED_COLUMNS = CSV_COLUMNS[:7]
RESOLUTION_PRESETS = (906, 90, 45, 15)

SCALED_CHANNELS = ("voltage", "current", "temperature", "q_max", "soc")


class DataFormatError(ValueError):
    pass


@dataclass
class RawCycle:
    battery_id: str
    cycle_index: int
    t: np.ndarray
    voltage: np.ndarray
    current: np.ndarray
    temperature: np.ndarray
    q_discharged: np.ndarray
    q_max: float
    soc_pct: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.t)


@dataclass(frozen=True)
class BatteryMeta:
    battery_id: str
    chemistry: str = "unknown"
    charge_c_rate: float = 0.5
    discharge_c_rate: float = 1.0
    temperature_c: float = 25.0
    nominal_capacity_ah: float = 1.0
    nominal_voltage_v: float = 3.6

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "BatteryMeta":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)


@dataclass
class BatteryDataset:
    meta: BatteryMeta
    cycles: list[RawCycle] = field(default_factory=list)

    @property
    def battery_id(self) -> str:
        return self.meta.battery_id


@dataclass
class Cycle:
    """One resampled, scaled cycle.

    ``grid`` holds scaled (V, I, T) with shape (N_c, 3); ``soc`` is the scaled
    SoC target, ``q_max`` the scaled capacity and ``u_bar`` the per-channel
    mean of ``grid``. Unscaled copies are kept for reporting.
    """

    battery_id: str
    index: int
    grid: np.ndarray
    soc: np.ndarray
    q_max: float
    u_bar: np.ndarray
    t: np.ndarray
    soc_pct: np.ndarray
    q_max_ah: float

    @property
    def n(self) -> int:
        return len(self.soc)


# -- CSV / JSON IO -----------------------------------------------------------

def parse_cycles(path) -> list[RawCycle]:
    """Read the long-format cycle CSV into time-sorted cycles.

    Cycles are ordered by (battery_id, cycle_index). ``q_max_ah`` may be left
    empty, in which case the largest ``q_discharged_ah`` of the cycle is used.
    """
    path = Path(path)
    groups: dict[tuple[str, int], list[tuple]] = {}
    qmax_cols: dict[tuple[str, int], set[float]] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file, header required") from None
        header = [h.strip() for h in header]
        missing = [c for c in REQUIRED_COLUMNS if c not in header]
        if missing:
            raise DataFormatError(f"{path}: missing columns {missing}")
        col = {name: header.index(name) for name in header}
        has_qmax = "q_max_ah" in col
        has_soc = "soc_pct" in col
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataFormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                key = (row[col["battery_id"]].strip(), int(row[col["cycle_index"]]))
                values = tuple(float(row[col[c]]) for c in REQUIRED_COLUMNS[2:])
                soc = float(row[col["soc_pct"]]) if has_soc and row[col["soc_pct"]].strip() else math.nan
                qmax = row[col["q_max_ah"]].strip() if has_qmax else ""
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from None
            if not all(math.isfinite(v) for v in values):
                raise DataFormatError(f"{path}:{lineno}: non-finite value")
            groups.setdefault(key, []).append(values + (soc,))
            if qmax:
                try:
                    qmax_cols.setdefault(key, set()).add(float(qmax))
                except ValueError as exc:
                    raise DataFormatError(f"{path}:{lineno}: {exc}") from None

    cycles = []
    for key in sorted(groups):
        arr = np.array(sorted(groups[key], key=lambda r: r[0]), dtype=float)
        t = arr[:, 0]
        if np.any(np.diff(t) <= 0):
            raise DataFormatError(f"{path}: cycle {key[0]}/{key[1]} has non-increasing timestamps")
        if key in qmax_cols:
            vals = qmax_cols[key]
            if len(vals) != 1:
                raise DataFormatError(f"{path}: cycle {key[0]}/{key[1]} has inconsistent q_max_ah")
            q_max = vals.pop()
        else:
            q_max = float(arr[:, 4].max())
        if q_max <= 0:
            raise DataFormatError(f"{path}: cycle {key[0]}/{key[1]} has non-positive q_max")
        soc = arr[:, 5]
        cycles.append(RawCycle(key[0], key[1], t, arr[:, 1], arr[:, 2], arr[:, 3], arr[:, 4],
                               q_max, None if np.all(np.isnan(soc)) else soc))
    return cycles


def write_cycles_csv(path, cycles: Iterable[RawCycle]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for c in cycles:
            soc = c.soc_pct if c.soc_pct is not None else [None] * len(c)
            for j in range(len(c)):
                writer.writerow([c.battery_id, c.cycle_index, repr(float(c.t[j])),
                                 repr(float(c.voltage[j])), repr(float(c.current[j])),
                                 repr(float(c.temperature[j])), repr(float(c.q_discharged[j])),
                                 repr(float(c.q_max)), "" if soc[j] is None else repr(float(soc[j]))])


def read_meta(path) -> BatteryMeta:
    return BatteryMeta.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def write_meta(path, meta: BatteryMeta) -> None:
    Path(path).write_text(meta.to_json() + "\n", encoding="utf-8")


def load_dataset(csv_path, meta_path=None) -> list[BatteryDataset]:
    """Group a cycle CSV into per-battery datasets, attaching metadata if given.

    ``meta_path`` may hold one metadata object or a list of them.
    """
    raw = parse_cycles(csv_path)
    metas: dict[str, BatteryMeta] = {}
    if meta_path is not None:
        blob = json.loads(Path(meta_path).read_text(encoding="utf-8"))
        for d in blob if isinstance(blob, list) else [blob]:
            m = BatteryMeta.from_dict(d)
            metas[m.battery_id] = m
    out: dict[str, BatteryDataset] = {}
    for c in raw:
        ds = out.setdefault(c.battery_id, BatteryDataset(metas.get(c.battery_id, BatteryMeta(c.battery_id))))
        ds.cycles.append(c)
    return list(out.values())


# -- per-cycle transforms ----------------------------------------------------

def resample_cycle(raw: RawCycle, n: int) -> RawCycle:
    """Linear interpolation of every channel onto ``n`` evenly spaced times."""
    if len(raw) < 2:
        raise ValueError(f"cycle {raw.battery_id}/{raw.cycle_index} has a single sample; cannot resample")
    if n < 2:
        raise ValueError("resampled length must be at least 2")
    t_new = np.linspace(raw.t[0], raw.t[-1], n)

    def interp(y):
        return None if y is None else np.interp(t_new, raw.t, y)

    return RawCycle(raw.battery_id, raw.cycle_index, t_new, interp(raw.voltage), interp(raw.current),
                    interp(raw.temperature), interp(raw.q_discharged), raw.q_max, interp(raw.soc_pct))


def soc_target(q_discharged, q_max: float):
    """Aging-aware SoC in percent, clamped to [0, 100]."""
    if q_max <= 0:
        raise ValueError("q_max must be positive")
    q = np.asarray(q_discharged, dtype=float)
    return np.clip((1.0 - q / q_max) * 100.0, 0.0, 100.0)


def soh(q_max, q_nominal: float):
    """Capacity-based state of health in percent."""
    if q_nominal <= 0:
        raise ValueError("nominal capacity must be positive")
    return np.asarray(q_max, dtype=float) / q_nominal * 100.0


# -- scaling -----------------------------------------------------------------

@dataclass(frozen=True)
class ScalerState:
    """Per-channel (min, max) fitted on training cycles."""

    ranges: dict[str, tuple[float, float]]

    def to_dict(self) -> dict:
        return {k: list(v) for k, v in self.ranges.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ScalerState":
        return cls({k: (float(v[0]), float(v[1])) for k, v in d.items()})


def _channel_values(cycles: Sequence[RawCycle], channel: str) -> np.ndarray:
    if channel == "q_max":
        return np.array([c.q_max for c in cycles])
    if channel == "soc":
        return np.concatenate([soc_target(c.q_discharged, c.q_max) for c in cycles])
    return np.concatenate([getattr(c, channel) for c in cycles])


def fit_scaler(train_cycles: Sequence[RawCycle]) -> ScalerState:
    if not train_cycles:
        raise ValueError("cannot fit a scaler on zero cycles")
    ranges = {}
    for ch in SCALED_CHANNELS:
        v = _channel_values(train_cycles, ch)
        lo, hi = float(v.min()), float(v.max())
        if not hi > lo:
            raise ValueError(f"channel {ch!r} is constant on the training data; cannot min-max scale")
        ranges[ch] = (lo, hi)
    return ScalerState(ranges)


def apply_scaler(values, state: ScalerState, channel: str):
    lo, hi = state.ranges[channel]
    return (np.asarray(values, dtype=float) - lo) / (hi - lo)


def invert_scaler(values, state: ScalerState, channel: str):
    lo, hi = state.ranges[channel]
    return np.asarray(values, dtype=float) * (hi - lo) + lo


def build_cycle(raw: RawCycle, scaler: ScalerState) -> Cycle:
    """Scale an already-resampled raw cycle into a model-ready :class:`Cycle`."""
    grid = np.stack([apply_scaler(raw.voltage, scaler, "voltage"),
                     apply_scaler(raw.current, scaler, "current"),
                     apply_scaler(raw.temperature, scaler, "temperature")], axis=1)
    soc_pct = soc_target(raw.q_discharged, raw.q_max)
    return Cycle(raw.battery_id, raw.cycle_index, grid, apply_scaler(soc_pct, scaler, "soc"),
                 float(apply_scaler(raw.q_max, scaler, "q_max")), grid.mean(axis=0),
                 raw.t - raw.t[0], soc_pct, float(raw.q_max))


def prepare(raw_cycles: Sequence[RawCycle], n: int) -> list[RawCycle]:
    return [resample_cycle(c, n) for c in raw_cycles]


# -- splits ------------------------------------------------------------------

def _count(fraction: float, n: int) -> int:
    # guard against 0.1*30 = 3.0000000000000004 style round-up
    return math.ceil(round(fraction * n, 9))


def contiguous_split(cycles: Sequence, test_fraction: float):
    """Last ceil(fraction*N) cycles are test, the rest train."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")
    n_test = _count(test_fraction, len(cycles))
    if n_test >= len(cycles):
        raise ValueError(f"test fraction {test_fraction} leaves no training cycles out of {len(cycles)}")
    return list(cycles[:len(cycles) - n_test]), list(cycles[len(cycles) - n_test:])


def fewshot_select(test_cycles: Sequence, k: float):
    """Earliest ceil(k*N) cycles of the held-out battery become the support set."""
    if not 0.0 <= k < 1.0:
        raise ValueError("k must lie in [0, 1)")
    m = _count(k, len(test_cycles))
    if m >= len(test_cycles):
        raise ValueError(f"k={k} leaves no cycles to evaluate out of {len(test_cycles)}")
    return list(test_cycles[:m]), list(test_cycles[m:])


SCENARIOS = {
    "temp-ood": (("B-1", "B-2"), "B-3"),
    "crate-ood": (("B-4", "B-5"), "B-6"),
    "chem-ood": (("B-5", "B-7"), "B-1"),
}


@dataclass(frozen=True)
class SplitSpec:
    kind: str = "contiguous"
    test_fraction: float = 0.25
    train_ids: tuple[str, ...] = ()
    test_id: str = ""
    k_shot: float = 0.0

    def __post_init__(self):
        if self.kind not in ("contiguous", *SCENARIOS):
            raise ValueError(f"unknown split kind {self.kind!r}")
        if self.kind != "contiguous" and self.test_id in self.train_ids:
            raise ValueError("held-out battery also listed for training")

    @classmethod
    def scenario(cls, kind: str, k_shot: float = 0.0) -> "SplitSpec":
        train, test = SCENARIOS[kind]
        return cls(kind, train_ids=train, test_id=test, k_shot=k_shot)


def ood_split(datasets: Sequence[BatteryDataset], spec: SplitSpec):
    """Source batteries for pooled training and the held-out battery."""
    by_id = {d.battery_id: d for d in datasets}
    for bid in (*spec.train_ids, spec.test_id):
        if bid not in by_id:
            raise KeyError(f"unknown battery id {bid!r}; have {sorted(by_id)}")
    return [by_id[b] for b in spec.train_ids], by_id[spec.test_id]
