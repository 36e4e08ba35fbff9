"""Synthetic batteries with known capacity fade and exact SoC ground truth.

Each cycle starts empty, charges CC-CV and discharges CC back to empty. The
terminal voltage is affine in SoC plus an ohmic term, so SoC is recoverable
from (V, I) and the capacity; capacity fades exponentially at a
temperature-dependent rate. Noise only touches the observed V, I, T
channels, so the emitted discharged charge and capacity give the SoC target
exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .data import BatteryDataset, BatteryMeta, RawCycle


@dataclass(frozen=True)
class SynthConfig:
    battery_id: str = "B-1"
    chemistry: str = "NMC"
    n_cycles: int = 300
    nominal_capacity_ah: float = 2.0
    fade_rate: float = 0.004
    fade_floor: float = 0.75
    temperature_c: float = 25.0
    temp_sensitivity: float = 0.03  # relative fade-rate increase per degC above 25
    charge_c_rate: float = 0.5
    discharge_c_rate: float = 1.0
    v_min: float = 3.0
    v_span: float = 1.2
    r_ohm: float = 0.05
    r_temp_coeff: float = 0.02  # resistance falls by this fraction per degC
    cv_cutoff_c: float = 0.05
    n_samples: int = 400  # raw samples per cycle
    noise_v: float = 0.005
    noise_i: float = 0.01
    noise_t: float = 0.2
    noise_q: float = 0.0  # relative cycle-to-cycle capacity scatter (part of the truth)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.fade_rate < 0.01:
            raise ValueError("fade_rate must lie in [0, 0.01)")
        if min(self.noise_v, self.noise_i, self.noise_t, self.noise_q) < 0:
            raise ValueError("noise levels must be non-negative")
        if self.charge_c_rate <= self.cv_cutoff_c:
            raise ValueError("charge rate must exceed the CV cut-off rate")

    @property
    def resistance(self) -> float:
        return self.r_ohm * math.exp(-self.r_temp_coeff * (self.temperature_c - 25.0))

    @property
    def effective_fade_rate(self) -> float:
        return self.fade_rate * (1.0 + self.temp_sensitivity * (self.temperature_c - 25.0))

    def meta(self) -> BatteryMeta:
        return BatteryMeta(self.battery_id, self.chemistry, self.charge_c_rate, self.discharge_c_rate,
                           self.temperature_c, self.nominal_capacity_ah, self.v_min + 0.5 * self.v_span)


@dataclass
class GroundTruth:
    q_max: np.ndarray
    soc_pct: list[np.ndarray] = field(default_factory=list)
    soh_pct: np.ndarray | None = None


def capacity_trajectory(config: SynthConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    c = np.arange(config.n_cycles)
    f = config.fade_floor
    q = config.nominal_capacity_ah * (f + (1.0 - f) * np.exp(-config.effective_fade_rate * c))
    if config.noise_q > 0:
        rng = rng or np.random.default_rng(config.seed)
        q = q * (1.0 + config.noise_q * rng.standard_normal(len(q)))
    return q


def _cycle_profile(config: SynthConfig, q_max: float):
    """Noise-free (t [s], V, I, SoC fraction) for one CC-CV charge + CC discharge."""
    R = config.resistance
    i_ch = config.charge_c_rate * config.nominal_capacity_ah
    i_dis = config.discharge_c_rate * config.nominal_capacity_ah
    i_cut = config.cv_cutoff_c * config.nominal_capacity_ah
    span = config.v_span
    # hours
    s_cv = max(0.0, 1.0 - i_ch * R / span)
    s_end = 1.0 - i_cut * R / span
    t_cc = s_cv * q_max / i_ch
    tau = R * q_max / span
    t_cv = tau * math.log((1.0 - s_cv) / (1.0 - s_end))
    t_dis = s_end * q_max / i_dis
    total = t_cc + t_cv + t_dis

    t = np.linspace(0.0, total, config.n_samples)
    t = np.union1d(t, [t_cc, t_cc + t_cv])  # keep the protocol corners as samples
    s = np.empty_like(t)
    current = np.empty_like(t)
    cc = t <= t_cc
    cv = (t > t_cc) & (t <= t_cc + t_cv)
    dis = t > t_cc + t_cv
    s[cc] = i_ch * t[cc] / q_max
    current[cc] = i_ch
    s[cv] = 1.0 - (1.0 - s_cv) * np.exp(-(t[cv] - t_cc) / tau)
    current[cv] = span * (1.0 - s[cv]) / R
    s[dis] = np.maximum(s_end - i_dis * (t[dis] - t_cc - t_cv) / q_max, 0.0)
    current[dis] = -i_dis
    voltage = config.v_min + span * s + current * R
    return t * 3600.0, voltage, current, s


def generate_battery(config: SynthConfig) -> tuple[BatteryDataset, GroundTruth]:
    rng = np.random.default_rng(config.seed)
    q_traj = capacity_trajectory(config, rng)
    cycles, socs = [], []
    for c, q in enumerate(q_traj):
        t, v, i, s = _cycle_profile(config, float(q))
        q_dis = q * (1.0 - s)
        soc = 100.0 * s
        n = len(t)
        v_obs = v + config.noise_v * rng.standard_normal(n)
        i_obs = i + config.noise_i * rng.standard_normal(n)
        temp_obs = config.temperature_c + config.noise_t * rng.standard_normal(n)
        cycles.append(RawCycle(config.battery_id, c + 1, t, v_obs, i_obs, temp_obs, q_dis, float(q), soc))
        socs.append(soc)
    truth = GroundTruth(q_traj, socs, q_traj / config.nominal_capacity_ah * 100.0)
    return BatteryDataset(config.meta(), cycles), truth


# -- fleets mirroring the OOD scenarios --------------------------------------

FLEET_PRESETS = {
    # name: (shifted field, battery ids, values; last entry is held out)
    "temperature-ood": ("temperature_c", ("B-1", "B-2", "B-3"), (25.0, 35.0, 45.0)),
    "crate-ood": ("charge_c_rate", ("B-4", "B-5", "B-6"), (0.25, 0.5, 1.0)),
    "chemistry-ood": ("chemistry", ("B-5", "B-7", "B-1"), ("NCA", "NMC+NCA", "NMC")),
}

# "chemistry" is proxied by nominal capacity and voltage-map slope
CHEMISTRY_PROXY = {
    "NMC": {"nominal_capacity_ah": 2.0, "v_span": 1.2},
    "NCA": {"nominal_capacity_ah": 2.5, "v_span": 1.1},
    "NMC+NCA": {"nominal_capacity_ah": 2.25, "v_span": 1.15},
}


def fleet_configs(preset: str, base: SynthConfig = SynthConfig(), shift_scale: float = 1.0,
                  n_cycles: tuple[int, ...] | None = None) -> list[SynthConfig]:
    """Configs for a preset fleet: two source batteries and one shifted battery.

    ``shift_scale=0`` collapses the shifted parameter onto the base value
    (control case); only the noise seeds then differ between batteries.
    """
    if preset not in FLEET_PRESETS:
        raise KeyError(f"unknown fleet preset {preset!r}; choose from {sorted(FLEET_PRESETS)}")
    name, ids, values = FLEET_PRESETS[preset]
    configs = []
    for j, (bid, value) in enumerate(zip(ids, values)):
        kw = {"battery_id": bid, "seed": base.seed + 1000 * (j + 1)}
        if n_cycles is not None:
            kw["n_cycles"] = n_cycles[j]
        if name == "chemistry":
            chem = value if shift_scale else base.chemistry
            kw["chemistry"] = chem
            kw.update(CHEMISTRY_PROXY.get(chem, {}))
        else:
            base_value = getattr(base, name)
            kw[name] = base_value + shift_scale * (value - base_value) if shift_scale != 1.0 else value
        configs.append(replace(base, **kw))
    return configs


def generate_fleet(configs: list[SynthConfig]) -> list[tuple[BatteryDataset, GroundTruth]]:
    if len(configs) < 3:
        raise ValueError("a fleet needs at least two source batteries and one shifted battery")
    return [generate_battery(c) for c in configs]
