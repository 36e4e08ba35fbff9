"""Coupled Koopman / Fourier-neural-operator estimation of battery capacity and SoC."""

from .data import BatteryDataset, Cycle, RawCycle, SplitSpec
from .fno import FnoConfig, FnoModel, fno_forward, init_fno
from .koopman import KoopmanConfig, KoopmanModel, init_koopman, spectral_clip, spectrum
from .losses import LossWeights, total_loss
from .pipeline import Estimator, Metrics, TrainConfig, evaluate, pooled_train, predict_cycle, run_ood, train_joint
from .synth import SynthConfig, generate_battery, generate_fleet

__version__ = "0.1.0"
