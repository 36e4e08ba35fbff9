"""Command-line entry point: ``kfno {synth,train,eval,predict,spectrum}``.

Options resolve in three layers: built-in defaults, then a JSON ``--config``
file, then command-line flags. ``--print-config`` shows the result and exits.
The config file has up to three sections, ``train``, ``synth`` and ``eval``,
whose keys mirror the dataclass fields; unknown keys are an error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import koopman as koop_mod
from . import pipeline, synth
from .pipeline import TrainConfig, _dataclass_from_dict

log = logging.getLogger("kfno")


@dataclass(frozen=True)
class EvalConfig:
    scenario: str = "contiguous"
    test_fraction: float = 0.25
    k_shot: tuple[float, ...] = (0.0, 1.0, 5.0, 10.0)  # percent
    mode: str = "one-step"
    include_time: bool = True

    def __post_init__(self):
        if self.scenario not in ("contiguous", *data_mod.SCENARIOS):
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if self.mode not in ("one-step", "rollout"):
            raise ValueError(f"unknown evaluation mode {self.mode!r}")
        if any(not 0.0 <= k < 100.0 for k in self.k_shot):
            raise ValueError("k_shot percentages must lie in [0, 100)")


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = TrainConfig()
    synth: synth.SynthConfig = synth.SynthConfig()
    eval: EvalConfig = EvalConfig()

    def to_dict(self) -> dict:
        return asdict(self)


def load_run_config(path) -> RunConfig:
    try:
        blob = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(blob, dict):
        raise ConfigError(f"{path}: top level must be an object")
    try:
        return _dataclass_from_dict(RunConfig, blob)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


class ConfigError(ValueError):
    pass


def resolve_config(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    tr, sy, ev = cfg.train, cfg.synth, cfg.eval
    if args.seed is not None:
        tr = replace(tr, seed=args.seed)
        sy = replace(sy, seed=args.seed)
    if args.nc is not None:
        tr = replace(tr, n_c=args.nc)
    if args.coupled is not None:
        tr = replace(tr, coupled=args.coupled)
    if args.rho_max is not None:
        tr = replace(tr, koopman=replace(tr.koopman, rho_max=args.rho_max))
    if args.epochs is not None:
        tr = replace(tr, max_epochs=args.epochs)
    if args.scenario is not None:
        ev = replace(ev, scenario=args.scenario)
    if args.k_shot is not None:
        ev = replace(ev, k_shot=tuple(args.k_shot))
    if args.mode is not None:
        ev = replace(ev, mode=args.mode)
    if args.no_time:
        ev = replace(ev, include_time=False)
    if getattr(args, "n_cycles", None) is not None:
        sy = replace(sy, n_cycles=args.n_cycles)
    return RunConfig(tr, sy, ev)


def _pct_list(text: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad k-shot list {text!r}") from exc
    if not values or any(not 0.0 <= v < 100.0 for v in values):
        raise argparse.ArgumentTypeError("k-shot percentages must lie in [0, 100)")
    return values


# -- data discovery ----------------------------------------------------------

TRUTH_SUFFIX = ".truth.csv"


def discover(paths) -> list[data_mod.BatteryDataset]:
    """Load batteries from CSV files or directories; ``<stem>.json`` next to a CSV is its metadata."""
    files: list[Path] = []
    for p in map(Path, paths):
        if p.is_dir():
            files += sorted(f for f in p.glob("*.csv") if not f.name.endswith(TRUTH_SUFFIX))
        elif p.exists():
            files.append(p)
        else:
            raise FileNotFoundError(f"no such data path: {p}")
    if not files:
        raise FileNotFoundError(f"no cycle CSV files under {', '.join(map(str, paths))}")
    out = []
    for f in files:
        meta = f.with_suffix(".json")
        out += data_mod.load_dataset(f, meta if meta.exists() else None)
    return out


def _nominal(ds: data_mod.BatteryDataset) -> float | None:
    q = ds.meta.nominal_capacity_ah
    return q if q and q > 0 else None


def _scaled(ds, scaler, n_c):
    return [data_mod.build_cycle(c, scaler) for c in data_mod.prepare(ds.cycles, n_c)]


# -- commands ----------------------------------------------------------------

def cmd_synth(cfg: RunConfig, out_dir: Path, fleet: str | None = None) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    configs = synth.fleet_configs(fleet, cfg.synth) if fleet else [cfg.synth]
    written = []
    for sc in configs:
        ds, truth = synth.generate_battery(sc)
        stem = out_dir / ds.battery_id
        data_mod.write_cycles_csv(stem.with_suffix(".csv"), ds.cycles)
        data_mod.write_meta(stem.with_suffix(".json"), ds.meta)
        truth_path = out_dir / f"{ds.battery_id}{TRUTH_SUFFIX}"
        with truth_path.open("w", encoding="utf-8") as fh:
            fh.write("cycle_index,q_max_ah,soh_pct\n")
            for c, q, s in zip(ds.cycles, truth.q_max, truth.soh_pct):
                fh.write(f"{c.cycle_index},{float(q)!r},{float(s)!r}\n")
        # validate by parsing back
        back = data_mod.parse_cycles(stem.with_suffix(".csv"))
        if len(back) != len(ds.cycles):
            raise RuntimeError(f"{stem}.csv did not round-trip")
        written += [stem.with_suffix(".csv"), stem.with_suffix(".json"), truth_path]
    return written


def _training_sets(cfg: RunConfig, datasets):
    """(train cycle lists, test cycle lists or target, scaler) for the chosen scenario."""
    tr, ev = cfg.train, cfg.eval
    if ev.scenario == "contiguous":
        raw = [data_mod.prepare(d.cycles, tr.n_c) for d in datasets]
        splits = [data_mod.contiguous_split(r, ev.test_fraction) for r in raw]
        scaler = data_mod.fit_scaler([c for s in splits for c in s[0]])
        train = [[data_mod.build_cycle(c, scaler) for c in s[0]] for s in splits]
        test = [[data_mod.build_cycle(c, scaler) for c in s[1]] for s in splits]
        return train, test, scaler
    sources, target = data_mod.ood_split(datasets, data_mod.SplitSpec.scenario(ev.scenario))
    raw = [data_mod.prepare(d.cycles, tr.n_c) for d in sources]
    scaler = data_mod.fit_scaler([c for r in raw for c in r])
    train = [[data_mod.build_cycle(c, scaler) for c in r] for r in raw]
    return train, target, scaler


def cmd_train(cfg: RunConfig, data_paths, out_dir: Path) -> Path:
    datasets = discover(data_paths)
    train, _, scaler = _training_sets(cfg, datasets)
    koopman, fno, history = pipeline.pooled_train(train, cfg.train)
    est = pipeline.Estimator(koopman, fno, scaler, cfg.train, history)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / "checkpoint.kfno"
    pipeline.save_checkpoint(ckpt, est, {"scenario": cfg.eval.scenario,
                                         "test_fraction": cfg.eval.test_fraction,
                                         "batteries": [d.battery_id for d in datasets]})
    pipeline.write_history_csv(out_dir / "history.csv", history)
    bad = [h["rho"] for h in history if h["rho"] > cfg.train.koopman.rho_max + pipeline.RHO_TOL]
    if bad:
        raise RuntimeError(f"logged spectral radius {max(bad)} exceeds rho_max")
    return ckpt


def _load_checkpoint_for(cfg_args, path):
    est, header = pipeline.load_checkpoint(path)
    if cfg_args is not None and cfg_args.train.architecture_hash() != est.config.architecture_hash():
        raise pipeline.CheckpointError(
            f"{path}: checkpoint architecture does not match the supplied configuration")
    return est, header


def cmd_eval(cfg: RunConfig, checkpoint, data_paths, out_dir: Path, check_config: bool = False):
    est, header = _load_checkpoint_for(cfg if check_config else None, checkpoint)
    datasets = discover(data_paths)
    n_c = est.config.n_c
    ev = cfg.eval
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    if ev.scenario == "contiguous":
        preds_all, results = [], []
        for d in datasets:
            cycles = _scaled(d, est.scaler, n_c)
            train, test = data_mod.contiguous_split(cycles, ev.test_fraction)
            m, preds = pipeline.evaluate(est, test, ev.mode, prev_cycle=train[-1],
                                         nominal_capacity_ah=_nominal(d))
            preds_all += preds
            results.append(m)
        m = pipeline.compute_metrics(preds_all, sum(r.inference_time_s for r in results))
        records.append(m.to_json_record("contiguous", 0.0))
        pipeline.write_predictions_csv(out_dir / "predictions.csv", preds_all)
    else:
        sources, target = data_mod.ood_split(datasets, data_mod.SplitSpec.scenario(ev.scenario))
        src = [_scaled(d, est.scaler, n_c) for d in sources]
        tgt = _scaled(target, est.scaler, n_c)
        for pct in ev.k_shot:
            r = pipeline.adapt_and_evaluate(est, src, tgt, pct / 100.0, ev.mode, _nominal(target))
            records.append(r.metrics.to_json_record(ev.scenario, pct))
            pipeline.write_predictions_csv(out_dir / f"predictions_k{pct:g}.csv", r.predictions)
            koop_mod.write_spectrum_csv(out_dir / f"spectrum_k{pct:g}.csv", r.eigenvalues, r.rho)
    pipeline.write_metrics_json(out_dir / "metrics.json", records, ev.include_time)
    return records


def cmd_predict(cfg: RunConfig, checkpoint, data_paths, out: Path, cycle: int | None = None):
    """One-step predictions for every cycle (each from its predecessor) or a single cycle."""
    est, _ = pipeline.load_checkpoint(checkpoint)
    preds = []
    for d in discover(data_paths):
        cycles = _scaled(d, est.scaler, est.config.n_c)
        for j, c in enumerate(cycles):
            if cycle is not None and c.index != cycle:
                continue
            prev = cycles[j - 1] if j > 0 else c
            preds.append(pipeline.predict_cycle(est, c, prev.q_max, prev.u_bar, _nominal(d)))
    if not preds:
        raise ValueError(f"no cycle with index {cycle} in the data")
    out.parent.mkdir(parents=True, exist_ok=True)
    pipeline.write_predictions_csv(out, preds)
    return preds


def cmd_spectrum(checkpoint, out: Path, plot_data: bool = True, svg: Path | None = None):
    est, _ = pipeline.load_checkpoint(checkpoint)
    lam, rho = koop_mod.spectrum(est.koopman.K)
    out.parent.mkdir(parents=True, exist_ok=True)
    koop_mod.write_spectrum_csv(out, lam, rho)
    r_max = est.config.koopman.rho_max
    if plot_data:
        theta = np.linspace(0.0, 2 * math.pi, 361)
        with out.with_name(out.stem + "_plot.csv").open("w", encoding="utf-8") as fh:
            fh.write("kind,x,y\n")
            for v in lam:
                fh.write(f"eig,{float(v.real)!r},{float(v.imag)!r}\n")
            for a in theta:
                fh.write(f"circle,{r_max * math.cos(a)!r},{r_max * math.sin(a)!r}\n")
    if svg is not None:
        svg.write_text(spectrum_svg(lam, r_max), encoding="utf-8")
    return lam, rho


def spectrum_svg(eigenvalues, radius: float = 1.0, size: int = 320) -> str:
    """Eigenvalues on the complex plane with the clipping circle."""
    half = size / 2
    scale = 0.42 * size / max(radius, float(np.abs(eigenvalues).max(initial=0.0)), 1e-12)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
             f'viewBox="0 0 {size} {size}">',
             f'<line x1="0" y1="{half}" x2="{size}" y2="{half}" stroke="#bbb"/>',
             f'<line x1="{half}" y1="0" x2="{half}" y2="{size}" stroke="#bbb"/>',
             f'<circle cx="{half}" cy="{half}" r="{radius * scale:.3f}" fill="none" '
             f'stroke="#444" stroke-dasharray="4 3"/>']
    for v in eigenvalues:
        parts.append(f'<circle cx="{half + v.real * scale:.3f}" cy="{half - v.imag * scale:.3f}" '
                     f'r="3" fill="#c0392b"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# -- argument parsing --------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (sections: train, synth, eval)")
    common.add_argument("--seed", type=int)
    common.add_argument("--out-dir", type=Path, default=Path("."))
    common.add_argument("--nc", type=int, choices=data_mod.RESOLUTION_PRESETS, help="samples per cycle")
    grp = common.add_mutually_exclusive_group()
    grp.add_argument("--coupled", dest="coupled", action="store_true", default=None)
    grp.add_argument("--decoupled", dest="coupled", action="store_false")
    common.add_argument("--scenario", choices=("contiguous", *data_mod.SCENARIOS))
    common.add_argument("--k-shot", type=_pct_list, help="comma-separated percentages, e.g. 0,1,5,10")
    common.add_argument("--rho-max", type=float)
    common.add_argument("--epochs", type=int, help="maximum training epochs")
    common.add_argument("--mode", choices=("one-step", "rollout"))
    common.add_argument("--no-time", action="store_true",
                        help="leave wall-clock time out of metrics.json (byte-reproducible output)")
    common.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="kfno", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("synth", parents=[common], help="generate synthetic batteries")
    s.add_argument("--fleet", choices=sorted(synth.FLEET_PRESETS))
    s.add_argument("--n-cycles", type=int)
    t = sub.add_parser("train", parents=[common], help="train and write a checkpoint")
    t.add_argument("--data", nargs="+", required=True)
    e = sub.add_parser("eval", parents=[common], help="metrics and predictions for a checkpoint")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--data", nargs="+", required=True)
    pr = sub.add_parser("predict", parents=[common], help="per-cycle predictions")
    pr.add_argument("--checkpoint", type=Path, required=True)
    pr.add_argument("--data", nargs="+", required=True)
    pr.add_argument("--cycle", type=int)
    sp = sub.add_parser("spectrum", parents=[common], help="export the Koopman eigenvalues")
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument("--svg", action="store_true", help="also write spectrum.svg")
    return p


def _limit_threads():
    n = os.environ.get("KFNO_THREADS")
    if not n:
        return None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=int(n))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"kfno: {exc}", file=sys.stderr)
        return 2
    if args.print_config:
        print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        return 0
    _limit_threads()
    out = args.out_dir
    try:
        if args.command == "synth":
            for f in cmd_synth(cfg, out, args.fleet):
                log.info("wrote %s", f)
        elif args.command == "train":
            ckpt = cmd_train(cfg, args.data, out)
            log.info("wrote %s and %s", ckpt, out / "history.csv")
        elif args.command == "eval":
            for r in cmd_eval(cfg, args.checkpoint, args.data, out, check_config=bool(args.config)):
                log.info("%s k=%g%%: SoC RMSE %.4f%%, Qmax RMSE %.5f Ah", r["scenario"], r["k_shot"],
                         r["soc_rmse_pct"], r["qmax_rmse_ah"])
        elif args.command == "predict":
            preds = cmd_predict(cfg, args.checkpoint, args.data, out / "predictions.csv", args.cycle)
            log.info("wrote %d cycle predictions to %s", len(preds), out / "predictions.csv")
        elif args.command == "spectrum":
            lam, rho = cmd_spectrum(args.checkpoint, out / "spectrum.csv",
                                    svg=out / "spectrum.svg" if args.svg else None)
            log.info("spectral radius %.6f over %d eigenvalues", rho, len(lam))
    except pipeline.TrainingDivergedError as exc:
        print(f"kfno: training diverged: {exc}", file=sys.stderr)
        return 3
    except (OSError, ValueError, KeyError, RuntimeError) as exc:
        print(f"kfno: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
