"""Command-line entry point: simulate | featurize | verify | interpret | econ.

Every command reads an optional TOML config (unknown keys are rejected),
writes its outputs under ``--out`` and emits a JSON report that embeds the
resolved config and the tool version. Failures print a JSON error object on
stderr and exit with 1 (config), 2 (data) or 3 (numerical).
"""

from __future__ import annotations

import argparse
import csv
import gzip
import io
import json
import logging
import sys
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import __version__
from .dataset import BatteryDataset, parse_cycling_csv, write_cycling_csv
from .econ import (CHEMISTRIES, METHODS, EconScenario, environmental_impact, load_scenario_data,
                   mass_balance, scrap_forecast, unit_profit)
from .errors import ConfigError, MissingInput, ProtoVerifyError, TooFewSamples
from .featurize import FEATURE_NAMES, FeatureMatrix, NormStats, featurize_dataset, fit_norm, norm_sidecar
from .interpret import arrhenius_diagnostic, dominance, parabolic_rate, sage_over_lifetime
from .neural import TrainConfig
from .simulate import CellParams, CellSimulator, FleetConfig, calibrate_fade_split, cell_parameters, run_cell
from .verify import (BatteryData, TrajectoryModel, VerificationConfig, early_budget,
                     simulate_battery_data, train_trajectory, verify_prototype)

log = logging.getLogger("protoverify")

COMMANDS = ("simulate", "featurize", "verify", "interpret", "econ")
BUILTIN = "builtin:"


# ---------------------------------------------------------------------------
# config sections
# ---------------------------------------------------------------------------

@dataclass
class RunSection:
    seed: int = 0
    out: str = "out"
    threads: int = 1
    verbosity: int = 0


@dataclass
class FleetSection:
    temperatures_k: list = field(default_factory=lambda: [298.15, 308.15, 318.15, 328.15])
    cells_per_temperature: int = 4
    n_cycles: int = 300
    stop_soh: float | None = None
    imv_scale: float = 0.01
    capacity_cv: float = 0.01
    resistance_cv: float = 0.05
    kinetics_cv: float = 0.05
    imv_kinetics_coupling: float = 0.0
    thermodynamic_share: float | None = None
    share_temperature_k: float = 318.15
    noise_v: float = 0.0
    gzip: bool = True

    def fleet(self, seed: int) -> FleetConfig:
        params = replace(CellParams(), noise_v=self.noise_v)
        if self.thermodynamic_share is not None:
            params = calibrate_fade_split(params, self.share_temperature_k, self.thermodynamic_share)
        return FleetConfig(tuple(float(t) for t in self.temperatures_k), self.cells_per_temperature,
                           self.n_cycles, params, seed, self.imv_scale, self.capacity_cv, self.resistance_cv,
                           self.kinetics_cv, self.imv_kinetics_coupling, self.stop_soh)


@dataclass
class TrainSection:
    epochs: int = 30
    learning_rate: float = 1e-4
    lam: float = 1e-5
    batch_size: int | None = None

    def build(self) -> TrainConfig:
        return TrainConfig(self.epochs, self.learning_rate, self.lam, self.batch_size)


@dataclass
class SyntheticSection:
    source: dict = field(default_factory=dict)
    target: dict = field(default_factory=dict)


@dataclass
class VerifySection:
    source_temperatures_k: list = field(default_factory=lambda: [298.15, 328.15])
    target_temperature_k: float = 318.15
    early_fraction: float | None = 0.2
    early_cycles: int | None = None
    eol_fraction: float = 0.75
    no_imv: bool = False
    no_transfer: bool = False
    window: list = field(default_factory=lambda: [100, 200, 50])
    rate_basis: str = "measured"
    train_split: float = 0.75
    trajectory_pooling: str = "battery"
    lifetime_basis: str = "eol"
    benchmark_degree: int | None = 3
    chemical: dict = field(default_factory=lambda: {"epochs": 30, "learning_rate": 1e-4, "lam": 1e-5,
                                                    "batch_size": 32})
    trajectory: dict = field(default_factory=lambda: {"epochs": 100, "learning_rate": 1e-3, "lam": 1e-5,
                                                      "batch_size": 64})
    sources: list = field(default_factory=list)
    targets: list = field(default_factory=list)
    synthetic: dict | None = None

    def build(self, seed: int) -> VerificationConfig:
        chem = _section(TrainSection, self.chemical, "verify.chemical").build()
        traj = _section(TrainSection, self.trajectory, "verify.trajectory").build()
        if len(self.window) != 3:
            raise ConfigError("verify.window needs [start, end, n]")
        return VerificationConfig(
            tuple(float(t) for t in self.source_temperatures_k), float(self.target_temperature_k),
            self.early_fraction if self.early_cycles is None else None, self.early_cycles,
            self.eol_fraction, self.no_imv, self.no_transfer, seed, chem, traj,
            tuple(int(w) for w in self.window), self.rate_basis, self.train_split,
            self.trajectory_pooling, self.lifetime_basis)


@dataclass
class InterpretSection:
    model: str | None = None
    matrix: str | None = None
    labels: str | None = None
    window: int = 20
    permutations: int = 64
    method: str = "auto"


@dataclass
class EconSection:
    scenario: str | None = None
    chemistry: list = field(default_factory=lambda: list(CHEMISTRIES))
    method: list = field(default_factory=lambda: list(METHODS))
    soh: list = field(default_factory=lambda: [0.8, 0.85, 0.9, 0.95, 1.0])
    scrap_years: list = field(default_factory=lambda: [2023, 2030, 2040, 2050, 2060])


@dataclass
class FeaturizeSection:
    inputs: list = field(default_factory=list)
    fit_on: list | None = None


SECTIONS = {"run": RunSection, "simulate": FleetSection, "featurize": FeaturizeSection, "verify": VerifySection,
            "interpret": InterpretSection, "econ": EconSection}


def _section(cls, raw: dict | None, name: str):
    raw = dict(raw or {})
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(unknown)}")
    return cls(**raw)


@dataclass
class RunConfig:
    run: RunSection
    simulate: FleetSection
    featurize: FeaturizeSection
    verify: VerifySection
    interpret: InterpretSection
    econ: EconSection

    def to_dict(self) -> dict:
        return asdict(self)


def _config_text(path: str) -> str:
    """File contents; ``builtin:<name>`` reads a config bundled with the package."""
    if path.startswith(BUILTIN):
        name = path[len(BUILTIN):]
        res = resources.files("protoverify").joinpath(f"data/{name}.toml")
        if not res.is_file():
            raise MissingInput(path)
        return res.read_text()
    p = Path(path)
    if not p.exists():
        raise MissingInput(str(p))
    return p.read_text()


def load_config(path: str | None, overrides: dict) -> RunConfig:
    raw: dict = {}
    if path is not None:
        try:
            raw = tomllib.loads(_config_text(path))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    unknown = sorted(set(raw) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    built = {name: _section(cls, raw.get(name), name) for name, cls in SECTIONS.items()}
    for key, value in overrides.items():
        if value is not None:
            setattr(built["run"], key, value)
    cfg = RunConfig(**built)
    if cfg.run.threads < 1:
        raise ConfigError("threads must be at least 1")
    return cfg


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------

def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n"


def write_report(out: Path, name: str, command: str, cfg: RunConfig, body: dict) -> Path:
    report = {"tool": "protoverify", "version": __version__, "command": command,
              "config": cfg.to_dict(), **body}
    path = out / name
    path.write_text(dumps(report))
    return path


def _read_dataset(path: str) -> BatteryDataset:
    p = Path(path)
    if not p.exists():
        raise MissingInput(str(p))
    with open(p, "rb") as fh:
        return parse_cycling_csv(fh)


def _limit_threads(n: int):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return None
    return threadpool_limits(limits=n)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_simulate(cfg: RunConfig, out: Path, args) -> dict:
    fleet = cfg.simulate.fleet(cfg.run.seed)
    cells_dir = out / "cells"
    cells_dir.mkdir(parents=True, exist_ok=True)
    truth, files = [], []
    for bid, temp, params in cell_parameters(fleet):
        sim = CellSimulator(params, temp, battery_id=bid)
        kept = run_cell(sim, fleet.n_cycles, fleet.stop_soh)
        ds = BatteryDataset(bid, temp, tuple(kept), sim.imv)
        name = f"{bid}.csv.gz" if cfg.simulate.gzip else f"{bid}.csv"
        buf = io.StringIO()
        write_cycling_csv(ds, buf)
        data = buf.getvalue().encode()
        # fixed mtime keeps gzip output byte-identical across runs
        (cells_dir / name).write_bytes(gzip.compress(data, mtime=0) if cfg.simulate.gzip else data)
        files.append(f"cells/{name}")
        t = sim.truth_arrays()
        truth.append({"battery_id": bid, "temperature": temp, "imv": list(sim.imv.u),
                      **{k: v.tolist() for k, v in t.items()}})
        log.info("simulated %s (%d cycles)", bid, len(kept))
    (out / "truth.json").write_text(dumps({"cells": truth}))
    return {"files": files, "truth": "truth.json", "cells": len(files)}


def _featurize_one(path: str) -> tuple[FeatureMatrix, dict]:
    ds = _read_dataset(path)
    m = featurize_dataset(ds)
    caps = {c.cycle_index: c.discharge_capacity for c in ds.cycles}
    labels = {"battery_id": ds.battery_id, "temperature": ds.temperature,
              "cycles": m.cycles.tolist(), "capacity": [caps[int(c)] for c in m.cycles]}
    return m, labels


def write_labels(path: Path, labels: list[dict], nominal: float = 1.1) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["battery_id", "cycle", "temperature", "capacity", "soh"])
        for lab in labels:
            for c, q in zip(lab["cycles"], lab["capacity"]):
                w.writerow([lab["battery_id"], int(c), repr(float(lab["temperature"])), repr(float(q)),
                            repr(float(q) / nominal)])


def read_labels(path: Path) -> dict:
    if not path.exists():
        raise MissingInput(str(path))
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out[(row["battery_id"], int(row["cycle"]))] = (float(row["temperature"]), float(row["capacity"]),
                                                           float(row["soh"]))
    return out


def cmd_featurize(cfg: RunConfig, out: Path, args) -> dict:
    inputs = list(args.inputs or []) or list(cfg.featurize.inputs)
    if not inputs:
        raise ConfigError("featurize needs at least one dataset path")
    mats, labels = [], []
    for p in inputs:
        m, lab = _featurize_one(p)
        mats.append(m)
        labels.append(lab)
    matrix = FeatureMatrix.concat(mats)
    fit_rows = np.ones(len(matrix), bool)
    if cfg.featurize.fit_on:
        fit_rows = np.isin(matrix.battery_ids, cfg.featurize.fit_on)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        stats = fit_norm(matrix.values[fit_rows], FEATURE_NAMES)
    with open(out / "features.csv", "w", newline="") as fh:
        matrix.to_csv(fh)
    (out / "norm.json").write_text(norm_sidecar(stats) + "\n")
    write_labels(out / "labels.csv", labels)
    return {"features": "features.csv", "norm": "norm.json", "labels": "labels.csv", "rows": len(matrix),
            "inputs": inputs, "warnings": [str(w.message) for w in caught]}


def _synthetic_batteries(spec: dict, seed: int, name: str) -> list[BatteryData]:
    section = _section(FleetSection, spec, f"verify.synthetic.{name}")
    fleet = section.fleet(seed)
    return [simulate_battery_data(CellSimulator(p, t, battery_id=b), fleet.n_cycles, fleet.stop_soh)
            for b, t, p in cell_parameters(fleet)]


def _verify_data(cfg: RunConfig) -> tuple[list[BatteryData], list[BatteryData]]:
    v = cfg.verify
    if v.synthetic is not None:
        syn = _section(SyntheticSection, v.synthetic, "verify.synthetic")
        return (_synthetic_batteries(syn.source, cfg.run.seed, "source"),
                _synthetic_batteries(syn.target, cfg.run.seed + 1000, "target"))
    if not v.sources or not v.targets:
        raise ConfigError("verify needs sources and targets paths, or a [verify.synthetic] block")
    return ([BatteryData.from_dataset(_read_dataset(p)) for p in v.sources],
            [BatteryData.from_dataset(_read_dataset(p)) for p in v.targets])


def cmd_verify(cfg: RunConfig, out: Path, args) -> dict:
    vcfg = cfg.verify.build(cfg.run.seed)
    sources, targets = _verify_data(cfg)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        result = verify_prototype(vcfg, sources, targets, cfg.verify.benchmark_degree)
    body = result.to_dict()
    body.pop("config", None)

    with open(out / "trajectories.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["battery_id", "cycle", "capacity_true", "capacity_pred", "model"])  # Ah
        for tag, preds in (("ours", result.predictions), ("benchmark", result.benchmark)):
            for p in preds:
                for c, a, b in zip(p.cycles, p.y, p.yhat):
                    w.writerow([p.battery_id, int(c), repr(float(a)), repr(float(b)), tag])

    # interpretation inputs: a trajectory model fitted on everything the
    # pipeline saw, plus the target matrix and labels
    tgts = [b for b in targets if abs(b.temperature - vcfg.target_temperature) < 1e-6]
    srcs = [b for b in sources if any(abs(b.temperature - t) < 1e-6 for t in vcfg.source_temperatures)]
    stats = fit_norm(np.vstack([b.features for b in srcs]), FEATURE_NAMES)
    rows = [stats.transform(b.features) for b in srcs]
    ys = [b.soh for b in srcs]
    for b in tgts:
        e = b.upto(early_budget(b, vcfg)[1])
        rows.append(stats.transform(e.features))
        ys.append(e.soh)
    model = train_trajectory(np.vstack(rows), np.concatenate(ys), vcfg.trajectory, vcfg.no_imv, vcfg.seed)
    (out / "model.json").write_text(dumps({"trajectory": model.to_dict(), "norm": stats.to_dict()}))
    matrix = FeatureMatrix(np.concatenate([np.full(len(b.cycles), b.battery_id, dtype=object) for b in tgts]),
                           np.concatenate([b.cycles for b in tgts]), np.vstack([b.features for b in tgts]))
    with open(out / "target_features.csv", "w", newline="") as fh:
        matrix.to_csv(fh)
    write_labels(out / "target_labels.csv",
                 [{"battery_id": b.battery_id, "temperature": b.temperature, "cycles": b.cycles.tolist(),
                   "capacity": b.capacity.tolist()} for b in tgts], tgts[0].nominal)
    body["outputs"] = {"trajectories": "trajectories.csv", "model": "model.json",
                       "matrix": "target_features.csv", "labels": "target_labels.csv"}
    body["warnings"] = sorted({str(w.message) for w in caught})
    return body


def cmd_interpret(cfg: RunConfig, out: Path, args) -> dict:
    ic = cfg.interpret
    model_path = args.model or ic.model
    matrix_path = args.matrix or ic.matrix
    if not model_path or not matrix_path:
        raise ConfigError("interpret needs a model and a matrix path")
    labels_path = Path(args.labels or ic.labels or Path(matrix_path).with_name(
        Path(matrix_path).name.replace("features", "labels")))
    for p in (model_path, matrix_path):
        if not Path(p).exists():
            raise MissingInput(str(p))
    bundle = json.loads(Path(model_path).read_text())
    model = TrajectoryModel.from_dict(bundle["trajectory"])
    stats = NormStats.from_dict(bundle["norm"])
    with open(matrix_path, newline="") as fh:
        matrix = FeatureMatrix.from_csv(fh)
    labels = read_labels(labels_path)
    keys = list(zip(matrix.battery_ids, matrix.cycles.tolist()))
    missing = [k for k in keys if k not in labels]
    if missing:
        raise MissingInput(f"{labels_path} (no label for {missing[0][0]} cycle {missing[0][1]})")
    soh = np.array([labels[k][2] for k in keys])
    x = stats.transform(matrix.values)[:, model.columns]
    names = [FEATURE_NAMES[c] for c in model.columns]

    sage = {}
    shares = []
    for bid in sorted(set(matrix.battery_ids)):
        m = matrix.battery_ids == bid
        rep = sage_over_lifetime(model.predict_columns, x[m], soh[m], matrix.cycles[m], ic.window,
                                 permutations=ic.permutations, seed=cfg.run.seed, method=ic.method)
        d = dominance(rep.average, names)
        sage[bid] = {"average": dict(zip(names, rep.average.tolist())), "dominance": d.to_dict(),
                     "windows": len(rep.windows)}
        shares.append(d.thermodynamic_share)

    # Arrhenius diagnostic on parabolic fade constants, one per temperature
    per_temp: dict[float, list[float]] = {}
    for bid in sorted(set(matrix.battery_ids)):
        m = matrix.battery_ids == bid
        t = labels[keys[int(np.flatnonzero(m)[0])]][0]
        caps = np.array([labels[k][1] for k, keep in zip(keys, m) if keep])
        per_temp.setdefault(t, []).append(parabolic_rate(matrix.cycles[m], caps))
    rates = {t: float(np.mean(v)) for t, v in per_temp.items()}
    try:
        arr = arrhenius_diagnostic(rates).to_dict()
    except TooFewSamples as exc:
        arr = {"skipped": str(exc)}
    return {"sage": sage, "mean_thermodynamic_share": float(np.mean(shares)),
            "arrhenius": {"rates": {repr(k): v for k, v in sorted(rates.items())}, "fit": arr},
            "inputs": {"model": str(model_path), "matrix": str(matrix_path), "labels": str(labels_path)}}


def cmd_econ(cfg: RunConfig, out: Path, args) -> dict:
    ec = cfg.econ
    data = load_scenario_data(args.scenario or ec.scenario)
    rows, results = [], []
    for chem in ec.chemistry:
        for method in ec.method:
            for s in ec.soh:
                sc = EconScenario(chem, method, float(s), data)
                pr = unit_profit(sc)
                ei = environmental_impact(sc)
                results.append({"chemistry": chem, "method": method, "soh": float(s), **pr.to_dict(),
                                "impact": ei, "mass_balance": mass_balance(sc)})
                rows.append([chem, method, repr(float(s)), repr(pr.revenue), repr(pr.cost), repr(pr.profit)])
    with open(out / "econ.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["chemistry", "method", "soh", "revenue", "cost", "profit"])
        w.writerows(rows)
    years = [int(y) for y in ec.scrap_years]
    return {"results": results, "scrap_forecast": dict(zip(map(str, years), scrap_forecast(years).tolist())),
            "scenario": args.scenario or ec.scenario or "bundled default", "table": "econ.csv"}


HANDLERS = {"simulate": cmd_simulate, "featurize": cmd_featurize, "verify": cmd_verify,
            "interpret": cmd_interpret, "econ": cmd_econ}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file")
    common.add_argument("--seed", type=int, help="global seed (overrides [run].seed)")
    common.add_argument("--out", help="output directory (overrides [run].out)")
    common.add_argument("--threads", type=int, help="cap on BLAS/worker threads")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="protoverify", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"protoverify {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="simulate a synthetic fleet")
    f = sub.add_parser("featurize", parents=[common], help="extract the feature matrix")
    f.add_argument("inputs", nargs="*", help="cycling CSV files (plain or gzip)")
    sub.add_parser("verify", parents=[common], help="run the verification pipeline")
    i = sub.add_parser("interpret", parents=[common], help="SAGE, dominance and Arrhenius diagnostics")
    i.add_argument("--model")
    i.add_argument("--matrix")
    i.add_argument("--labels")
    e = sub.add_parser("econ", parents=[common], help="recycling economics and impacts")
    e.add_argument("--scenario")
    return p


def _fail(exc: ProtoVerifyError) -> int:
    sys.stderr.write(json.dumps(exc.to_dict(), sort_keys=True) + "\n")
    return exc.exit_code


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, {"seed": args.seed, "out": args.out, "threads": args.threads})
        out = Path(cfg.run.out)
        out.mkdir(parents=True, exist_ok=True)
        limiter = _limit_threads(cfg.run.threads)
        try:
            body = HANDLERS[args.command](cfg, out, args)
        finally:
            if limiter is not None:
                limiter.unregister()
        path = write_report(out, f"{args.command}_report.json", args.command, cfg, body)
    except ProtoVerifyError as exc:
        return _fail(exc)
    except FileNotFoundError as exc:
        return _fail(MissingInput(exc.filename or str(exc)))
    print(str(path))
    return 0


if __name__ == "__main__":
    sys.exit(main())
