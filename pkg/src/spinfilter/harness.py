"""Experiment orchestration: configs, trial batches, manifests and replay.

A run has two phases.  ``simulate`` writes per-trial truth records, control
waveforms and logs; ``analyze`` reads only those files back, so every
summary table can be regenerated without re-simulating.  Each trial draws
from its own counter-based substreams, so results do not depend on worker
count or scheduling.
"""

from __future__ import annotations

import dataclasses
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .errors import ConfigError, VersionMismatch
from .estimator import SamplerConfig, estimate_backaction_free, estimate_separable, optimum_bound, \
    separable_fidelity_curve
from .projection import run_filter
from .sde import RNG_ALGORITHM, IntegratorConfig, stream, wiener_path
from .slh import FaradayParams, check_unitarity, faraday_E, faraday_g_closed, faraday_slh_closed, lindblad_rhs, \
    slh_from_g, wong_zakai_limit
from .spin import SpinBasis, angles_from_bloch, bloch_from_angles, scs_state
from .trajectory import STREAM_NOISE, STREAM_TRUTH, ControlWaveform, MeasurementRecord, TrajectoryLog, \
    sample_control, simulate_truth

EXPERIMENTS = ("squeeze", "track", "tomography", "slh-check")
FORMATS = ("csv", "json")
TRUTHS = ("random", "+x")


@dataclass
class ExperimentConfig:
    experiment: str = "tomography"
    n_list: tuple = (25,)
    kappa: float = 1.0
    t_f: float = 0.2
    dt: float = 1e-6
    tau: float = 5e-3
    gate_count: int = 40
    trials: int = 200
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    master_seed: int = 0
    out: str = "runs"
    format: str = "csv"
    workers: int = 1
    truth: str = "random"
    log_every: int = 100
    checkpoints: int = 10
    separable_curve: bool = False
    chi0_list: tuple = (0.0, 0.01, 0.1)

    def __post_init__(self):
        self.n_list = tuple(int(v) for v in np.atleast_1d(self.n_list))
        self.chi0_list = tuple(float(v) for v in np.atleast_1d(self.chi0_list))
        if isinstance(self.sampler, dict):
            self.sampler = SamplerConfig(**self.sampler)
        self.validate()

    def validate(self) -> None:
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}", allowed=EXPERIMENTS)
        if self.format not in FORMATS:
            raise ConfigError(f"unknown format {self.format!r}", allowed=FORMATS)
        if self.truth not in TRUTHS:
            raise ConfigError(f"unknown truth mode {self.truth!r}", allowed=TRUTHS)
        if not self.n_list or min(self.n_list) < 1:
            raise ConfigError("n_list needs positive qubit counts", n_list=self.n_list)
        for name in ("kappa", "t_f", "dt", "tau"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive", **{name: getattr(self, name)})
        if self.trials < 1 or self.workers < 1 or self.log_every < 1 or self.checkpoints < 1:
            raise ConfigError("trials, workers, log_every and checkpoints must be positive")
        if self.gate_count < 0 or self.gate_count * self.tau > self.t_f + 1e-12:
            raise ConfigError("gates do not fit in the record", gate_count=self.gate_count, tau=self.tau, t_f=self.t_f)
        k = self.tau / self.dt
        if abs(k - round(k)) > 1e-6 * max(1.0, k):
            raise ConfigError("dt must divide tau", dt=self.dt, tau=self.tau)
        steps = self.t_f / self.dt
        if abs(steps - round(steps)) > 1e-6 * max(1.0, steps):
            raise ConfigError("dt must divide t_f", dt=self.dt, t_f=self.t_f)

    @property
    def steps(self) -> int:
        return int(round(self.t_f / self.dt))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["n_list"] = list(self.n_list)
        d["chi0_list"] = list(self.chi0_list)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError("unknown config keys", keys=sorted(unknown))
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        """JSON object, or plain ``key = value`` lines (``sampler.m = 100`` for nested keys)."""
        text = Path(path).read_text()
        try:
            data = json.loads(text)
        except json.JSONDecodeError:
            data = _parse_key_values(text)
        if not isinstance(data, dict):
            raise ConfigError("config must be a mapping", path=str(path))
        return cls.from_dict(data)


def _parse_value(raw: str):
    raw = raw.strip()
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        if "," in raw:
            return [_parse_value(p) for p in raw.split(",") if p.strip()]
        return raw


def _parse_key_values(text: str) -> dict:
    data: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("expected key = value", line=lineno)
        key, raw = (s.strip() for s in line.split("=", 1))
        if key.startswith("sampler."):
            data.setdefault("sampler", {})[key[len("sampler."):]] = _parse_value(raw)
        else:
            data[key] = _parse_value(raw)
    return data


# ---------------------------------------------------------------- trials

@dataclass(frozen=True)
class TrialSpec:
    index: int
    n: int
    trial: int
    seed: int

    @property
    def stem(self) -> str:
        return f"n{self.n:04d}_t{self.trial:05d}"


def trial_seed(master_seed: int, n: int, trial: int) -> int:
    """Per-trial seed, a hash of (master_seed, n, trial)."""
    seq = np.random.SeedSequence(int(master_seed), spawn_key=(int(n), int(trial)))
    return int(seq.generate_state(1, np.uint64)[0] >> np.uint64(1))


def trial_specs(config: ExperimentConfig) -> list[TrialSpec]:
    out = []
    for n in config.n_list:
        for t in range(config.trials):
            out.append(TrialSpec(len(out), n, t, trial_seed(config.master_seed, n, t)))
    return out


def _truth_angles(config: ExperimentConfig, spec: TrialSpec) -> tuple[float, float]:
    if config.truth == "+x":
        return np.pi / 2, 0.0
    rng = stream(spec.seed, STREAM_TRUTH)
    z = rng.uniform(-1.0, 1.0)
    return float(np.arccos(z)), float(rng.uniform(0.0, 2 * np.pi))


def _control(config: ExperimentConfig, spec: TrialSpec, on: bool = True) -> ControlWaveform:
    if not on or config.gate_count == 0:
        return ControlWaveform.none(config.tau)
    return sample_control(spec.seed, config.gate_count, config.tau)


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_table(path: Path, header, rows, fmt: str) -> Path:
    rows = [list(r) for r in rows]
    if fmt == "json":
        path = path.with_suffix(".json")
        _dump_json(path, [dict(zip(header, (_jsonable(v) for v in r))) for r in rows])
    else:
        path = path.with_suffix(".csv")
        with open(path, "w") as fh:
            fh.write(",".join(header) + "\n")
            for r in rows:
                fh.write(",".join(_cell(v) for v in r) + "\n")
    return path


def _jsonable(v):
    if isinstance(v, (np.floating, float)):
        return float(v)
    if isinstance(v, (np.integer, int)):
        return int(v)
    if isinstance(v, (np.bool_, bool)):
        return bool(v)
    return v


def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


def _variants(config: ExperimentConfig) -> list[tuple[str, bool]]:
    if config.experiment in ("squeeze", "track"):
        return [("on", True), ("off", False)]
    return [("on", True)]


def simulate_trial(config: ExperimentConfig, spec: TrialSpec, outdir) -> list[str]:
    """Truth simulation for one trial; returns the written file names."""
    outdir = Path(outdir)
    theta, phi = _truth_angles(config, spec)
    noise = wiener_path(spec.seed, config.steps, config.dt, key=(STREAM_NOISE,)).increments
    icfg = IntegratorConfig(dt=config.dt)
    files = []
    _dump_json(outdir / f"{spec.stem}_truth.json", {"theta": theta, "phi": phi, "seed": spec.seed, "n": spec.n})
    files.append(f"{spec.stem}_truth.json")
    for tag, on in _variants(config):
        control = _control(config, spec, on)
        keep = config.experiment == "track"
        rec, log = simulate_truth(theta, phi, spec.n, control, config.kappa, config.t_f, icfg, seed=spec.seed,
                                  log_every=config.log_every, keep_states=keep, noise=noise)
        base = f"{spec.stem}_{tag}"
        control.to_csv(outdir / f"{base}_control.csv")
        files.append(f"{base}_control.csv")
        if config.experiment != "squeeze":
            rec.to_csv(outdir / f"{base}_record.csv")
            files.append(f"{base}_record.csv")
        log.to_csv(outdir / f"{base}_log.csv")
        files.append(f"{base}_log.csv")
        if keep:
            np.save(outdir / f"{base}_states.npy", log.states)
            files.append(f"{base}_states.npy")
    return files


def _checkpoint_grid(config: ExperimentConfig) -> np.ndarray:
    return np.unique(np.linspace(config.steps / config.checkpoints, config.steps, config.checkpoints).round()
                     ).astype(np.int64)


def _analyze_tomography(config, spec, outdir: Path, truth: np.ndarray):
    rec = MeasurementRecord.from_csv(outdir / f"{spec.stem}_on_record.csv")
    control = ControlWaveform.from_csv(outdir / f"{spec.stem}_on_control.csv")
    cps = _checkpoint_grid(config)
    sep = estimate_separable(rec, control, config.sampler, seed=spec.seed, truth=truth)
    bf = estimate_backaction_free(rec, control, config.sampler, seed=spec.seed, truth=truth, checkpoints=cps)
    cols = {"step": cps, "t": cps * rec.dt, "fidelity_backaction_free": bf.diagnostics["prefix_fidelity"]}
    if config.separable_curve:
        cols["fidelity_separable"] = separable_fidelity_curve(rec, control, truth, cps, config.sampler, spec.seed)
    _write_table(outdir / f"{spec.stem}_length", list(cols), zip(*cols.values()), "csv")
    est = {"separable": json.loads(sep.to_json(rec.n, spec.seed)),
           "backaction_free": json.loads(bf.to_json(rec.n, spec.seed))}
    _dump_json(outdir / f"{spec.stem}_estimate.json", est)
    return {"fidelity_separable": sep.fidelity, "fidelity_backaction_free": bf.fidelity,
            "full_sphere_fallback": sep.diagnostics["full_sphere_fallback"],
            "clamp_flag": sep.diagnostics["clamp_flag"]}, [f"{spec.stem}_length.csv", f"{spec.stem}_estimate.json"]


def _scs_fidelity(states: np.ndarray, x: np.ndarray, n: int) -> np.ndarray:
    out = np.empty(len(states))
    for k, (psi, v) in enumerate(zip(states, x)):
        out[k] = abs(np.vdot(scs_state(*angles_from_bloch(v), n), psi)) ** 2 / np.vdot(psi, psi).real
    return out


def _analyze_track(config, spec, outdir: Path, truth: np.ndarray):
    outcome, files = {}, []
    for tag, _ in _variants(config):
        base = f"{spec.stem}_{tag}"
        rec = MeasurementRecord.from_csv(outdir / f"{base}_record.csv")
        control = ControlWaveform.from_csv(outdir / f"{base}_control.csv")
        log = TrajectoryLog.from_csv(outdir / f"{base}_log.csv")
        states = np.load(outdir / f"{base}_states.npy")
        run = run_filter(rec, control, truth)
        x = run.x[:: config.log_every][: len(log.times)]
        err = log.mean / (spec.n / 2) - x
        fid = _scs_fidelity(states, x, spec.n)
        _write_table(outdir / f"{base}_tracking", ["t", "err_jx", "err_jy", "err_jz", "scs_fidelity"],
                     np.column_stack([log.times, err, fid]), "csv")
        files.append(f"{base}_tracking.csv")
        rms = np.sqrt(np.mean(err**2, axis=0))
        outcome.update({f"rms_err_{c}_{tag}": float(v) for c, v in zip("xyz", rms)})
        outcome[f"clamp_rate_{tag}"] = run.clamp_rate
    return outcome, files


def _analyze_squeeze(config, spec, outdir: Path):
    outcome = {}
    for tag, _ in _variants(config):
        log = TrajectoryLog.from_csv(outdir / f"{spec.stem}_{tag}_log.csv")
        outcome[f"min_xi2_db_{tag}"] = float(np.nanmin(log.xi2_db))
    return outcome, []


def analyze_trial(config: ExperimentConfig, spec: TrialSpec, outdir) -> tuple[dict, list[str]]:
    """Per-trial analysis from stored files only."""
    outdir = Path(outdir)
    meta = json.loads((outdir / f"{spec.stem}_truth.json").read_text())
    truth = bloch_from_angles(meta["theta"], meta["phi"])
    if config.experiment == "tomography":
        return _analyze_tomography(config, spec, outdir, truth)
    if config.experiment == "track":
        return _analyze_track(config, spec, outdir, truth)
    return _analyze_squeeze(config, spec, outdir)


def _trial_job(args):
    config_dict, spec, outdir, phases = args
    config = ExperimentConfig.from_dict(config_dict)
    files = simulate_trial(config, spec, outdir) if "simulate" in phases else []
    outcome = {}
    if "analyze" in phases:
        outcome, more = analyze_trial(config, spec, outdir)
        files += more
    return spec.index, files, outcome


# ---------------------------------------------------------------- manifest

@dataclass
class RunManifest:
    config: dict
    version: str = __version__
    rng_algorithm: str = RNG_ALGORITHM
    backend: str = kernels.BACKEND
    trials: list = field(default_factory=list)
    wall_clock: float = 0.0

    def save(self, path) -> None:
        _dump_json(Path(path), dataclasses.asdict(self))

    @classmethod
    def load(cls, path) -> "RunManifest":
        data = json.loads(Path(path).read_text())
        return cls(**data)

    def trial(self, index: int) -> dict:
        for t in self.trials:
            if t["index"] == index:
                return t
        raise ConfigError("trial not in manifest", index=index)


def _run_jobs(jobs, workers: int):
    if workers <= 1:
        return [_trial_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_trial_job, jobs))


def _summary(values) -> tuple[float, float]:
    v = np.asarray(values, float)
    se = float(np.sqrt(v.var(ddof=1) / len(v))) if len(v) > 1 else float("nan")
    return float(v.mean()), se


def aggregate(config: ExperimentConfig, manifest: RunManifest, outdir) -> list[str]:
    """Summary tables from per-trial outcomes and files; ordering-independent."""
    outdir = Path(outdir)
    trials = sorted(manifest.trials, key=lambda t: t["index"])
    fmt = config.format
    written = []
    if config.experiment == "tomography":
        rows = []
        for n in config.n_list:
            ts = [t for t in trials if t["n"] == n]
            ms, ss = _summary([t["outcome"]["fidelity_separable"] for t in ts])
            mb, sb = _summary([t["outcome"]["fidelity_backaction_free"] for t in ts])
            rows.append([n, len(ts), ms, ss, mb, sb, optimum_bound(n)])
            curves = [np.loadtxt(outdir / f"n{n:04d}_t{t['trial']:05d}_length.csv", delimiter=",", skiprows=1,
                                 ndmin=2) for t in ts]
            with open(outdir / f"n{n:04d}_t{ts[0]['trial']:05d}_length.csv") as fh:
                header = fh.readline().strip().split(",")
            stack = np.stack(curves)
            cols = [stack[0, :, 0], stack[0, :, 1]]
            names = ["step", "t"]
            for j, name in enumerate(header[2:], start=2):
                mean = stack[:, :, j].mean(axis=0)
                se = stack[:, :, j].std(axis=0, ddof=1) / np.sqrt(len(ts)) if len(ts) > 1 else np.full_like(mean, np.nan)
                cols += [mean, se]
                names += [f"mean_{name}", f"se_{name}"]
            written.append(_write_table(outdir / f"fidelity_vs_length_n{n:04d}", names, zip(*cols), fmt).name)
        header = ["n", "trials", "mean_fidelity_separable", "se_separable", "mean_fidelity_backaction_free",
                  "se_backaction_free", "optimum_bound"]
        written.append(_write_table(outdir / "fidelity_vs_n", header, rows, fmt).name)
    elif config.experiment == "track":
        for n in config.n_list:
            ts = [t for t in trials if t["n"] == n]
            for tag, _ in _variants(config):
                data = np.stack([np.loadtxt(outdir / f"n{n:04d}_t{t['trial']:05d}_{tag}_tracking.csv", delimiter=",",
                                            skiprows=1, ndmin=2) for t in ts])
                err = np.sqrt(np.mean(data[:, :, 1:4] ** 2, axis=0))
                fid = data[:, :, 4].mean(axis=0)
                fse = data[:, :, 4].std(axis=0, ddof=1) / np.sqrt(len(ts)) if len(ts) > 1 else np.full_like(fid, np.nan)
                cols = np.column_stack([data[0, :, 0], err, fid, fse])
                written.append(_write_table(outdir / f"tracking_error_n{n:04d}_{tag}",
                                            ["t", "err_jx", "err_jy", "err_jz", "mean_scs_fidelity", "se_scs_fidelity"],
                                            cols, fmt).name)
    elif config.experiment == "squeeze":
        rows = [[t["n"], t["trial"], t["seed"], t["outcome"]["min_xi2_db_off"], t["outcome"]["min_xi2_db_on"]]
                for t in trials]
        written.append(_write_table(outdir / "squeeze_trials", ["n", "trial", "seed", "min_xi2_db_uncontrolled",
                                                                "min_xi2_db_controlled"], rows, fmt).name)
        summ = []
        for n in config.n_list:
            off = [r[3] for r in rows if r[0] == n]
            on = [r[4] for r in rows if r[0] == n]
            summ.append([n, len(off), float(np.median(off)), float(np.median(on)), *_summary(off), *_summary(on)])
        written.append(_write_table(outdir / "squeeze_summary", ["n", "trials", "median_uncontrolled_db",
                                                                 "median_controlled_db", "mean_uncontrolled_db",
                                                                 "se_uncontrolled_db", "mean_controlled_db",
                                                                 "se_controlled_db"], summ, fmt).name)
    return written


def slh_check_table(n_list, chi0_list, kappa: float = 1.0) -> list[dict]:
    """Constraint residuals and closed-form agreement of the Faraday coefficients."""
    rows = []
    for n in n_list:
        basis = SpinBasis(int(n))
        for chi0 in chi0_list:
            p = FaradayParams(float(chi0), kappa, basis)
            G = wong_zakai_limit(faraday_E(p))
            slh = slh_from_g(G)
            closed = faraday_slh_closed(p)
            rho = np.zeros((basis.dim, basis.dim), complex)
            rho[0, 0] = rho[-1, -1] = 0.5
            rows.append({
                "n": int(n), "chi0": float(chi0), "kappa": float(kappa),
                "unitarity_residual": check_unitarity(G).max_residual,
                "closed_form_g_error": float(np.abs(G.G - faraday_g_closed(p).G).max()),
                "closed_form_s_error": float(np.abs(slh.S - closed.S).max()),
                "closed_form_l_error": float(np.abs(slh.L - closed.L).max()),
                "hamiltonian_norm": float(np.abs(slh.H).max()),
                "scattering_unitarity": slh.unitarity_residual(),
                "lindblad_eigenmixture": float(np.abs(lindblad_rhs(slh, rho)).max()),
            })
    return rows


def run_experiment(config: ExperimentConfig, outdir=None, phases=("simulate", "analyze"), resume: bool = True
                   ) -> RunManifest:
    """Run (or resume) an experiment; writes per-trial files, summaries and manifest.json."""
    outdir = Path(outdir or config.out)
    outdir.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    manifest = RunManifest(config.to_dict())
    if config.experiment == "slh-check":
        rows = slh_check_table(config.n_list, config.chi0_list, config.kappa)
        _write_table(outdir / "slh_residuals", list(rows[0]), [list(r.values()) for r in rows], config.format)
        manifest.wall_clock = time.perf_counter() - start
        manifest.save(outdir / "manifest.json")
        return manifest
    path = outdir / "manifest.json"
    done = {}
    if resume and path.exists():
        old = RunManifest.load(path)
        if old.config == manifest.config and old.version == manifest.version:
            done = {t["index"]: t for t in old.trials if set(phases) <= set(t.get("phases", []))}
        manifest.trials = list(done.values())
    specs = [s for s in trial_specs(config) if s.index not in done]
    jobs = [(config.to_dict(), s, str(outdir), tuple(phases)) for s in specs]
    by_index = {s.index: s for s in specs}
    for index, files, outcome in _run_jobs(jobs, config.workers):
        s = by_index[index]
        manifest.trials.append({"index": s.index, "n": s.n, "trial": s.trial, "seed": s.seed, "files": files,
                                "outcome": {k: _jsonable(v) for k, v in outcome.items()}, "phases": list(phases)})
    manifest.trials.sort(key=lambda t: t["index"])
    manifest.wall_clock = time.perf_counter() - start
    if "analyze" in phases:
        aggregate(config, manifest, outdir)
    manifest.save(path)
    return manifest


def analyze_run(outdir, workers: int | None = None) -> RunManifest:
    """Re-derive per-trial outcomes and summaries from stored files."""
    outdir = Path(outdir)
    manifest = RunManifest.load(outdir / "manifest.json")
    _check_version(manifest)
    config = ExperimentConfig.from_dict(manifest.config)
    if workers:
        config.workers = workers
    if config.experiment == "slh-check":
        return manifest
    jobs = [(config.to_dict(), TrialSpec(t["index"], t["n"], t["trial"], t["seed"]), str(outdir), ("analyze",))
            for t in manifest.trials]
    results = {i: (f, o) for i, f, o in _run_jobs(jobs, config.workers)}
    for t in manifest.trials:
        files, outcome = results[t["index"]]
        t["outcome"] = {k: _jsonable(v) for k, v in outcome.items()}
        t["files"] = sorted(set(t["files"]) | set(files))
        t["phases"] = sorted(set(t.get("phases", [])) | {"analyze"})
    aggregate(config, manifest, outdir)
    manifest.save(outdir / "manifest.json")
    return manifest


def _check_version(manifest: RunManifest) -> None:
    if manifest.version != __version__ or manifest.rng_algorithm != RNG_ALGORITHM:
        raise VersionMismatch("manifest was written by a different build", manifest_version=manifest.version,
                              current_version=__version__, manifest_rng=manifest.rng_algorithm,
                              current_rng=RNG_ALGORITHM)


def replay_trial(manifest: RunManifest | str | os.PathLike, trial_index: int, outdir) -> list[str]:
    """Recompute one trial into ``outdir``; files match the original byte for byte."""
    if not isinstance(manifest, RunManifest):
        manifest = RunManifest.load(Path(manifest) / "manifest.json" if Path(manifest).is_dir() else manifest)
    _check_version(manifest)
    config = ExperimentConfig.from_dict(manifest.config)
    t = manifest.trial(trial_index)
    spec = TrialSpec(t["index"], t["n"], t["trial"], t["seed"])
    if spec.seed != trial_seed(config.master_seed, spec.n, spec.trial):
        raise VersionMismatch("trial seed does not match the seed derivation", index=trial_index)
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    _, files, _ = _trial_job((config.to_dict(), spec, str(outdir), tuple(t.get("phases", ("simulate", "analyze")))))
    return files
