"""Monte Carlo studies: NMSE sweep, convergence traces, cost accounting and the r_min study.

Seeding contract: trial ``t`` draws its channel from seed ``master_seed + t``
and its noise at SNR ``s`` from the sequence ``[master_seed + t, snr_key(s)]``.
Results therefore do not depend on worker count or on which other SNR points
are in the sweep.
"""

from __future__ import annotations

import configparser
import csv
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from .baselines import EstimatorSpec, nearest_uniform, nmse_db, run_estimator
from .channel import effective_channel, sample_channel, synthesize_observation
from .core import OtfsConfig, PilotConfig, derive_config
from .dictionary import assemble, make_uniform_grid
from .evolution import GeConfig
from .sbl import SblHyperParams, init_posterior, reconstruct

log = logging.getLogger(__name__)

STUDIES = ("sweep", "converge", "complexity", "rmin-study")

SWEEP_COLUMNS = ["estimator", "snr_db", "trial", "nmse_db", "final_L", "total_ops", "wall_ms"]
SUMMARY_COLUMNS = ["estimator", "snr_db", "trials", "nmse_db_median", "nmse_db_mean", "nmse_mean_db",
                   "final_L_median"]
CONVERGENCE_COLUMNS = ["estimator", "iteration", "nmse_db", "L", "cumulative_ops"]
COMPLEXITY_COLUMNS = ["estimator", "iteration", "L", "cumulative_ops"]
RMIN_COLUMNS = ["estimator", "r_or_rmin", "nmse_db_mean"]


class BenchError(RuntimeError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    cfg: OtfsConfig
    pilot: PilotConfig = field(default_factory=PilotConfig)
    P: int = 5
    estimators: tuple = ()
    snr_grid_db: tuple = (0.0, 5.0, 10.0, 15.0, 20.0)
    trials: int = 100
    master_seed: int = 0
    converge_snr_db: float = 20.0
    converge_trials: int = 50
    rmin_snr_db: float = 20.0
    rmin_trials: int = 100
    rmin_values: tuple = (1.0, 0.5, 0.25, 0.125)
    hyper: SblHyperParams = field(default_factory=SblHyperParams)
    ge: GeConfig = field(default_factory=GeConfig)
    workers: int = 1

    def __post_init__(self):
        if self.trials < 1 or self.converge_trials < 1 or self.rmin_trials < 1:
            raise ValueError("trial counts must be >= 1")
        if not self.snr_grid_db:
            raise ValueError("snr grid is empty")
        if self.P < 0:
            raise ValueError("path count must be >= 0")
        # the shared SBL settings are authoritative for the GE defaults too
        object.__setattr__(self, "ge", replace(self.ge, hyper=self.hyper))
        if not self.estimators:
            object.__setattr__(self, "estimators", tuple(default_estimators(self.cfg, self.hyper, self.ge)))


def default_estimators(cfg: OtfsConfig, hyper: SblHyperParams, ge: GeConfig) -> list[EstimatorSpec]:
    r_nu, r_tau, L = nearest_uniform(cfg, 110)
    fine = make_uniform_grid(cfg, 0.25).L
    return [
        EstimatorSpec("grid-evolution", ge=replace(ge, hyper=hyper), hyper=hyper, label="GE"),
        EstimatorSpec("off-grid-uniform", r_nu, r_tau, hyper=hyper, label=f"off-grid-U-{L}"),
        EstimatorSpec("off-grid-uniform", 0.25, hyper=hyper, label=f"off-grid-U-{fine}"),
        EstimatorSpec("on-grid", 1.0, hyper=hyper, label=f"on-grid-{make_uniform_grid(cfg, 1.0).L}"),
    ]


# --- configuration file -------------------------------------------------------

def _num(text: str) -> float:
    return float(Fraction(text.strip()))


def _list(text: str) -> tuple:
    return tuple(_num(t) for t in text.replace(";", ",").split(",") if t.strip())


_HYPER_KEYS = {f.name for f in fields(SblHyperParams)}
_GE_KEYS = {f.name for f in fields(GeConfig)} - {"hyper"}
_INT_KEYS = {"K", "K_f", "K_a", "inner_iters_fission", "inner_iters_adjust"}


def _typed(key: str, value: str):
    if key == "neighbourhood":
        return value.strip()
    v = _num(value)
    return int(v) if key in _INT_KEYS else v


def parse_estimator(label: str, text: str, cfg: OtfsConfig, hyper: SblHyperParams, ge: GeConfig) -> EstimatorSpec:
    """Parse ``kind[, key=value ...]``.

    Resolution keys: ``r`` (both axes), ``r_nu``/``r_tau``, or ``points`` for
    the divisor-constrained grid nearest that size. Any SBL or grid-evolution
    setting may follow and overrides the shared defaults.
    """
    kind, *opts = [t.strip() for t in text.split(",")]
    kw = {}
    for o in opts:
        if "=" not in o:
            raise ValueError(f"estimator {label!r}: expected key=value, got {o!r}")
        k, v = (t.strip() for t in o.split("=", 1))
        kw[k] = v
    h_over = {k: _typed(k, kw.pop(k)) for k in list(kw) if k in _HYPER_KEYS}
    g_over = {k: _typed(k, kw.pop(k)) for k in list(kw) if k in _GE_KEYS}
    hp = replace(hyper, **h_over)
    r_nu = r_tau = None
    if "points" in kw:
        r_nu, r_tau, _ = nearest_uniform(cfg, int(_num(kw.pop("points"))))
    if "r" in kw:
        r_nu = r_tau = _num(kw.pop("r"))
    if "r_nu" in kw:
        r_nu = _num(kw.pop("r_nu"))
    if "r_tau" in kw:
        r_tau = _num(kw.pop("r_tau"))
    if kw:
        raise ValueError(f"estimator {label!r}: unknown settings {sorted(kw)}")
    if kind == "grid-evolution":
        return EstimatorSpec(kind, ge=replace(ge, hyper=hp, **g_over), hyper=hp, label=label)
    if g_over:
        raise ValueError(f"estimator {label!r}: grid-evolution settings on a uniform estimator")
    if r_nu is None:
        raise ValueError(f"estimator {label!r}: missing resolution")
    spec = EstimatorSpec(kind, r_nu, r_tau, hyper=hp, label=label)
    spec.grid_size(cfg)  # validates divisibility
    return spec


def load_config(path=None, *, seed: int | None = None, workers: int | None = None) -> ExperimentConfig:
    """Read an INI experiment file; every missing value falls back to the built-in scenario."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    if path is not None:
        path = Path(path)
        try:
            with open(path, encoding="utf-8") as fh:
                cp.read_file(fh)
        except OSError as exc:
            raise BenchError(f"cannot read config {path}: {exc}") from exc
    sc = cp["scenario"] if cp.has_section("scenario") else {}
    st = cp["study"] if cp.has_section("study") else {}

    def get(sec, key, default):
        return _num(sec[key]) if key in sec else default

    cfg = derive_config(
        int(get(sc, "N", 32)), int(get(sc, "M", 32)), get(sc, "delta_f", 15e3), get(sc, "fc", 4e9),
        get(sc, "v_max_kmh", 500.0) / 3.6, get(sc, "tau_max", 8.3e-6),
    )
    pilot = PilotConfig(k_p=int(get(sc, "k_p", 0)), l_p=int(get(sc, "l_p", 0)),
                        pilot_gain_db=get(sc, "pilot_gain_db", 30.0))
    hyper = SblHyperParams(**{k: _typed(k, cp["hyper"][k]) for k in cp["hyper"]}) if cp.has_section("hyper") \
        else SblHyperParams()
    ge = GeConfig(hyper=hyper, **{k: _typed(k, cp["ge"][k]) for k in cp["ge"]}) if cp.has_section("ge") \
        else GeConfig(hyper=hyper)
    ests = tuple(parse_estimator(k, v, cfg, hyper, ge) for k, v in cp["estimators"].items()) \
        if cp.has_section("estimators") else ()
    exp = ExperimentConfig(
        cfg=cfg, pilot=pilot, P=int(get(sc, "P", 5)), estimators=ests,
        snr_grid_db=_list(st["snr_db"]) if "snr_db" in st else (0.0, 5.0, 10.0, 15.0, 20.0),
        trials=int(get(st, "trials", 100)),
        master_seed=int(st["seed"]) if "seed" in st else 0,
        converge_snr_db=get(st, "converge_snr_db", 20.0),
        converge_trials=int(get(st, "converge_trials", 50)),
        rmin_snr_db=get(st, "rmin_snr_db", 20.0),
        rmin_trials=int(get(st, "rmin_trials", 100)),
        rmin_values=_list(st["rmin_values"]) if "rmin_values" in st else (1.0, 0.5, 0.25, 0.125),
        hyper=hyper, ge=ge,
        workers=int(get(st, "workers", 1)),
    )
    if seed is not None:
        exp = replace(exp, master_seed=seed)
    if workers is not None:
        exp = replace(exp, workers=workers)
    return exp


# --- trials -------------------------------------------------------------------

def snr_key(snr_db: float) -> int:
    """Non-negative integer tag of an SNR point for noise seeding (millidecibel resolution)."""
    return int(round((snr_db + 1000.0) * 1000))


def trial_problem(exp: ExperimentConfig, trial: int, snr_db: float):
    """Channel, effective channel and observation for one trial at one SNR."""
    seed = exp.master_seed + trial
    ch = sample_channel(exp.cfg, exp.P, seed)
    H = effective_channel(exp.cfg, exp.pilot, ch)
    obs = synthesize_observation(exp.cfg, exp.pilot, ch, snr_db, [seed, snr_key(snr_db)])
    return ch, H, obs


def _map(fn, jobs, workers):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, jobs))


def _sweep_trial(job):
    exp, trial = job
    rows = []
    for snr in exp.snr_grid_db:
        _, H, obs = trial_problem(exp, trial, snr)
        for spec in exp.estimators:
            t0 = time.perf_counter()
            est = run_estimator(spec, exp.cfg, exp.pilot, obs.y)
            wall = (time.perf_counter() - t0) * 1e3
            rows.append(dict(estimator=spec.name, snr_db=snr, trial=trial, nmse_db=nmse_db(est.h_hat, H),
                             final_L=est.L, total_ops=est.state.op_count, wall_ms=round(wall, 3)))
    return rows


def _initial(spec: EstimatorSpec, exp: ExperimentConfig, y):
    """Grid, dictionary and state right after initialisation (the iteration-0 point)."""
    if spec.kind == "grid-evolution":
        ge = spec.ge or exp.ge
        grid = make_uniform_grid(exp.cfg, ge.r_init, ge.r_init, r_min=ge.r_min)
        hyper = ge.hyper
    else:
        grid = make_uniform_grid(exp.cfg, spec.r_nu, spec.r_tau)
        hyper = spec.hyper
    d = assemble(exp.cfg, exp.pilot, grid)
    return d, init_posterior(d, grid, y, exp.pilot.x_p, hyper)


def trace_trial(exp: ExperimentConfig, spec: EstimatorSpec, trial: int, snr_db: float) -> list[tuple]:
    """Per-iteration ``(iteration, nmse_db, L, cumulative_ops)`` for one estimator on one trial."""
    _, H, obs = trial_problem(exp, trial, snr_db)
    d0, s0 = _initial(spec, exp, obs.y)
    out = [(0, nmse_db(reconstruct(d0, s0), H), d0.L, 0)]

    def cb(it, st, d):
        out.append((it, nmse_db(reconstruct(d, st), H), d.L, st.op_count))

    run_estimator(spec, exp.cfg, exp.pilot, obs.y, callback=cb)
    return out


def _trace_job(job):
    exp, trial, snr = job
    return [trace_trial(exp, spec, trial, snr) for spec in exp.estimators]


def _hold(trace, n):
    """Extend a trace to ``n`` iterations by holding its last values (a stopped run costs nothing more)."""
    arr = np.array([t[1:] for t in trace], float)
    if len(arr) < n:
        arr = np.vstack([arr, np.repeat(arr[-1:], n - len(arr), axis=0)])
    return arr


def average_traces(traces: list[list[tuple]]) -> np.ndarray:
    """Columns ``nmse_db, L, cumulative_ops`` averaged over trials; row index is the iteration."""
    n = max(len(t) for t in traces)
    return np.mean([_hold(t, n) for t in traces], axis=0)


# --- studies ------------------------------------------------------------------

@dataclass
class StudyResult:
    rows: list
    summary: list = field(default_factory=list)
    detail: list = field(default_factory=list)


def run_sweep(exp: ExperimentConfig) -> StudyResult:
    per_trial = _map(_sweep_trial, [(exp, t) for t in range(exp.trials)], exp.workers)
    rows = [r for rs in per_trial for r in rs]
    return StudyResult(rows, summarise(rows))


def summarise(rows) -> list[dict]:
    """Median, mean-of-dB and dB-of-mean NMSE per (estimator, snr)."""
    groups: dict[tuple, list] = {}
    for r in rows:
        groups.setdefault((r["estimator"], r["snr_db"]), []).append(r)
    out = []
    for (name, snr), rs in groups.items():
        v = np.array([r["nmse_db"] for r in rs])
        out.append(dict(
            estimator=name, snr_db=snr, trials=len(rs),
            nmse_db_median=float(np.median(v)), nmse_db_mean=float(np.mean(v)),
            nmse_mean_db=float(10 * np.log10(np.mean(10 ** (v / 10)))),
            final_L_median=float(np.median([r["final_L"] for r in rs])),
        ))
    return out


def collect_traces(exp: ExperimentConfig) -> dict[str, list]:
    jobs = [(exp, t, exp.converge_snr_db) for t in range(exp.converge_trials)]
    per_trial = _map(_trace_job, jobs, exp.workers)
    return {spec.name: [pt[i] for pt in per_trial] for i, spec in enumerate(exp.estimators)}


def run_convergence(exp: ExperimentConfig, traces=None) -> StudyResult:
    traces = collect_traces(exp) if traces is None else traces
    rows = []
    for name, ts in traces.items():
        for it, (nm, L, ops) in enumerate(average_traces(ts)):
            rows.append(dict(estimator=name, iteration=it, nmse_db=float(nm), L=float(L), cumulative_ops=float(ops)))
    return StudyResult(rows, detail=traces)


def run_complexity(exp: ExperimentConfig, traces=None) -> StudyResult:
    traces = collect_traces(exp) if traces is None else traces
    rows = []
    for name, ts in traces.items():
        for it, (_, L, ops) in enumerate(average_traces(ts)):
            rows.append(dict(estimator=name, iteration=it, L=float(L), cumulative_ops=float(ops)))
    return StudyResult(rows, detail=traces)


def rmin_estimators(exp: ExperimentConfig) -> list[tuple[str, float, EstimatorSpec]]:
    out = []
    for r in exp.rmin_values:
        ge = replace(exp.ge, r_min=r, K_f=max(exp.ge.K_f, math.ceil(math.log2(1 / r)) if r < 1 else 1))
        out.append(("GE", r, EstimatorSpec("grid-evolution", ge=ge, hyper=exp.hyper, label="GE")))
    for r in exp.rmin_values:
        out.append(("off-grid-U", r, EstimatorSpec("off-grid-uniform", r, hyper=exp.hyper, label="off-grid-U")))
    return out


def _rmin_trial(job):
    exp, trial = job
    _, H, obs = trial_problem(exp, trial, exp.rmin_snr_db)
    return [nmse_db(run_estimator(spec, exp.cfg, exp.pilot, obs.y).h_hat, H) for _, _, spec in rmin_estimators(exp)]


def run_rmin_study(exp: ExperimentConfig) -> StudyResult:
    specs = rmin_estimators(exp)
    per_trial = np.array(_map(_rmin_trial, [(exp, t) for t in range(exp.rmin_trials)], exp.workers))
    rows, detail = [], []
    for j, (name, r, _) in enumerate(specs):
        rows.append(dict(estimator=name, r_or_rmin=r, nmse_db_mean=float(per_trial[:, j].mean())))
        detail += [dict(estimator=name, r_or_rmin=r, trial=t, nmse_db=float(v)) for t, v in enumerate(per_trial[:, j])]
    return StudyResult(rows, detail=detail)


# --- output -------------------------------------------------------------------

def write_csv(path, rows, columns) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    except OSError as exc:
        raise BenchError(f"cannot write {path}: {exc}") from exc
    return path


def run_study(name: str, exp: ExperimentConfig, out_dir) -> list[Path]:
    """Run one study and write its CSV files into ``out_dir``; returns the written paths."""
    out = Path(out_dir)
    if name == "sweep":
        res = run_sweep(exp)
        return [write_csv(out / "sweep.csv", res.rows, SWEEP_COLUMNS),
                write_csv(out / "sweep_summary.csv", res.summary, SUMMARY_COLUMNS)]
    if name == "converge":
        return [write_csv(out / "convergence.csv", run_convergence(exp).rows, CONVERGENCE_COLUMNS)]
    if name == "complexity":
        return [write_csv(out / "complexity.csv", run_complexity(exp).rows, COMPLEXITY_COLUMNS)]
    if name == "rmin-study":
        res = run_rmin_study(exp)
        return [write_csv(out / "rmin_study.csv", res.rows, RMIN_COLUMNS),
                write_csv(out / "rmin_study_trials.csv", res.detail, ["estimator", "r_or_rmin", "trial", "nmse_db"])]
    raise ValueError(f"unknown study {name!r}; choose from {STUDIES}")
