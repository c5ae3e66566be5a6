"""Uniform-grid reference estimators and a common front end for all estimator kinds."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import OtfsConfig, PilotConfig
from .dictionary import Dictionary, Grid, assemble, make_uniform_grid
from .evolution import GeConfig, run_ge
from .sbl import PosteriorState, SblHyperParams, init_posterior, reconstruct, run_learning

KINDS = ("on-grid", "off-grid-uniform", "grid-evolution")


@dataclass(frozen=True)
class EstimatorSpec:
    kind: str
    r_nu: float = 0.25
    r_tau: float | None = None
    ge: GeConfig | None = None
    hyper: SblHyperParams = field(default_factory=SblHyperParams)
    label: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown estimator kind {self.kind!r}")

    @property
    def name(self) -> str:
        return self.label or self.kind

    def grid_size(self, cfg: OtfsConfig) -> int | None:
        if self.kind == "grid-evolution":
            return None
        return make_uniform_grid(cfg, self.r_nu, self.r_tau).L


@dataclass
class Estimate:
    """Outcome of one estimator on one observation."""

    grid: Grid
    dictionary: Dictionary
    state: PosteriorState
    h_hat: np.ndarray
    history: list = field(default_factory=list)

    @property
    def L(self) -> int:
        return self.grid.L


def _uniform(cfg, pilot, r_nu, r_tau, y, x_p, hyper, offgrid, callback):
    grid = make_uniform_grid(cfg, r_nu, r_tau)
    d = assemble(cfg, pilot, grid)
    st = init_posterior(d, grid, y, x_p, hyper)
    cb = None if callback is None else (lambda it, s: callback(it, s, d))
    st = run_learning(d, grid, y, x_p, hyper, st, hyper.K, k_max=cfg.k_max, l_max=cfg.l_max,
                      offgrid=offgrid, callback=cb)
    return grid, d, st


def estimate_on_grid(cfg: OtfsConfig, pilot: PilotConfig, r, y, x_p=None,
                     hyper: SblHyperParams | None = None, r_tau=None, callback=None) -> PosteriorState:
    """SBL on the uniform grid with offsets frozen at zero."""
    x_p = pilot.x_p if x_p is None else x_p
    return _uniform(cfg, pilot, r, r_tau, y, x_p, hyper or SblHyperParams(), False, callback)[2]


def estimate_off_grid_uniform(cfg: OtfsConfig, pilot: PilotConfig, r, y, x_p=None,
                              hyper: SblHyperParams | None = None, r_tau=None, callback=None) -> PosteriorState:
    """Off-grid SBL on a fixed uniform grid (no fission, no adjustment)."""
    x_p = pilot.x_p if x_p is None else x_p
    return _uniform(cfg, pilot, r, r_tau, y, x_p, hyper or SblHyperParams(), True, callback)[2]


def run_estimator(spec: EstimatorSpec, cfg: OtfsConfig, pilot: PilotConfig, y, *, truth=None,
                  callback=None) -> Estimate:
    """Run any estimator kind; ``callback(iteration, state, dictionary)`` sees every learning iteration."""
    x_p = pilot.x_p
    if spec.kind == "grid-evolution":
        ge = spec.ge or GeConfig(hyper=spec.hyper)
        res = run_ge(cfg, pilot, ge, y, x_p, truth=truth, callback=callback)
        return Estimate(res.grid, res.dictionary, res.state, reconstruct(res.dictionary, res.state), res.history)
    grid, d, st = _uniform(cfg, pilot, spec.r_nu, spec.r_tau, y, x_p, spec.hyper,
                           spec.kind == "off-grid-uniform", callback)
    return Estimate(grid, d, st, reconstruct(d, st))


def nmse_db(h_hat, h_true) -> float:
    """Normalised squared error of the effective-channel estimate, in dB."""
    e = np.asarray(h_hat) - np.asarray(h_true)
    return float(10 * np.log10(np.vdot(e, e).real / np.vdot(h_true, h_true).real))


def nearest_uniform(cfg: OtfsConfig, target: int) -> tuple[float, float, int]:
    """Resolutions ``(r_nu, r_tau)`` of the divisor-constrained uniform grid with size closest to ``target``.

    Ties prefer the larger grid.
    """
    best = None
    for n_nu in range(1, 4 * 2 * cfg.k_max + 1):
        for n_tau in range(1, 4 * cfg.l_max + 1):
            L = (n_nu + 1) * (n_tau + 1)
            key = (abs(L - target), -L, abs(n_nu / (2 * cfg.k_max) - n_tau / cfg.l_max))
            if best is None or key < best[0]:
                best = (key, 2 * cfg.k_max / n_nu, cfg.l_max / n_tau, L)
    return best[1], best[2], best[3]
