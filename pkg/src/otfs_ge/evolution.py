"""Grid evolution: learning-fission rounds followed by learning-adjustment rounds."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .core import OtfsConfig, PilotConfig
from .dictionary import DUP_TOL, Dictionary, Grid, GridPoint, append_points, assemble, make_uniform_grid, move_points
from .sbl import (
    IllConditionedError,
    PosteriorState,
    SblHyperParams,
    init_posterior,
    offset_bounds,
    reconstruct,
    run_learning,
    significance_threshold,
    significant,
)

log = logging.getLogger(__name__)

_RES_TOL = 1e-12


@dataclass(frozen=True)
class GeConfig:
    r_min: float = 0.25
    K_f: int = 5
    K_a: int = 50
    delta_a: float = 0.1
    inner_iters_fission: int = 5
    inner_iters_adjust: int = 20
    r_init: float = 1.0
    neighbourhood: str = "axis"
    hyper: SblHyperParams = field(default_factory=SblHyperParams)

    def __post_init__(self):
        if self.r_min <= 0 or self.K_f < 1 or self.K_a < 1 or self.delta_a <= 0:
            raise ValueError(f"invalid grid-evolution settings {self}")
        if self.inner_iters_fission < 1 or self.inner_iters_adjust < 1:
            raise ValueError("inner iteration counts must be >= 1")
        if self.neighbourhood not in ("axis", "chebyshev"):
            raise ValueError(f"unknown neighbourhood rule {self.neighbourhood!r}")
        need = math.ceil(math.log2(self.r_init / self.r_min)) if self.r_min < self.r_init else 0
        if self.K_f < need:
            log.warning("K_f=%d cannot reach r_min=%g from r=%g (needs %d rounds)",
                        self.K_f, self.r_min, self.r_init, need)


@dataclass
class GeResult:
    grid: Grid
    dictionary: Dictionary
    state: PosteriorState
    history: list = field(default_factory=list)
    stop_reasons: dict = field(default_factory=dict)

    @property
    def L(self) -> int:
        return self.grid.L

    def history_to_csv(self, path) -> None:
        cols = ["round", "phase", "L", "op_count", "fissions", "adjust_norm", "iterations", "nmse_db"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
            w.writeheader()
            for row in self.history:
                w.writerow(row)


def _fission_dirs(grid: Grid, i: int, kappa: float, iota: float, k_max: float, l_max: float):
    """Directions (+1/-1, or 0 for no fission) per dimension for point ``i``."""
    out = []
    for coord, off, r_m, r_p, lo, hi in (
        (grid.k[i], kappa, grid.r_nu_minus[i], grid.r_nu_plus[i], -k_max, k_max),
        (grid.l[i], iota, grid.r_tau_minus[i], grid.r_tau_plus[i], 0.0, l_max),
    ):
        ok = {1: r_p > grid.r_min + _RES_TOL and coord + r_p / 2 <= hi + DUP_TOL,
              -1: r_m > grid.r_min + _RES_TOL and coord - r_m / 2 >= lo - DUP_TOL}
        s = 1 if off >= 0 else -1
        # a side already at r_min, or one whose child would leave the CE region, turns to the other side
        if not ok[s]:
            s = -s if ok[-s] else 0
        out.append(s)
    return out


def _neighbours(grid: Grid, i: int, radius: float, rule: str) -> np.ndarray:
    """Neighbours of point ``i``: axis-adjacent points within its resolutions, or a Chebyshev ball."""
    dk = np.abs(grid.k - grid.k[i])
    dl = np.abs(grid.l - grid.l[i])
    if rule == "chebyshev":
        m = np.maximum(dk, dl) <= radius + DUP_TOL
    else:
        m = ((dl < DUP_TOL) & (grid.k - grid.k[i] <= grid.r_nu_plus[i] + DUP_TOL)
             & (grid.k[i] - grid.k <= grid.r_nu_minus[i] + DUP_TOL))
        m |= ((dk < DUP_TOL) & (grid.l - grid.l[i] <= grid.r_tau_plus[i] + DUP_TOL)
              & (grid.l[i] - grid.l <= grid.r_tau_minus[i] + DUP_TOL))
    m[i] = False
    return np.flatnonzero(m)


def select_fission_points(state: PosteriorState, grid: Grid, epsilon: float,
                          k_max: float | None = None, l_max: float | None = None,
                          neighbourhood: str = "axis") -> list[int]:
    """Indices that are significant, a local maximum of ``|mu|``, and still above ``r_min`` somewhere."""
    k_max = np.inf if k_max is None else k_max
    l_max = np.inf if l_max is None else l_max
    mag = np.abs(state.mu)
    thr = significance_threshold(state, epsilon)
    radius = np.maximum.reduce([grid.r_nu_minus, grid.r_nu_plus, grid.r_tau_minus, grid.r_tau_plus])
    out = []
    for i in np.flatnonzero(mag > thr):
        nb = _neighbours(grid, i, radius[i], neighbourhood)
        # ties go to the lower index
        if np.any(mag[nb] > mag[i]) or np.any((mag[nb] == mag[i]) & (nb < i)):
            continue
        if any(_fission_dirs(grid, i, state.kappa[i], state.iota[i], k_max, l_max)):
            out.append(int(i))
    return out


def _extend_state(state: PosteriorState, n_new: int, alpha: np.ndarray) -> PosteriorState:
    z = np.zeros(n_new)
    return replace(
        state,
        mu=np.concatenate([state.mu, z.astype(complex)]),
        alpha=alpha,
        kappa=np.concatenate([state.kappa, z]),
        iota=np.concatenate([state.iota, z]),
        sigma_diag=np.concatenate([state.sigma_diag, alpha[len(state.mu):]]),
        gamma=np.concatenate([state.gamma, z]),
        estep=None,
    )


def fission(grid: Grid, d: Dictionary, state: PosteriorState, indices, cfg: OtfsConfig,
            pilot: PilotConfig | None = None):
    """Split each selected point toward its estimated offset in Doppler and in delay.

    Returns ``(grid, dictionary, state, n_created)``.
    """
    r_nu_m, r_nu_p = grid.r_nu_minus.copy(), grid.r_nu_plus.copy()
    r_tau_m, r_tau_p = grid.r_tau_minus.copy(), grid.r_tau_plus.copy()
    alpha = state.alpha.copy()
    kappa, iota = state.kappa.copy(), state.iota.copy()
    g, dct, created = grid, d, 0
    for i in indices:
        dir_nu, dir_tau = _fission_dirs(grid, i, state.kappa[i], state.iota[i], cfg.k_max, cfg.l_max)
        k, l, gen = grid.k[i], grid.l[i], int(grid.generation[i]) + 1
        kids = []
        if dir_nu:
            r = grid.r_nu_plus[i] if dir_nu > 0 else grid.r_nu_minus[i]
            kids.append(("nu", dir_nu, GridPoint(k + dir_nu * r / 2, l, r / 2, r / 2,
                                                  grid.r_tau_minus[i], grid.r_tau_plus[i], gen)))
        if dir_tau:
            r = grid.r_tau_plus[i] if dir_tau > 0 else grid.r_tau_minus[i]
            kids.append(("tau", dir_tau, GridPoint(k, l + dir_tau * r / 2, grid.r_nu_minus[i],
                                                   grid.r_nu_plus[i], r / 2, r / 2, gen)))
        made = []
        for dim, s, p in kids:
            g2, dct2, dropped = append_points(g, dct, [p], cfg, pilot)
            if dropped:
                continue
            g, dct = g2, dct2
            made.append((dim, s))
        if not made:
            continue
        for dim, s in made:
            if dim == "nu":
                if s > 0:
                    r_nu_p[i] /= 2
                else:
                    r_nu_m[i] /= 2
            else:
                if s > 0:
                    r_tau_p[i] /= 2
                else:
                    r_tau_m[i] /= 2
        share = alpha[i] / (len(made) + 1)
        alpha[i] = share
        alpha = np.concatenate([alpha, np.full(len(made), share)])
        created += len(made)
    if created == 0:
        return grid, d, state, 0
    n_old = grid.L
    pad = lambda a, f: np.concatenate([a, getattr(g, f)[n_old:]])
    g = g.with_arrays(
        r_nu_minus=pad(r_nu_m, "r_nu_minus"), r_nu_plus=pad(r_nu_p, "r_nu_plus"),
        r_tau_minus=pad(r_tau_m, "r_tau_minus"), r_tau_plus=pad(r_tau_p, "r_tau_plus"),
    )
    dct = Dictionary(dct.phi_I, dct.phi_nu, dct.phi_tau, g)
    st = _extend_state(replace(state, kappa=kappa, iota=iota), created, alpha)
    # parents' supports shrank on the fission side
    k_lo, k_hi, l_lo, l_hi = offset_bounds(g, cfg.k_max, cfg.l_max)
    st = replace(st, kappa=np.clip(st.kappa, k_lo, k_hi), iota=np.clip(st.iota, l_lo, l_hi))
    return g, dct, st, created


def adjust(grid: Grid, d: Dictionary, state: PosteriorState, cfg: OtfsConfig, pilot: PilotConfig | None,
           epsilon: float):
    """Fold the offsets of significant points into their coordinates.

    Returns ``(grid, dictionary, state, n_clamped)``.
    """
    idx = significant(state, epsilon)
    if idx.size == 0:
        return grid, d, state, 0
    g, dct, n_clamped = move_points(grid, idx, state.kappa, state.iota, cfg, pilot, d)
    kappa, iota = state.kappa.copy(), state.iota.copy()
    moved = idx[(g.k[idx] != grid.k[idx]) | (g.l[idx] != grid.l[idx])]
    kappa[moved] = 0.0
    iota[moved] = 0.0
    return g, dct, replace(state, kappa=kappa, iota=iota), n_clamped


def adjust_norm(state: PosteriorState, epsilon: float) -> float:
    idx = significant(state, epsilon)
    return float(np.linalg.norm(np.concatenate([state.kappa[idx], state.iota[idx]])))


def run_ge(cfg: OtfsConfig, pilot: PilotConfig, ge: GeConfig, y, x_p=None, *, truth=None,
           callback=None, final_reserve: int = 10) -> GeResult:
    """Evolve a coarse uniform grid and estimate the channel on it.

    ``truth`` (effective channel vector) enables per-round NMSE in the
    history. ``callback(iteration, state, dictionary)`` sees every learning
    iteration with its global index. The learning budget ``ge.hyper.K`` is
    shared by both phases and the final learning run.
    """
    hyper = ge.hyper
    x_p = pilot.x_p if x_p is None else x_p
    grid = make_uniform_grid(cfg, ge.r_init, ge.r_init, r_min=ge.r_min)
    dct = assemble(cfg, pilot, grid)
    state = init_posterior(dct, grid, y, x_p, hyper)
    history: list[dict] = []
    reasons: dict[str, str] = {}
    used = 0
    rnd = 0

    def nmse_db(dd, st):
        if truth is None:
            return float("nan")
        e = reconstruct(dd, st) - truth
        return float(10 * np.log10(np.vdot(e, e).real / np.vdot(truth, truth).real))

    def learn(n):
        nonlocal state, used
        cb = None if callback is None else (lambda it, st, dd=dct: callback(it, st, dd))
        try:
            state = run_learning(dct, grid, y, x_p, hyper, state, n, k_max=cfg.k_max, l_max=cfg.l_max,
                                 callback=cb, first_iteration=used)
        except IllConditionedError as exc:
            log.warning("%s; restarting learning with a fresh noise precision", exc)
            fresh = init_posterior(dct, grid, y, x_p, hyper, alpha=state.alpha,
                                   kappa=state.kappa, iota=state.iota)
            fresh = replace(fresh, lam=fresh.lam * 0.01, op_count=state.op_count)
            state = run_learning(dct, grid, y, x_p, hyper, fresh, n, k_max=cfg.k_max, l_max=cfg.l_max,
                                 callback=cb, first_iteration=used)
        used += state.iters_used

    budget = hyper.K - final_reserve
    reasons["fission"] = "max_rounds"
    for _ in range(ge.K_f):
        if used >= budget:
            reasons["fission"] = "budget"
            break
        learn(min(ge.inner_iters_fission, budget - used))
        nm = nmse_db(dct, state)
        sel = select_fission_points(state, grid, hyper.epsilon, cfg.k_max, cfg.l_max, ge.neighbourhood)
        grid, dct, state, n_new = fission(grid, dct, state, sel, cfg, pilot)
        rnd += 1
        history.append(dict(round=rnd, phase="fission", L=grid.L, op_count=state.op_count, fissions=n_new,
                            adjust_norm=float("nan"), iterations=used, nmse_db=nm))
        if n_new == 0:
            reasons["fission"] = "no_fission"
            break

    reasons["adjust"] = "max_rounds"
    for _ in range(ge.K_a):
        if used >= budget:
            reasons["adjust"] = "budget"
            break
        learn(min(ge.inner_iters_adjust, budget - used))
        norm = adjust_norm(state, hyper.epsilon)
        nm = nmse_db(dct, state)
        grid, dct, state, _ = adjust(grid, dct, state, cfg, pilot, hyper.epsilon)
        rnd += 1
        history.append(dict(round=rnd, phase="adjust", L=grid.L, op_count=state.op_count, fissions=0,
                            adjust_norm=norm, iterations=used, nmse_db=nm))
        if norm < ge.delta_a:
            reasons["adjust"] = "converged"
            break

    learn(max(hyper.K - used, 1))
    reasons["final"] = "converged" if state.converged else "max_iters"
    history.append(dict(round=rnd + 1, phase="final", L=grid.L, op_count=state.op_count, fissions=0,
                        adjust_norm=adjust_norm(state, hyper.epsilon), iterations=used,
                        nmse_db=nmse_db(dct, state)))
    return GeResult(grid, dct, state, history, reasons)
