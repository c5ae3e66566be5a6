"""Delay-Doppler grids and the measurement matrices built on them.

A grid is a set of (Doppler, delay) tap positions, each carrying the
distance to its neighbours in the four axis directions. The dictionary holds
one column per grid point for the on-grid response and for its partial
derivatives in Doppler and in delay.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .channel import delay_offsets, doppler_offsets
from .core import ConfigError, OtfsConfig, PilotConfig, kernel_F, kernel_F_deriv

DUP_TOL = 1e-9


@dataclass(frozen=True)
class GridPoint:
    k: float
    l: float
    r_nu_minus: float
    r_nu_plus: float
    r_tau_minus: float
    r_tau_plus: float
    generation: int = 0


_FIELDS = ("k", "l", "r_nu_minus", "r_nu_plus", "r_tau_minus", "r_tau_plus", "generation")


@dataclass(frozen=True)
class Grid:
    """Struct-of-arrays view of the grid; ``points`` gives the per-point records."""

    k: np.ndarray
    l: np.ndarray
    r_nu_minus: np.ndarray
    r_nu_plus: np.ndarray
    r_tau_minus: np.ndarray
    r_tau_plus: np.ndarray
    generation: np.ndarray
    r_min: float = 0.25
    evolved: bool = False

    def __post_init__(self):
        if len(self.k) < 1:
            raise ValueError("a grid needs at least one point")

    def __len__(self) -> int:
        return len(self.k)

    @property
    def L(self) -> int:
        return len(self.k)

    @property
    def points(self) -> list[GridPoint]:
        return [GridPoint(*(float(getattr(self, f)[i]) for f in _FIELDS[:-1]), int(self.generation[i]))
                for i in range(self.L)]

    @classmethod
    def from_points(cls, points, r_min: float = 0.25, evolved: bool = False) -> "Grid":
        cols = {f: np.array([getattr(p, f) for p in points], dtype=int if f == "generation" else float)
                for f in _FIELDS}
        return cls(**cols, r_min=r_min, evolved=evolved)

    def with_arrays(self, **arrays) -> "Grid":
        return replace(self, **arrays)

    def coords(self) -> np.ndarray:
        return np.column_stack([self.k, self.l])

    def find(self, k: float, l: float) -> int | None:
        hit = np.flatnonzero((np.abs(self.k - k) < DUP_TOL) & (np.abs(self.l - l) < DUP_TOL))
        return int(hit[0]) if hit.size else None

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(_FIELDS)
            for p in self.points:
                w.writerow([repr(getattr(p, f)) for f in _FIELDS])

    @classmethod
    def from_csv(cls, path, r_min: float = 0.25) -> "Grid":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        pts = [GridPoint(*(float(r[f]) for f in _FIELDS[:-1]), int(r["generation"])) for r in rows]
        return cls.from_points(pts, r_min=r_min, evolved=True)


@dataclass(frozen=True)
class Dictionary:
    phi_I: np.ndarray = field(repr=False)
    phi_nu: np.ndarray = field(repr=False)
    phi_tau: np.ndarray = field(repr=False)
    grid: Grid = field(repr=False)

    @property
    def L(self) -> int:
        return self.phi_I.shape[1]


def _steps(extent: float, r: float) -> int:
    n = extent / r
    if r <= 0 or abs(n - round(n)) > 1e-9:
        raise ConfigError(f"resolution {r} does not divide extent {extent}")
    return int(round(n))


def make_uniform_grid(cfg: OtfsConfig, r_nu: float, r_tau: float | None = None, r_min: float = 0.25) -> Grid:
    """Uniform grid over ``[-k_max, k_max] x [0, l_max]``.

    Points are ordered Doppler-fastest, matching the column-major observation.
    """
    r_tau = r_nu if r_tau is None else r_tau
    n_nu = _steps(2 * cfg.k_max, r_nu)
    n_tau = _steps(cfg.l_max, r_tau)
    ks = np.linspace(-cfg.k_max, cfg.k_max, n_nu + 1)
    ls = np.linspace(0.0, cfg.l_max, n_tau + 1)
    K, Lg = np.meshgrid(ks, ls, indexing="ij")
    n = K.size
    full = lambda v: np.full(n, float(v))
    return Grid(
        K.reshape(-1, order="F"), Lg.reshape(-1, order="F"),
        full(r_nu), full(r_nu), full(r_tau), full(r_tau), np.zeros(n, int),
        r_min=r_min,
    )


def _columns(cfg: OtfsConfig, k: np.ndarray, l: np.ndarray):
    """Return (phi_I, phi_nu, phi_tau) columns for grid coordinates ``k``, ``l``."""
    k = np.asarray(k, float)
    l = np.asarray(l, float)
    dk = doppler_offsets(cfg)[:, None]
    dl = delay_offsets(cfg)[:, None]
    w_nu = kernel_F(dk, 0.0, k[None, :], cfg.N)
    w_tau_c = np.conj(kernel_F(dl, 0.0, l[None, :], cfg.M))
    dw_nu = kernel_F_deriv(dk, 0.0, k[None, :], cfg.N)
    dw_tau_c = np.conj(kernel_F_deriv(dl, 0.0, l[None, :], cfg.M))
    NM = cfg.N * cfg.M
    psi = np.exp(-2j * np.pi * k * l / NM)

    def vec(a, b):
        # (N_T, L) x (M_T, L) -> (N_T*M_T, L), Doppler index fastest
        return (b[:, None, :] * a[None, :, :]).reshape(-1, len(k))

    base = vec(w_nu, w_tau_c)
    phi_I = psi * base
    # product rule includes the phase term so columns are exact derivatives
    phi_nu = psi * (vec(dw_nu, w_tau_c) + (-2j * np.pi * l / NM) * base)
    phi_tau = psi * (vec(w_nu, dw_tau_c) + (-2j * np.pi * k / NM) * base)
    return phi_I, phi_nu, phi_tau


def exact_columns(cfg: OtfsConfig, k, l) -> np.ndarray:
    """On-grid response columns at arbitrary coordinates (no Taylor term)."""
    return _columns(cfg, np.atleast_1d(k), np.atleast_1d(l))[0]


def assemble(cfg: OtfsConfig, pilot: PilotConfig | None, grid: Grid) -> Dictionary:
    phi_I, phi_nu, phi_tau = _columns(cfg, grid.k, grid.l)
    return Dictionary(phi_I, phi_nu, phi_tau, grid)


def composite(d: Dictionary, kappa, iota) -> np.ndarray:
    """First-order off-grid measurement matrix ``Phi_I + Phi_nu diag(kappa) + Phi_tau diag(iota)``."""
    kappa = np.asarray(kappa, float)
    iota = np.asarray(iota, float)
    if kappa.shape != (d.L,) or iota.shape != (d.L,):
        raise ValueError(f"offset vectors must have length {d.L}")
    return d.phi_I + d.phi_nu * kappa + d.phi_tau * iota


def append_points(grid: Grid, d: Dictionary, new_points, cfg: OtfsConfig, pilot: PilotConfig | None = None):
    """Append points and their columns; returns ``(grid, dict, n_dropped)``.

    Candidates within ``DUP_TOL`` of an existing or earlier candidate point in
    both coordinates are dropped.
    """
    new_points = list(new_points)
    keep = []
    ck, cl = grid.k, grid.l
    for p in new_points:
        dup = np.any((np.abs(ck - p.k) < DUP_TOL) & (np.abs(cl - p.l) < DUP_TOL))
        dup = dup or any(abs(q.k - p.k) < DUP_TOL and abs(q.l - p.l) < DUP_TOL for q in keep)
        if not dup:
            keep.append(p)
    dropped = len(new_points) - len(keep)
    if not keep:
        return grid, d, dropped
    add = {f: np.array([getattr(p, f) for p in keep], dtype=int if f == "generation" else float) for f in _FIELDS}
    new_grid = grid.with_arrays(
        **{f: np.concatenate([getattr(grid, f), add[f]]) for f in _FIELDS}, evolved=True
    )
    cI, cnu, ctau = _columns(cfg, add["k"], add["l"])
    new_d = Dictionary(
        np.hstack([d.phi_I, cI]), np.hstack([d.phi_nu, cnu]), np.hstack([d.phi_tau, ctau]), new_grid
    )
    return new_grid, new_d, dropped


def move_points(grid: Grid, indices, kappa, iota, cfg: OtfsConfig, pilot: PilotConfig | None, d: Dictionary):
    """Shift selected points by their off-grid offsets and rebuild their columns.

    ``kappa``/``iota`` are full-length offset vectors (only ``indices`` are
    used). Coordinates are clamped into the CE region. Returns
    ``(grid, dict, n_clamped)``; a move that would land on another point is skipped.
    """
    idx = np.asarray(indices, int)
    if idx.size == 0:
        return grid, d, 0
    kappa = np.asarray(kappa, float)
    iota = np.asarray(iota, float)
    k_new = grid.k.copy()
    l_new = grid.l.copy()
    tk = k_new[idx] + kappa[idx]
    tl = l_new[idx] + iota[idx]
    ck = np.clip(tk, -cfg.k_max, cfg.k_max)
    cl = np.clip(tl, 0.0, cfg.l_max)
    n_clamped = int(np.count_nonzero((ck != tk) | (cl != tl)))
    moved = []
    for j, i in enumerate(idx):
        if ck[j] == k_new[i] and cl[j] == l_new[i]:
            continue
        clash = (np.abs(k_new - ck[j]) < DUP_TOL) & (np.abs(l_new - cl[j]) < DUP_TOL)
        clash[i] = False
        if clash.any():
            continue
        k_new[i], l_new[i] = ck[j], cl[j]
        moved.append(i)
    if not moved:
        return grid, d, n_clamped
    moved = np.array(moved)
    new_grid = grid.with_arrays(k=k_new, l=l_new)
    cI, cnu, ctau = _columns(cfg, k_new[moved], l_new[moved])
    phi_I, phi_nu, phi_tau = d.phi_I.copy(), d.phi_nu.copy(), d.phi_tau.copy()
    phi_I[:, moved], phi_nu[:, moved], phi_tau[:, moved] = cI, cnu, ctau
    return new_grid, Dictionary(phi_I, phi_nu, phi_tau, new_grid), n_clamped
