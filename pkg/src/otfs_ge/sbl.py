"""Off-grid sparse Bayesian learning on a fixed delay-Doppler grid.

All updates operate on the pilot-normalised observation ``y / x_p`` so the
posterior mean estimates path gains directly and ``lam`` is the noise
precision of the normalised observation.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as sla

from .dictionary import Dictionary, Grid, composite

ALPHA_FLOOR = 1e-12
COND_LIMIT = 1e10


class IllConditionedError(np.linalg.LinAlgError):
    """Observation covariance could not be factorised."""

    def __init__(self, iteration: int, detail: str = ""):
        super().__init__(f"observation covariance ill-conditioned at iteration {iteration} {detail}".strip())
        self.iteration = iteration


@dataclass(frozen=True)
class SblHyperParams:
    a: float = 1e-4
    b: float = 1e-4
    rho: float = 1e-2
    delta: float = 1e-3
    K: int = 200
    epsilon: float = 6.0

    def __post_init__(self):
        if min(self.a, self.b, self.rho, self.delta, self.epsilon) <= 0 or self.K < 1:
            raise ValueError(f"invalid hyperparameters {self}")


@dataclass(frozen=True)
class _EStep:
    """Quantities from the last E-step needed to rebuild the covariance lazily."""

    phi: np.ndarray
    W: np.ndarray  # Sigma_y^{-1} Phi
    alpha: np.ndarray
    lam: float


@dataclass(frozen=True)
class PosteriorState:
    mu: np.ndarray
    alpha: np.ndarray
    lam: float
    kappa: np.ndarray
    iota: np.ndarray
    sigma_diag: np.ndarray
    gamma: np.ndarray  # 1 - Sigma_ii / alpha_i at the E-step
    iters_used: int = 0
    converged: bool = False
    op_count: int = 0
    estep: _EStep | None = field(default=None, repr=False)

    @property
    def L(self) -> int:
        return len(self.mu)

    @property
    def sigma(self) -> np.ndarray:
        """Full posterior covariance in the diagonal-property form.

        ``diag(alpha) - (alpha * (alpha * C)^T)^T`` with ``C = Phi^H Sigma_y^{-1} Phi``.
        """
        e = self.estep
        C = e.phi.conj().T @ e.W
        return np.diag(e.alpha).astype(complex) - (e.alpha[:, None] * (e.alpha[:, None] * C).T).T

    def sigma_cols(self, idx) -> np.ndarray:
        e = self.estep
        idx = np.asarray(idx, int)
        C = e.phi.conj().T @ e.W[:, idx]
        out = -(e.alpha[:, None] * C) * e.alpha[idx][None, :]
        out[idx, np.arange(len(idx))] += e.alpha[idx]
        return out

    def phi(self) -> np.ndarray:
        return self.estep.phi


def _norm_obs(y, x_p) -> np.ndarray:
    return np.asarray(y, complex) / x_p


def significance_threshold(state: PosteriorState, epsilon: float) -> float:
    return epsilon * np.sqrt(1.0 / state.lam)


def significant(state: PosteriorState, epsilon: float) -> np.ndarray:
    return np.flatnonzero(np.abs(state.mu) > significance_threshold(state, epsilon))


def e_step(d: Dictionary, grid: Grid, state: PosteriorState, y, x_p, count: bool = True,
           iteration: int = 0) -> PosteriorState:
    """Posterior mean and covariance of the gains for the current hyperparameters."""
    yn = _norm_obs(y, x_p)
    phi = composite(d, state.kappa, state.iota)
    alpha = state.alpha
    n = phi.shape[0]
    sigma_y = (phi * alpha) @ phi.conj().T + np.eye(n) / state.lam
    try:
        cf = sla.cho_factor(sigma_y, lower=True, check_finite=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise IllConditionedError(iteration, str(exc)) from exc
    W = sla.cho_solve(cf, phi)
    c_diag = np.einsum("ij,ij->j", phi.conj(), W).real
    sigma_diag = alpha - alpha * alpha * c_diag
    mu = alpha * (W.conj().T @ yn)
    if not np.all(np.isfinite(mu)):
        raise IllConditionedError(iteration, "(non-finite posterior mean)")
    ops = d.L * d.L * n if count else 0
    return replace(
        state, mu=mu, sigma_diag=sigma_diag, gamma=alpha * c_diag,
        op_count=state.op_count + ops, estep=_EStep(phi, W, alpha, state.lam),
    )


def init_posterior(d: Dictionary, grid: Grid, y, x_p, hyper: SblHyperParams,
                   alpha: np.ndarray | None = None, kappa=None, iota=None) -> PosteriorState:
    """Unit prior variances, ``lam = 100 / var(y/x_p)``, zero offsets, then one E-step."""
    L = d.L
    yn = _norm_obs(y, x_p)
    var = float(np.var(yn))
    lam = 100.0 / max(var, 1e-10)
    z = np.zeros(L)
    st = PosteriorState(
        mu=np.zeros(L, complex),
        alpha=np.ones(L) if alpha is None else np.asarray(alpha, float).copy(),
        lam=lam,
        kappa=z.copy() if kappa is None else np.asarray(kappa, float).copy(),
        iota=z.copy() if iota is None else np.asarray(iota, float).copy(),
        sigma_diag=np.ones(L), gamma=z.copy(),
    )
    return e_step(d, grid, st, y, x_p, count=False)


def m_step_alpha(state: PosteriorState, hyper: SblHyperParams) -> PosteriorState:
    rho = hyper.rho
    s = state.sigma_diag + np.abs(state.mu) ** 2
    # (sqrt(1 + 4 rho s) - 1) / (2 rho), rationalised to avoid cancellation at small rho
    alpha = 2.0 * s / (np.sqrt(1.0 + 4.0 * rho * s) + 1.0)
    return replace(state, alpha=np.maximum(alpha, ALPHA_FLOOR))


def residual_energy(state: PosteriorState, y, x_p) -> float:
    r = _norm_obs(y, x_p) - state.estep.phi @ state.mu
    return float(np.vdot(r, r).real)


def m_step_lambda(state: PosteriorState, y, x_p, n_obs: int, hyper: SblHyperParams) -> PosteriorState:
    """Gamma-prior noise-precision update from the last E-step."""
    dy = np.sum(state.gamma) / state.estep.lam + residual_energy(state, y, x_p)
    lam = (2 * hyper.a - 2 + n_obs) / (2 * hyper.b + dy)
    if not lam > 0:
        raise ValueError("noise precision update became non-positive")
    return replace(state, lam=float(lam))


def offset_bounds(grid: Grid, k_max: float, l_max: float):
    """Per-point admissible offset intervals (uniform-prior supports, kept in the CE region)."""
    k_lo = np.maximum(-grid.r_nu_minus / 2, -k_max - grid.k)
    k_hi = np.minimum(grid.r_nu_plus / 2, k_max - grid.k)
    l_lo = np.maximum(-grid.r_tau_minus / 2, -grid.l)
    l_hi = np.minimum(grid.r_tau_plus / 2, l_max - grid.l)
    return k_lo, k_hi, l_lo, l_hi


def _solve_offsets(B, A_rest, mu, yn, sig_cols, sig_TT, T):
    """Least-squares offsets for columns ``T`` of derivative matrix ``B``."""
    BT = B[:, T]
    muT = mu[T]
    P = np.real(np.conj(BT.conj().T @ BT) * (np.outer(muT, muT.conj()) + sig_TT))
    r = yn - A_rest @ mu
    v = np.real(muT.conj() * (BT.conj().T @ r))
    v -= np.real(np.einsum("ij,ij->j", BT.conj(), A_rest @ sig_cols))
    if np.linalg.cond(P) > COND_LIMIT:
        dP = np.diag(P)
        return np.where(dP > 0, v / np.where(dP > 0, dP, 1.0), 0.0)
    return np.linalg.solve(P, v)


def m_step_offgrid(state: PosteriorState, d: Dictionary, grid: Grid, y, x_p, hyper: SblHyperParams,
                   k_max: float, l_max: float) -> PosteriorState:
    """Update Doppler then delay offsets on the active set, clamped to each point's support."""
    yn = _norm_obs(y, x_p)
    T = significant(state, hyper.epsilon)
    if T.size == 0:
        T = np.array([int(np.argmax(np.abs(state.mu)))])
    mu = state.mu
    sig_cols = state.sigma_cols(T)
    sig_TT = sig_cols[T]
    k_lo, k_hi, l_lo, l_hi = offset_bounds(grid, k_max, l_max)

    kappa = state.kappa.copy()
    iota = state.iota.copy()
    kappa[T] = 0.0
    A_rest = composite(d, kappa, iota)
    kappa[T] = np.clip(_solve_offsets(d.phi_nu, A_rest, mu, yn, sig_cols, sig_TT, T), k_lo[T], k_hi[T])

    iota[T] = 0.0
    A_rest = composite(d, kappa, iota)
    iota[T] = np.clip(_solve_offsets(d.phi_tau, A_rest, mu, yn, sig_cols, sig_TT, T), l_lo[T], l_hi[T])
    return replace(state, kappa=kappa, iota=iota)


def run_learning(d: Dictionary, grid: Grid, y, x_p, hyper: SblHyperParams, init: PosteriorState,
                 max_iters: int | None = None, *, k_max: float, l_max: float, offgrid: bool = True,
                 callback=None, first_iteration: int = 0) -> PosteriorState:
    """Iterate E-step, alpha, lambda and offset updates until the alpha change falls below ``delta``.

    ``callback(iteration, state)`` is called after every iteration.
    """
    max_iters = hyper.K if max_iters is None else max_iters
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    n_obs = d.phi_I.shape[0]
    st = replace(init, iters_used=0, converged=False)
    for it in range(1, max_iters + 1):
        st = e_step(d, grid, st, y, x_p, iteration=first_iteration + it)
        old = st.alpha
        st = m_step_alpha(st, hyper)
        st = m_step_lambda(st, y, x_p, n_obs, hyper)
        if offgrid:
            st = m_step_offgrid(st, d, grid, y, x_p, hyper, k_max, l_max)
        change = np.linalg.norm(st.alpha - old) / np.linalg.norm(old)
        st = replace(st, iters_used=it)
        if callback is not None:
            callback(first_iteration + it, st)
        if change < hyper.delta:
            return replace(st, converged=True)
    return st


def reconstruct(d: Dictionary, state: PosteriorState) -> np.ndarray:
    """Estimated effective channel ``Phi(S, kappa, iota) mu``."""
    return composite(d, state.kappa, state.iota) @ state.mu
