"""Frame configuration and the sampled Dirichlet kernel used by every estimator."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

SPEED_OF_LIGHT = 2.99792458e8

# below this |sin(pi*x/Q)| the closed form is replaced by the geometric sum
_SINGULAR_TOL = 1e-9


class ConfigError(ValueError):
    """Raised for frame or estimator settings that cannot be realised."""


@dataclass(frozen=True)
class OtfsConfig:
    N: int
    M: int
    delta_f: float
    fc: float
    v_max: float
    tau_max: float
    k_max: int
    l_max: int
    N_T: int
    M_T: int

    @property
    def T(self) -> float:
        return 1.0 / self.delta_f

    @property
    def region_size(self) -> int:
        return self.N_T * self.M_T

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "OtfsConfig":
        cfg = derive_config(
            int(d["N"]), int(d["M"]), float(d["delta_f"]), float(d["fc"]),
            float(d["v_max"]), float(d["tau_max"]),
        )
        for key in ("k_max", "l_max", "N_T", "M_T"):
            if key in d and int(d[key]) != getattr(cfg, key):
                raise ConfigError(f"{key}={d[key]} inconsistent with derived value {getattr(cfg, key)}")
        return cfg


@dataclass(frozen=True)
class PilotConfig:
    k_p: int = 0
    l_p: int = 0
    pilot_gain_db: float = 30.0
    data_power: float = 1.0

    @property
    def power(self) -> float:
        return self.data_power * 10.0 ** (self.pilot_gain_db / 10.0)

    @property
    def x_p(self) -> complex:
        return complex(math.sqrt(self.power))


def derive_config(N: int, M: int, delta_f: float, fc: float, v_max: float, tau_max: float) -> OtfsConfig:
    """Build an :class:`OtfsConfig` from physical frame parameters.

    ``v_max`` is in m/s and ``tau_max`` in seconds. The integer Doppler and
    delay bounds are the ceilings of ``nu_max * N * T`` and ``tau_max * M * delta_f``.
    """
    if N < 1 or M < 1:
        raise ConfigError("N and M must be positive")
    if delta_f <= 0 or fc <= 0:
        raise ConfigError("delta_f and fc must be positive")
    if v_max <= 0 or tau_max <= 0:
        raise ConfigError("v_max and tau_max must be positive (empty CE region otherwise)")
    nu_max = v_max * fc / SPEED_OF_LIGHT
    # guard against 3.0000000001 -> 4 from float noise
    k_max = math.ceil(round(nu_max * N / delta_f, 9))
    l_max = math.ceil(round(tau_max * M * delta_f, 9))
    if k_max < 1 or l_max < 1:
        raise ConfigError(f"degenerate CE region (k_max={k_max}, l_max={l_max})")
    N_T, M_T = 2 * k_max + 1, l_max + 1
    if N_T > N or M_T > M:
        raise ConfigError(f"CE region {N_T}x{M_T} exceeds the {N}x{M} frame")
    return OtfsConfig(N, M, float(delta_f), float(fc), float(v_max), float(tau_max), k_max, l_max, N_T, M_T)


def table1_config() -> OtfsConfig:
    """N = M = 32, 4 GHz carrier, 15 kHz spacing, 500 km/h, 8.3 us."""
    return derive_config(32, 32, 15e3, 4e9, 500 / 3.6, 8.3e-6)


def _reduce(x, Q):
    # the geometric-sum form is Q-periodic, the closed form is not numerically
    return x - Q * np.round(x / Q)


def _geometric_sum(x, Q, deriv=False):
    q = np.arange(Q)
    ph = np.exp(-2j * np.pi * np.multiply.outer(x, q) / Q)
    if deriv:
        ph = ph * (-2j * np.pi * q / Q)
    return ph.sum(axis=-1) / Q


def kernel_F(eta, xi, gamma, Q: int):
    """Sampled Dirichlet kernel ``F(eta, xi, gamma)`` with period ``Q``.

    Accepts scalars or broadcastable arrays; returns a complex scalar or array.
    """
    x = _reduce(np.asarray(eta, float) - xi - gamma, Q)
    s_q = np.sin(np.pi * x / Q)
    small = np.abs(s_q) < _SINGULAR_TOL
    safe = np.where(small, 1.0, s_q)
    out = np.exp(-1j * (Q - 1) * np.pi * x / Q) * np.sin(np.pi * x) / safe / Q
    if np.any(small):
        out = np.where(small, _geometric_sum(np.where(small, x, 0.0), Q), out)
    return out[()] if out.ndim == 0 else out


def kernel_F_deriv(eta, xi, gamma, Q: int):
    """Derivative of :func:`kernel_F` with respect to ``gamma``."""
    x = _reduce(np.asarray(eta, float) - xi - gamma, Q)
    a = np.pi * x / Q
    s, t = np.sin(np.pi * x), np.sin(a)
    small = np.abs(t) < _SINGULAR_TOL
    t = np.where(small, 1.0, t)
    phase = np.exp(-1j * (Q - 1) * a)
    ratio = s / t
    d_ratio = (np.pi * np.cos(np.pi * x) * t - s * (np.pi / Q) * np.cos(a)) / (t * t)
    dfdx = phase * (-1j * (Q - 1) * np.pi / Q * ratio + d_ratio) / Q
    if np.any(small):
        dfdx = np.where(small, _geometric_sum(np.where(small, x, 0.0), Q, deriv=True), dfdx)
    out = -dfdx
    return out[()] if out.ndim == 0 else out
