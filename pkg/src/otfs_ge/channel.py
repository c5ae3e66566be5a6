"""Random doubly fractional channels and the pilot-region observation."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .core import OtfsConfig, PilotConfig, kernel_F


@dataclass(frozen=True)
class DDPath:
    h: complex
    k_nu: float
    l_tau: float


@dataclass(frozen=True)
class ChannelRealization:
    paths: tuple[DDPath, ...]
    variances: tuple[float, ...] = ()

    @property
    def P(self) -> int:
        return len(self.paths)

    @property
    def gains(self) -> np.ndarray:
        return np.array([p.h for p in self.paths], dtype=complex)

    @property
    def k_nu(self) -> np.ndarray:
        return np.array([p.k_nu for p in self.paths], dtype=float)

    @property
    def l_tau(self) -> np.ndarray:
        return np.array([p.l_tau for p in self.paths], dtype=float)

    def scaled(self, a: complex) -> "ChannelRealization":
        return ChannelRealization(tuple(DDPath(a * p.h, p.k_nu, p.l_tau) for p in self.paths), self.variances)

    @classmethod
    def from_arrays(cls, h, k_nu, l_tau) -> "ChannelRealization":
        return cls(tuple(DDPath(complex(a), float(b), float(c)) for a, b, c in zip(h, k_nu, l_tau)))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["h_re", "h_im", "k_nu", "l_tau"])
            for p in self.paths:
                w.writerow([repr(p.h.real), repr(p.h.imag), repr(p.k_nu), repr(p.l_tau)])

    @classmethod
    def from_csv(cls, path) -> "ChannelRealization":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls.from_arrays(
            [float(r["h_re"]) + 1j * float(r["h_im"]) for r in rows],
            [float(r["k_nu"]) for r in rows],
            [float(r["l_tau"]) for r in rows],
        )


@dataclass(frozen=True)
class Observation:
    Y: np.ndarray = field(repr=False)
    snr_db: float
    noise_var: float
    seed: object = None

    @property
    def y(self) -> np.ndarray:
        """Column-major vectorisation of ``Y`` (Doppler index fastest)."""
        return self.Y.reshape(-1, order="F")


def path_variances(l_tau) -> np.ndarray:
    """Exponential power-delay profile normalised over the drawn delays."""
    w = np.exp(-0.1 * np.asarray(l_tau, float))
    return w / w.sum()


def sample_channel(
    cfg: OtfsConfig, P: int, rng_seed, min_separation: float | None = None
) -> ChannelRealization:
    """Draw ``P`` paths with continuous delay/Doppler taps.

    ``min_separation`` (in taps, Chebyshev distance) enables rejection
    sampling of path positions for ablations; by default paths may collide.
    """
    if P < 0:
        raise ValueError("P must be non-negative")
    rng = np.random.default_rng(rng_seed)
    l_tau = rng.uniform(0.0, cfg.l_max, P)
    k_nu = rng.uniform(-cfg.k_max, cfg.k_max, P)
    if min_separation:
        for i in range(P):
            for _ in range(10_000):
                d = np.maximum(np.abs(k_nu[:i] - k_nu[i]), np.abs(l_tau[:i] - l_tau[i]))
                if np.all(d >= min_separation):
                    break
                l_tau[i] = rng.uniform(0.0, cfg.l_max)
                k_nu[i] = rng.uniform(-cfg.k_max, cfg.k_max)
            else:
                raise ValueError("could not place paths with the requested separation")
    var = path_variances(l_tau) if P else np.zeros(0)
    h = np.sqrt(var / 2) * (rng.standard_normal(P) + 1j * rng.standard_normal(P))
    paths = tuple(DDPath(complex(a), float(b), float(c)) for a, b, c in zip(h, k_nu, l_tau))
    return ChannelRealization(paths, tuple(float(v) for v in var))


def doppler_offsets(cfg: OtfsConfig) -> np.ndarray:
    return np.arange(-cfg.k_max, cfg.k_max + 1, dtype=float)


def delay_offsets(cfg: OtfsConfig) -> np.ndarray:
    return np.arange(0, cfg.l_max + 1, dtype=float)


def effective_channel_matrix(cfg: OtfsConfig, chan: ChannelRealization) -> np.ndarray:
    """Noiseless ``Y / x_p`` as an ``N_T x M_T`` matrix."""
    if chan.P == 0:
        return np.zeros((cfg.N_T, cfg.M_T), complex)
    k, l = chan.k_nu, chan.l_tau
    h_t = chan.gains * np.exp(-2j * np.pi * k * l / (cfg.N * cfg.M))
    # kernel arguments are offsets from the pilot, so k_p/l_p drop out
    w_nu = kernel_F(doppler_offsets(cfg)[:, None], 0.0, k[None, :], cfg.N)
    w_tau = kernel_F(delay_offsets(cfg)[:, None], 0.0, l[None, :], cfg.M)
    return np.einsum("p,kp,lp->kl", h_t, w_nu, np.conj(w_tau))


def effective_channel(cfg: OtfsConfig, pilot: PilotConfig, chan: ChannelRealization) -> np.ndarray:
    """Ground-truth effective channel on the CE region, vectorised column-major."""
    return effective_channel_matrix(cfg, chan).reshape(-1, order="F")


def noise_variance(pilot: PilotConfig, snr_db: float) -> float:
    return pilot.data_power * 10.0 ** (-snr_db / 10.0)


def synthesize_observation(
    cfg: OtfsConfig, pilot: PilotConfig, chan: ChannelRealization, snr_db: float, rng_seed
) -> Observation:
    """Received pilot region ``x_p * H + z`` with complex AWGN at data-referenced SNR.

    ``snr_db = inf`` gives a noiseless observation.
    """
    Y = pilot.x_p * effective_channel_matrix(cfg, chan)
    nv = 0.0 if np.isinf(snr_db) else noise_variance(pilot, snr_db)
    if nv > 0:
        rng = np.random.default_rng(rng_seed)
        z = rng.standard_normal((2,) + Y.shape)
        Y = Y + np.sqrt(nv / 2) * (z[0] + 1j * z[1])
    return Observation(Y, float(snr_db), nv, rng_seed)
