"""Fock-space bookkeeping for a single harmonic mode coupled to a qubit.

Thermal occupation statistics, the truncation policy used everywhere in the
package, and the motional-state dependent Rabi frequencies of the
carrier/sideband transitions.

All frequencies are ordinary frequencies in Hz.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

# physical constants (CODATA 2018)
HBAR = 1.054571817e-34
ATOMIC_MASS_UNIT = 1.66053906660e-27
CA40_MASS = 39.962590863 * ATOMIC_MASS_UNIT

DEFAULT_TRAP_FREQUENCY = 1.06e6
DEFAULT_WAVELENGTH = 729e-9
DEFAULT_OMEGA0 = 83e3
DEFAULT_TAIL_TOL = 1e-6


def lamb_dicke_parameter(trap_frequency=DEFAULT_TRAP_FREQUENCY,
                         wavelength=DEFAULT_WAVELENGTH,
                         mass=CA40_MASS, projection=1.0):
    """Lamb-Dicke parameter for a beam with wavevector projection `projection` on the mode.

    eta = k cos(theta) sqrt(hbar / (2 m omega_trap)).
    """
    k = 2 * math.pi / wavelength
    x0 = math.sqrt(HBAR / (2 * mass * 2 * math.pi * trap_frequency))
    return k * projection * x0


# axial 729 nm beam on 40Ca+ at 1.06 MHz -> 0.0941
DEFAULT_LAMB_DICKE = round(lamb_dicke_parameter(), 3)


@dataclass(frozen=True)
class ModeConfig:
    """Oscillator/qubit parameters.

    Attributes
    ----------
    trap_frequency : float
        Mode frequency in Hz.
    lamb_dicke : float
        Lamb-Dicke parameter, 0 < eta < 1.
    n_max : int
        Highest Fock state kept.
    omega0 : float
        Bare carrier Rabi frequency in Hz.
    """

    trap_frequency: float = DEFAULT_TRAP_FREQUENCY
    lamb_dicke: float = DEFAULT_LAMB_DICKE
    n_max: int = 255
    omega0: float = DEFAULT_OMEGA0

    def __post_init__(self):
        if not self.trap_frequency > 0:
            raise ValueError(f"trap_frequency must be > 0, got {self.trap_frequency}")
        if not 0 < self.lamb_dicke < 1:
            raise ValueError(f"lamb_dicke must lie in (0, 1), got {self.lamb_dicke}")
        if int(self.n_max) != self.n_max or self.n_max < 1:
            raise ValueError(f"n_max must be an integer >= 1, got {self.n_max}")
        if not self.omega0 > 0:
            raise ValueError(f"omega0 must be > 0, got {self.omega0}")
        object.__setattr__(self, "n_max", int(self.n_max))


def thermal_pn(nbar, n):
    """Occupation probability of Fock state `n` in a thermal state of mean `nbar`."""
    if nbar < 0 or n < 0:
        raise ValueError(f"nbar and n must be nonnegative, got nbar={nbar}, n={n}")
    if nbar == 0:
        return 1.0 if n == 0 else 0.0
    # ratio form: no overflow of nbar**n, and exactly 1/(nbar+1) at n=0
    return (nbar / (nbar + 1.0)) ** n / (nbar + 1.0)


def thermal_probabilities(nbar, n_max):
    """Thermal p_n for n = 0..n_max with the tail beyond n_max folded into the last bin."""
    if nbar < 0:
        raise ValueError(f"nbar must be nonnegative, got {nbar}")
    n = np.arange(n_max + 1)
    if nbar == 0:
        p = np.zeros(n_max + 1)
        p[0] = 1.0
        return p
    ratio = nbar / (nbar + 1.0)
    p = np.exp(n * math.log(ratio)) / (nbar + 1.0)
    # exact tail mass sum_{n > n_max} p_n = ratio**(n_max+1)
    p[-1] += ratio ** (n_max + 1)
    return p / p.sum()


@dataclass(frozen=True)
class ThermalDistribution:
    """Truncated thermal occupation over n = 0..n_max, tail folded into n_max."""

    nbar: float
    probabilities: np.ndarray

    @classmethod
    def create(cls, nbar, n_max=None, tail_tol=DEFAULT_TAIL_TOL):
        if n_max is None:
            n_max = max(truncation_for(nbar, tail_tol), 1)
        p = thermal_probabilities(nbar, n_max)
        p.setflags(write=False)
        return cls(float(nbar), p)

    @property
    def n_max(self):
        return len(self.probabilities) - 1

    @property
    def p0(self):
        return float(self.probabilities[0])


def truncation_for(nbar, tail_tol=DEFAULT_TAIL_TOL):
    """Smallest n_max whose thermal tail mass beyond n_max is below `tail_tol`."""
    if nbar < 0:
        raise ValueError(f"nbar must be nonnegative, got {nbar}")
    if not 0 < tail_tol < 1:
        raise ValueError(f"tail_tol must lie in (0, 1), got {tail_tol}")
    if nbar == 0:
        return 0
    log_ratio = math.log(nbar / (nbar + 1.0))
    k = max(int(math.ceil(math.log(tail_tol) / log_ratio)) - 1, 0)
    # guard the float rounding in the closed form
    while k > 0 and math.exp((k) * log_ratio) < tail_tol:
        k -= 1
    while math.exp((k + 1) * log_ratio) >= tail_tol:
        k += 1
    return k


def laguerre_table(n_max, alpha, x):
    """Generalized Laguerre L_k^alpha(x) for k = 0..n_max by upward recurrence."""
    out = np.empty(n_max + 1)
    out[0] = 1.0
    if n_max >= 1:
        out[1] = 1.0 + alpha - x
    for k in range(1, n_max):
        out[k + 1] = ((2 * k + 1 + alpha - x) * out[k] - (k + alpha) * out[k - 1]) / (k + 1)
    return out


def displacement_elements(n_max, s, eta):
    """Complex <n+s| exp(i eta (a + a^dag)) |n> for n = 0..n_max.

    Entries with n + s < 0 are zero. The matrix element is symmetric under
    exchange of n and n+s.
    """
    a = abs(s)
    n = np.arange(n_max + 1)
    lower = n + min(s, 0)
    out = np.zeros(n_max + 1, dtype=complex)
    valid = lower >= 0
    if not valid.any():
        return out
    lo = lower[valid]
    lag = laguerre_table(int(lo.max()), a, eta * eta)[lo]
    norm = np.exp(0.5 * (gammaln(lo + 1) - gammaln(lo + a + 1)))
    out[valid] = math.exp(-eta * eta / 2) * (1j * eta) ** a * norm * lag
    return out


def coupling_array(n_max, s, cfg):
    """Rabi frequencies (Hz) of |n> -> |n+s> for every n = 0..n_max."""
    return cfg.omega0 * np.abs(displacement_elements(n_max, s, cfg.lamb_dicke))


def coupling(n, s, cfg):
    """Rabi frequency (Hz) of the transition |g,n> <-> |e,n+s>.

    Exact for any eta (generalized-Laguerre form). Returns 0 when n + s < 0.
    """
    if n < 0:
        raise ValueError(f"n must be nonnegative, got {n}")
    if not -2 <= s <= 2:
        raise ValueError(f"sideband order must lie in -2..2, got {s}")
    if n + s < 0:
        return 0.0
    return float(coupling_array(n, s, cfg)[n])
