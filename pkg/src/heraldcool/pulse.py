"""Rapid-adiabatic-passage pulse schedules.

A pulse is a linear frequency chirp centred on the target resonance together
with a squared-sine amplitude envelope. The drive phase is the running
integral of the detuning, so the detuning returned here is the instantaneous
frequency offset seen by the qubit in the frame of the laser.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

ENVELOPES = ("sin2", "square")
RABI_REFERENCES = ("carrier", "first_sideband")


@dataclass(frozen=True)
class RapPulse:
    """One RAP schedule.

    ``peak_rabi`` is interpreted according to ``rabi_reference``:

    * ``"carrier"`` -- the bare carrier Rabi frequency at the envelope peak;
      a ladder's coupling is ``peak_rabi * |<n+s|D|n>|``.
    * ``"first_sideband"`` -- the coupling of the lowest ladder of the target
      sideband (the n=0 <-> 1 transition); other ladders scale relative to it.

    ``envelope="square"`` is a constant-amplitude hook used for closed-form
    checks (resonant Rabi flopping, Landau-Zener).
    """

    duration: float
    chirp_range: float
    peak_rabi: float
    sideband_order: int = 0
    n_time_samples: int = 2001
    rabi_reference: str = "carrier"
    envelope: str = "sin2"

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError(f"duration must be > 0, got {self.duration}")
        if not self.peak_rabi >= 0:
            raise ValueError(f"peak_rabi must be >= 0, got {self.peak_rabi}")
        if not math.isfinite(self.chirp_range):
            raise ValueError("chirp_range must be finite")
        if self.sideband_order not in (-1, 0, 1):
            raise ValueError(f"sideband_order must be -1, 0 or +1, got {self.sideband_order}")
        if int(self.n_time_samples) != self.n_time_samples or self.n_time_samples < 2:
            raise ValueError(f"n_time_samples must be an integer >= 2, got {self.n_time_samples}")
        if self.rabi_reference not in RABI_REFERENCES:
            raise ValueError(f"rabi_reference must be one of {RABI_REFERENCES}")
        if self.envelope not in ENVELOPES:
            raise ValueError(f"envelope must be one of {ENVELOPES}")

    @property
    def chirp_rate(self):
        """d(detuning)/dt in Hz/s."""
        return self.chirp_range / self.duration

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


def _check_time(pulse, t):
    t = np.asarray(t, dtype=float)
    if np.any(t < 0) or np.any(t > pulse.duration):
        raise ValueError(f"t must lie in [0, {pulse.duration}]")
    return t


def detuning_at(pulse, t):
    """Instantaneous detuning (Hz): sweeps linearly from -chirp_range/2 to +chirp_range/2."""
    t = _check_time(pulse, t)
    out = pulse.chirp_rate * (t - pulse.duration / 2)
    return float(out) if out.ndim == 0 else out


def amplitude_at(pulse, t):
    """Envelope Rabi frequency (Hz): peak_rabi * sin^2(pi t / T)."""
    t = _check_time(pulse, t)
    if pulse.envelope == "square":
        out = np.full_like(t, pulse.peak_rabi)
    else:
        out = pulse.peak_rabi * np.sin(np.pi * t / pulse.duration) ** 2
    return float(out) if out.ndim == 0 else out


def adiabaticity_metric(pulse, coupling_scale=1.0):
    """Landau-Zener adiabaticity Omega_eff**2 / (d delta / dt) at the pulse centre.

    ``coupling_scale`` is the ladder's coupling relative to the pulse's
    reference coupling, so ``Omega_eff = peak_rabi * coupling_scale``. Both
    numerator and chirp rate are in ordinary-frequency units (Hz**2 and Hz/s);
    the Landau-Zener transfer probability for a constant amplitude is then
    ``1 - exp(-pi**2 * metric)``. Returns ``inf`` for an unchirped pulse.
    """
    if coupling_scale < 0:
        raise ValueError("coupling_scale must be >= 0")
    omega_eff = pulse.peak_rabi * coupling_scale
    if omega_eff == 0:
        return 0.0
    rate = abs(pulse.chirp_rate)
    if rate == 0:
        return math.inf
    return omega_eff**2 / rate
