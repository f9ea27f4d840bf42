import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import quad

from heraldcool.pulse import RapPulse, adiabaticity_metric, amplitude_at, detuning_at

CARRIER = RapPulse(35e-6, 200e3, 83e3)
SIDEBAND = RapPulse(250e-6, 40e3, 5.8e3, sideband_order=1)


def test_detuning_examples():
    assert detuning_at(SIDEBAND, 125e-6) == pytest.approx(0.0, abs=1e-9)
    assert detuning_at(CARRIER, 0.0) == pytest.approx(-100e3)
    assert detuning_at(SIDEBAND, 250e-6) == pytest.approx(20e3)


def test_amplitude_examples():
    assert amplitude_at(CARRIER, 0.0) == 0.0
    assert amplitude_at(CARRIER, 17.5e-6) == pytest.approx(83e3)
    assert amplitude_at(SIDEBAND, 62.5e-6) == pytest.approx(2.9e3)


def test_endpoints_and_peak():
    t = np.linspace(0, CARRIER.duration, 1001)
    amp = amplitude_at(CARRIER, t)
    assert amp[0] == 0 and amp[-1] == pytest.approx(0, abs=1e-6)
    assert amp.max() == pytest.approx(83e3) and t[amp.argmax()] == pytest.approx(17.5e-6)


@pytest.mark.parametrize("t", [-1e-9, 36e-6])
def test_time_domain(t):
    with pytest.raises(ValueError):
        detuning_at(CARRIER, t)
    with pytest.raises(ValueError):
        amplitude_at(CARRIER, t)


@given(frac=st.floats(0, 1))
def test_envelope_symmetry_and_chirp_antisymmetry(frac):
    T = SIDEBAND.duration
    t = frac * T
    assert amplitude_at(SIDEBAND, t) == pytest.approx(amplitude_at(SIDEBAND, T - t), abs=1e-9)
    assert detuning_at(SIDEBAND, t) == pytest.approx(-detuning_at(SIDEBAND, T - t), abs=1e-6)


def test_pulse_area():
    area, _ = quad(lambda t: amplitude_at(CARRIER, t), 0, CARRIER.duration, epsabs=0,
                   epsrel=1e-13)
    assert area == pytest.approx(83e3 * 35e-6 / 2, rel=1e-9)


def test_adiabaticity_metric():
    assert adiabaticity_metric(SIDEBAND) == pytest.approx(0.21025, rel=1e-12)
    assert adiabaticity_metric(SIDEBAND, coupling_scale=0.0) == 0.0
    assert adiabaticity_metric(RapPulse(1e-4, 0.0, 1e3)) == math.inf


def test_validation():
    for bad in ({"duration": 0}, {"peak_rabi": -1}, {"sideband_order": 2},
                {"n_time_samples": 1}, {"envelope": "gauss"}, {"rabi_reference": "x"}):
        with pytest.raises(ValueError):
            RapPulse(**{"duration": 1e-5, "chirp_range": 1e5, "peak_rabi": 1e4, **bad})


def test_round_trip_dict():
    assert RapPulse.from_dict(SIDEBAND.to_dict()) == SIDEBAND
