import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from heraldcool.fock import thermal_pn
from heraldcool.protocol import (BLOCK_SIZE, DARK, ProtocolConfig,
                                 TrialOutcome, analytic_model_mass, analytic_p0,
                                 analytic_pn_given_herald, analytic_populations, block_rng,
                                 detection_escape_probability, exact_herald_statistics,
                                 herald_statistics, run_trial, run_trials, sequence_p0,
                                 transfer_tables)

IDEAL = ProtocolConfig(cycles=1, detection_fidelity=1.0, heating_rate=0.0, forced_transfer=1.0)
OPERATING = ProtocolConfig()


def forced(eps, nbar, cycles, shots):
    return ProtocolConfig(nbar=nbar, cycles=cycles, detection_fidelity=1.0, heating_rate=0.0,
                          forced_transfer=1 - eps, shots=shots, rng_seed=12345)


def test_ideal_ground_state_accepted():
    out = run_trial(IDEAL, np.random.default_rng(0), initial_n=0)
    assert out.accepted and out.final_n == 0 and out.herald_bits == (DARK,)


def test_ideal_excited_rejected():
    out = run_trial(IDEAL, np.random.default_rng(0), initial_n=7)
    assert not out.accepted and out.herald_bits == (0,)
    assert out.n_after_raps == 6


def test_ideal_fraction_is_ground_mass():
    stats = herald_statistics(run_trials(replace(IDEAL, shots=100_000)))
    sigma = math.sqrt(stats.heralded_fraction * (1 - stats.heralded_fraction) / 100_000)
    assert abs(stats.heralded_fraction - 1 / 19) < 3 * sigma
    assert stats.p0_given_herald == 1.0


def test_determinism_and_worker_invariance():
    cfg = replace(OPERATING, shots=3 * BLOCK_SIZE + 17, rng_seed=99)
    a, b = run_trials(cfg), run_trials(cfg, workers=4)
    for field in ("initial_n", "bits", "n_after_cycle", "n_after_raps"):
        np.testing.assert_array_equal(getattr(a, field), getattr(b, field))
    c = run_trials(cfg)
    assert [a.outcome(i) for i in range(50)] == [c.outcome(i) for i in range(50)]


def test_block_substreams_differ():
    assert block_rng(1, 0).random() != block_rng(1, 1).random()
    assert block_rng(1, 0).random() == block_rng(1, 0).random()


def test_accepted_iff_all_dark():
    batch = run_trials(replace(OPERATING, shots=5000, cycles=3))
    for o in batch.outcomes()[:2000]:
        assert o.accepted == (len(o.herald_bits) == 3 and all(b == DARK for b in o.herald_bits))


@pytest.mark.parametrize("eps, nbar, m", [(0.05, 18, 1), (0.2, 5, 2), (0.02, 1, 3)])
def test_exact_oracle_matches_sequence_closed_form(eps, nbar, m):
    cfg = forced(eps, nbar, m, 1)
    _, p0, hist = exact_herald_statistics(cfg)[m - 1]
    assert p0 == pytest.approx(sequence_p0(eps, nbar, m), rel=1e-6)
    assert hist.sum() == pytest.approx(1.0)


@pytest.mark.parametrize("eps, nbar, m", [(0.05, 18, 1), (0.2, 5, 2), (0.02, 18, 2)])
def test_monte_carlo_matches_exact_oracle_forced(eps, nbar, m):
    cfg = forced(eps, nbar, m, 100_000)
    stats = herald_statistics(run_trials(cfg))
    _, p0, _ = exact_herald_statistics(cfg)[m - 1]
    assert abs(stats.p0_given_herald - p0) < 3 * math.sqrt(p0 * (1 - p0) / stats.accepted)


def test_monte_carlo_matches_exact_oracle_physical_pulses():
    cfg = replace(OPERATING, cycles=1, shots=100_000)
    stats = herald_statistics(run_trials(cfg))
    frac, p0, hist = exact_herald_statistics(cfg)[0]
    assert abs(stats.heralded_fraction - frac) < 3 * math.sqrt(frac * (1 - frac) / 100_000)
    assert abs(stats.p0_given_herald - p0) < 3 * math.sqrt(p0 * (1 - p0) / stats.accepted)


def test_acceptance_oracle_by_direct_summation():
    # single cycle, no heating: accepted mass summed over n, qubit branches written out
    cfg = replace(OPERATING, cycles=1, heating_rate=0.0)
    t = transfer_tables(cfg)
    f = cfg.detection_fidelity
    total = 0.0
    for n in range(cfg.thermal_cutoff + 1):
        pc, down, up = t.carrier[n], t.sideband[n], t.sideband[n + 1]
        excited = pc * (1 - down) + (1 - pc) * up
        total += thermal_pn(cfg.nbar, n) * (f * excited + (1 - f) * (1 - excited))
    assert exact_herald_statistics(cfg)[0][0] == pytest.approx(total, rel=1e-5)


def test_analytic_examples():
    assert analytic_p0(0.05, 18, 1) == pytest.approx(0.35714, abs=1e-5)
    assert analytic_p0(0.05, 18, 2) == pytest.approx(0.91743, abs=1e-5)
    assert analytic_p0(0.02, 18, 1) == pytest.approx(0.581, abs=1e-3)
    assert analytic_p0(0.02, 18, 2) == pytest.approx(0.986, abs=1e-3)
    assert analytic_p0(0.05, 18, 1, "ideal") == pytest.approx(1 / 1.9)
    assert analytic_pn_given_herald(0.05, 18, 1) == pytest.approx(0.016917, abs=1e-6)
    assert analytic_pn_given_herald(0.0, 18, 3) == 0.0


@given(nbar=st.floats(0, 100), m=st.integers(1, 5))
def test_perfect_rap_gives_unity(nbar, m):
    assert analytic_p0(0.0, nbar, m) == 1.0
    assert analytic_p0(0.0, nbar, m, "ideal") == 1.0


def test_analytic_model_mass_and_deficit():
    eps, nbar = 0.05, 18
    brute = analytic_p0(eps, nbar) + math.fsum(analytic_pn_given_herald(eps, nbar, n)
                                               for n in range(1, 10_001))
    assert brute == pytest.approx(analytic_model_mass(eps, nbar), rel=1e-12)
    assert brute <= 1
    assert 1 - brute == pytest.approx(eps * nbar / (1 + 2 * eps * nbar), rel=1e-10)
    assert analytic_populations(eps, nbar, 3)[1] == pytest.approx(0.016917, abs=1e-6)


def test_analytic_domain():
    with pytest.raises(ValueError):
        analytic_pn_given_herald(0.05, 18, 0)
    for bad in ((-0.1, 1, 1), (1.1, 1, 1), (0.1, -1, 1), (0.1, 1, 0)):
        with pytest.raises(ValueError):
            analytic_p0(*bad)


def test_escape_probability():
    assert detection_escape_probability(37, 1.5e-3) == pytest.approx(0.0540, abs=1e-4)
    assert detection_escape_probability(0, 1.5e-3) == 0.0
    assert detection_escape_probability(37, 0) == 0.0


def test_p0_nondecreasing_without_heating():
    cfg = replace(OPERATING, cycles=5, heating_rate=0.0)
    exact = exact_herald_statistics(cfg)
    p0 = [e[1] for e in exact]
    frac = [e[0] for e in exact]
    assert all(b >= a - 1e-12 for a, b in zip(p0, p0[1:]))
    assert all(b <= a + 1e-12 for a, b in zip(frac, frac[1:]))


def test_p0_saturates_below_escape_bound():
    cfg = replace(OPERATING, cycles=6)
    p0 = [e[1] for e in exact_herald_statistics(cfg)]
    bound = 1 - detection_escape_probability(cfg.heating_rate, cfg.detection_time)
    assert max(p0) <= bound + 1e-3


@given(cycles=st.integers(1, 4), seed=st.integers(0, 2**32))
@settings(max_examples=15, deadline=None)
def test_acceptance_shrinks_with_cycles(cycles, seed):
    batch = run_trials(replace(OPERATING, cycles=cycles, shots=2000, rng_seed=seed))
    fracs = [herald_statistics(batch, m).heralded_fraction for m in range(1, cycles + 1)]
    assert all(b <= a for a, b in zip(fracs, fracs[1:]))


def test_statistics_all_accepted_ground():
    outcomes = [TrialOutcome((DARK,), True, 0, 0)] * 10
    stats = herald_statistics(outcomes)
    assert stats.heralded_fraction == 1 and stats.p0_given_herald == 1
    assert stats.motional_histogram.sum() == pytest.approx(1.0)


def test_statistics_zero_accepted_undefined():
    stats = herald_statistics([TrialOutcome((0,), False, 3, 3)] * 5)
    assert not stats.defined and math.isnan(stats.p0_given_herald)
    assert stats.to_dict()["p0_given_herald"] is None
    with pytest.raises(ValueError):
        herald_statistics([])


def test_config_validation():
    for bad in ({"shots": 0}, {"cycles": 0}, {"detection_fidelity": 0.5},
                {"heating_rate": -1}, {"forced_transfer": 1.5}, {"nbar": -1}):
        with pytest.raises(ValueError):
            ProtocolConfig(**bad)


def test_monte_carlo_matches_sequence_closed_form_on_full_grid():
    # the sampler follows 1/(1 + eps^m (2 nbar + 1)) on every cell of the closed-form grid
    for eps in (0.0, 0.02, 0.05, 0.2):
        for nbar in (1, 5, 18):
            batch = run_trials(forced(eps, nbar, 3, 100_000))
            for m in (1, 2, 3):
                stats = herald_statistics(batch, m)
                p = sequence_p0(eps, nbar, m)
                se = math.sqrt(p * (1 - p) / stats.accepted)
                assert abs(stats.p0_given_herald - p) <= 4 * se + 1e-12
