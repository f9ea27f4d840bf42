"""Monte Carlo simulation of the herald-and-repeat cooling sequence.

One trial:

1. draw n from the thermal distribution, qubit in g;
2. carrier RAP flips g -> e with probability P_carrier(n), motion unchanged;
3. blue-sideband RAP: |e,n> -> |g,n-1> with probability P_bsb(n) (|e,0> is
   dark) and, if the carrier RAP failed, |g,n> -> |e,n+1> with P_bsb(n+1);
4. fluorescence detection reports the true qubit state with probability
   ``detection_fidelity``. Bright ends the trial; dark keeps it and heats the
   mode by a Poisson number of quanta during the detection window;
5. cycles 2..m repeat steps 3-4.

The second branch of step 3 is what makes a failed carrier RAP produce a
false herald, and hence the factor of two in the first-cycle error.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.stats import poisson

from .dynamics import transfer_probabilities
from .fock import DEFAULT_TAIL_TOL, ModeConfig, thermal_probabilities, truncation_for
from .pulse import RapPulse

BLOCK_SIZE = 4096
BRIGHT, DARK, NOT_RUN = 0, 1, -1


def default_carrier_pulse():
    return RapPulse(duration=35e-6, chirp_range=200e3, peak_rabi=83e3, sideband_order=0)


def default_sideband_pulse():
    # peak_rabi refers to the bare carrier Rabi frequency (rabi_reference="carrier")
    return RapPulse(duration=250e-6, chirp_range=40e3, peak_rabi=83e3, sideband_order=1)


@dataclass(frozen=True)
class ProtocolConfig:
    """Parameters of the full cooling sequence.

    ``forced_transfer`` replaces every computed RAP transfer probability by a
    constant (``1 - epsilon``); the dark ladder |e,0> stays uncoupled.
    """

    nbar: float = 18.0
    cycles: int = 2
    detection_time: float = 1.5e-3
    detection_fidelity: float = 0.995
    heating_rate: float = 37.0
    carrier_pulse: RapPulse = field(default_factory=default_carrier_pulse)
    sideband_pulse: RapPulse = field(default_factory=default_sideband_pulse)
    shots: int = 900
    rng_seed: int = 0
    mode: ModeConfig = field(default_factory=ModeConfig)
    forced_transfer: float | None = None
    tail_tol: float = DEFAULT_TAIL_TOL

    def __post_init__(self):
        if self.nbar < 0:
            raise ValueError(f"nbar must be >= 0, got {self.nbar}")
        if int(self.cycles) != self.cycles or self.cycles < 1:
            raise ValueError(f"cycles must be an integer >= 1, got {self.cycles}")
        if self.detection_time < 0:
            raise ValueError("detection_time must be >= 0")
        if not 0.5 < self.detection_fidelity <= 1:
            raise ValueError(f"detection_fidelity must lie in (0.5, 1], got {self.detection_fidelity}")
        if self.heating_rate < 0:
            raise ValueError("heating_rate must be >= 0")
        if int(self.shots) != self.shots or self.shots < 1:
            raise ValueError(f"shots must be an integer >= 1, got {self.shots}")
        if not 0 <= int(self.rng_seed) < 2**64:
            raise ValueError("rng_seed must be an unsigned 64-bit integer")
        if self.forced_transfer is not None and not 0 <= self.forced_transfer <= 1:
            raise ValueError("forced_transfer must lie in [0, 1]")
        if self.carrier_pulse.sideband_order != 0:
            raise ValueError("carrier_pulse must address the carrier (sideband_order=0)")
        if self.sideband_pulse.sideband_order != 1:
            raise ValueError("sideband_pulse must address the blue sideband (sideband_order=+1)")

    @property
    def heating_mean(self):
        """Mean number of quanta gained during one detection window."""
        return self.heating_rate * self.detection_time

    @property
    def thermal_cutoff(self):
        return max(truncation_for(self.nbar, self.tail_tol), 1)


@dataclass(frozen=True)
class TransferTables:
    """Per-Fock-index transfer probabilities used by the sampler.

    carrier[n]: |g,n> -> |e,n>; sideband[n]: |e,n> -> |g,n-1> (equivalently
    |g,n-1> -> |e,n>). sideband[0] is 0: |e,0> is dark.
    """

    carrier: np.ndarray
    sideband: np.ndarray

    @property
    def size(self):
        return self.carrier.size


@lru_cache(maxsize=32)
def transfer_tables(config):
    n_top = config.thermal_cutoff + 8 * config.cycles + 16
    n = np.arange(n_top + 1)
    if config.forced_transfer is not None:
        carrier = np.full(n.size, float(config.forced_transfer))
        sideband = np.full(n.size, float(config.forced_transfer))
    else:
        carrier = transfer_probabilities(config.carrier_pulse, config.mode, n, start="g")
        sideband = transfer_probabilities(config.sideband_pulse, config.mode, n, start="e")
    sideband[0] = 0.0
    carrier.setflags(write=False)
    sideband.setflags(write=False)
    return TransferTables(carrier, sideband)


@dataclass(frozen=True)
class TrialOutcome:
    """Record of one trial.

    herald_bits holds DARK (1) / BRIGHT (0) per executed cycle; the trial stops
    at the first bright result. n_after_cycle is the Fock index after each
    executed detection (heating included).
    """

    herald_bits: tuple
    accepted: bool
    final_n: int
    n_after_raps: int
    initial_n: int = 0
    n_after_cycle: tuple = ()


@dataclass
class TrialBatch:
    """Column-wise record of many trials (NOT_RUN = -1 marks skipped cycles)."""

    initial_n: np.ndarray
    bits: np.ndarray
    n_after_cycle: np.ndarray
    n_after_raps: np.ndarray

    def __len__(self):
        return self.initial_n.size

    @property
    def cycles(self):
        return self.bits.shape[1]

    @property
    def accepted(self):
        return np.all(self.bits == DARK, axis=1)

    @property
    def final_n(self):
        executed = np.sum(self.bits != NOT_RUN, axis=1)
        return self.n_after_cycle[np.arange(len(self)), executed - 1]

    def outcome(self, i):
        run = self.bits[i] != NOT_RUN
        return TrialOutcome(
            herald_bits=tuple(int(b) for b in self.bits[i][run]),
            accepted=bool(np.all(self.bits[i] == DARK)),
            final_n=int(self.final_n[i]),
            n_after_raps=int(self.n_after_raps[i]),
            initial_n=int(self.initial_n[i]),
            n_after_cycle=tuple(int(x) for x in self.n_after_cycle[i][run]),
        )

    def outcomes(self):
        return [self.outcome(i) for i in range(len(self))]

    @classmethod
    def concatenate(cls, batches):
        return cls(*(np.concatenate([getattr(b, f) for b in batches])
                     for f in ("initial_n", "bits", "n_after_cycle", "n_after_raps")))

    @classmethod
    def from_outcomes(cls, outcomes, cycles=None):
        outcomes = list(outcomes)
        if cycles is None:
            cycles = max(len(o.herald_bits) for o in outcomes)
        bits = np.full((len(outcomes), cycles), NOT_RUN, dtype=np.int8)
        n_cyc = np.full((len(outcomes), cycles), -1, dtype=np.int64)
        for i, o in enumerate(outcomes):
            k = len(o.herald_bits)
            bits[i, :k] = o.herald_bits
            n_cyc[i, :k] = o.n_after_cycle if o.n_after_cycle else o.final_n
        init = np.array([o.initial_n for o in outcomes], dtype=np.int64)
        raps = np.array([o.n_after_raps for o in outcomes], dtype=np.int64)
        return cls(init, bits, n_cyc, raps)


def _simulate(config, tables, rng, size, initial_n=None):
    """Vectorised sampler over `size` trials drawing from one generator."""
    m = config.cycles
    top = tables.size - 1
    if initial_n is None:
        # geometric on {1, 2, ...} with success 1/(nbar+1), shifted to start at 0;
        # clipping folds the tail into the cutoff bin
        n = rng.geometric(1.0 / (config.nbar + 1.0), size) - 1
        n = np.minimum(n, config.thermal_cutoff)
    else:
        n = np.full(size, int(initial_n), dtype=np.int64)
    n = n.astype(np.int64)
    init = n.copy()

    excited = rng.random(size) < tables.carrier[np.minimum(n, top)]
    alive = np.ones(size, dtype=bool)
    bits = np.full((size, m), NOT_RUN, dtype=np.int8)
    n_cyc = np.full((size, m), -1, dtype=np.int64)
    n_raps = np.full(size, -1, dtype=np.int64)
    lam = config.heating_mean
    for k in range(m):
        u_rap = rng.random(size)
        u_det = rng.random(size)
        quanta = rng.poisson(lam, size) if lam > 0 else np.zeros(size, np.int64)

        # blue-sideband RAP
        p_down = tables.sideband[np.minimum(n, top)]
        p_up = tables.sideband[np.minimum(n + 1, top)]
        down = alive & excited & (u_rap < p_down)
        up = alive & ~excited & (u_rap < p_up)
        n = n - down + up
        excited = (excited & ~down) | up
        n_raps = np.where(alive, n, n_raps)

        # detection; misreport with probability 1 - fidelity
        correct = u_det < config.detection_fidelity
        dark = np.where(correct, excited, ~excited)
        bits[alive, k] = np.where(dark[alive], DARK, BRIGHT)
        n = np.where(alive & dark, n + quanta, n)
        n_cyc[alive, k] = n[alive]
        alive &= dark
    return TrialBatch(init, bits, n_cyc, n_raps)


def block_rng(seed, index):
    """Independent generator for block `index` of a run seeded with `seed`."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(index,))))


def run_trial(config, rng, initial_n=None):
    """Simulate a single trial with generator `rng`; `initial_n` pins the thermal draw."""
    batch = _simulate(config, transfer_tables(config), rng, 1, initial_n)
    return batch.outcome(0)


def run_trials(config, shots=None, workers=1):
    """Simulate ``shots`` trials (default ``config.shots``).

    Trials are split into fixed blocks of BLOCK_SIZE, each with its own
    substream keyed by (rng_seed, block index), so the output does not depend
    on ``workers``.
    """
    shots = config.shots if shots is None else int(shots)
    if shots < 1:
        raise ValueError("shots must be >= 1")
    tables = transfer_tables(config)
    sizes = [min(BLOCK_SIZE, shots - start) for start in range(0, shots, BLOCK_SIZE)]

    def block(i):
        return _simulate(config, tables, block_rng(config.rng_seed, i), sizes[i])

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            batches = list(pool.map(block, range(len(sizes))))
    else:
        batches = [block(i) for i in range(len(sizes))]
    return TrialBatch.concatenate(batches)


@dataclass(frozen=True)
class HeraldStatistics:
    shots: int
    accepted: int
    heralded_fraction: float
    heralded_fraction_err: float
    p0_given_herald: float
    p0_err: float
    motional_histogram: np.ndarray
    cycles: int

    @property
    def defined(self):
        return self.accepted > 0

    def to_dict(self):
        return {
            "cycles": self.cycles,
            "shots": self.shots,
            "accepted": self.accepted,
            "heralded_fraction": self.heralded_fraction,
            "heralded_fraction_err": self.heralded_fraction_err,
            "p0_given_herald": self.p0_given_herald if self.defined else None,
            "p0_err": self.p0_err if self.defined else None,
            "defined": self.defined,
        }


def _binomial(k, n):
    p = k / n
    return p, math.sqrt(p * (1 - p) / n)


def herald_statistics(outcomes, cycles=None):
    """Acceptance and conditional ground-state statistics.

    A trial counts as accepted after `cycles` cycles (default: all recorded)
    if each of its first `cycles` herald bits is dark. With no accepted trial
    the conditional quantities are NaN and ``defined`` is False.
    """
    batch = outcomes if isinstance(outcomes, TrialBatch) else TrialBatch.from_outcomes(outcomes)
    if len(batch) == 0:
        raise ValueError("no trials")
    cycles = batch.cycles if cycles is None else int(cycles)
    if not 1 <= cycles <= batch.cycles:
        raise ValueError(f"cycles must lie in 1..{batch.cycles}")
    accepted = np.all(batch.bits[:, :cycles] == DARK, axis=1)
    n_acc = int(accepted.sum())
    frac, frac_err = _binomial(n_acc, len(batch))
    if n_acc == 0:
        return HeraldStatistics(len(batch), 0, frac, frac_err, math.nan, math.nan,
                                np.zeros(0), cycles)
    final = batch.n_after_cycle[accepted, cycles - 1]
    hist = np.bincount(final) / n_acc
    p0, p0_err = _binomial(int(np.sum(final == 0)), n_acc)
    return HeraldStatistics(len(batch), n_acc, frac, frac_err, p0, p0_err, hist, cycles)


def exact_herald_statistics(config):
    """Exact acceptance probability and p(n=0 | accepted) after each cycle.

    Propagates the joint (qubit, n) distribution of the surviving trials
    deterministically through the same sequence the sampler draws from.
    Returns a list of ``(heralded_fraction, p0_given_herald, histogram)``.
    """
    tables = transfer_tables(config)
    size = tables.size
    top = size - 1
    cutoff = config.thermal_cutoff
    g = np.zeros(size)
    g[:cutoff + 1] = thermal_probabilities(config.nbar, cutoff)
    e = g * tables.carrier
    g = g - e
    lam = config.heating_mean
    kernel = poisson.pmf(np.arange(40), lam) if lam > 0 else np.array([1.0])
    kernel[-1] += 1 - kernel.sum()
    f = config.detection_fidelity
    out = []
    for _ in range(config.cycles):
        down = e * tables.sideband             # |e,n> -> |g,n-1>
        up = g * np.append(tables.sideband[1:], tables.sideband[-1])   # |g,n> -> |e,n+1>
        e_new = e - down
        e_new[1:] += up[:-1]
        e_new[-1] += up[-1]
        g_new = g - up
        g_new[:-1] += down[1:]
        e, g = e_new, g_new
        # survivors are the dark reports
        e, g = f * e, (1 - f) * g
        if lam > 0:
            e = _heat(e, kernel, top)
            g = _heat(g, kernel, top)
        pops = e + g
        total = float(pops.sum())
        out.append((total, float(pops[0] / total) if total > 0 else math.nan,
                    pops / total if total > 0 else pops))
    return out


def _heat(p, kernel, top):
    out = np.convolve(p, kernel)
    out[top] += out[top + 1:].sum()
    return out[:top + 1]


# closed-form heralding model

def analytic_p0(epsilon, nbar, m=1, variant="with-carrier"):
    """Ground-state probability given m heralds for a state-independent RAP failure epsilon.

    ``variant="ideal"``: 1 / (1 + eps**m nbar) for the bare scheme.
    ``variant="with-carrier"``: 1 / (1 + 2 eps**m nbar), counting the extra carrier RAP.
    """
    _check_model_domain(epsilon, nbar)
    if int(m) != m or m < 1:
        raise ValueError("m must be an integer >= 1")
    factor = {"ideal": 1.0, "with-carrier": 2.0}.get(variant)
    if factor is None:
        raise ValueError(f"unknown variant {variant!r}")
    return 1.0 / (1.0 + factor * epsilon**m * nbar)


def analytic_pn_given_herald(epsilon, nbar, n):
    """Population of Fock state n >= 1 after one herald in the closed-form model.

    Not normalised together with :func:`analytic_p0`; see
    :func:`analytic_model_mass`.
    """
    _check_model_domain(epsilon, nbar)
    if n == 0:
        raise ValueError("n = 0 is given by analytic_p0")
    if n < 0:
        raise ValueError("n must be >= 1")
    if nbar == 0:
        return 0.0
    return epsilon / (1 + 2 * epsilon * nbar) * (nbar / (1 + nbar)) ** n


def analytic_model_mass(epsilon, nbar):
    """Total probability of the closed-form one-herald model, p0 + sum_{n>=1} p_n.

    The geometric sum is exact: sum_{n>=1} r**n = r / (1 - r) = nbar.
    """
    _check_model_domain(epsilon, nbar)
    return (1 + epsilon * nbar) / (1 + 2 * epsilon * nbar)


def analytic_populations(epsilon, nbar, n_max):
    """Closed-form one-herald populations for n = 0..n_max, as stated (not renormalised)."""
    p = np.empty(n_max + 1)
    p[0] = analytic_p0(epsilon, nbar, 1)
    for n in range(1, n_max + 1):
        p[n] = analytic_pn_given_herald(epsilon, nbar, n)
    return p


def sequence_p0(epsilon, nbar, m=1):
    """Exact p(n=0 | m heralds) of the simulated sequence with constant transfer 1 - epsilon.

    Assumes perfect detection and no heating. Ground-state trials are heralded
    with probability 1 - eps; excited ones through the carrier-success /
    sideband-fail and carrier-fail / sideband-success branches,
    2 (1 - eps) eps**m; a failed carrier on n = 0 adds (1 - eps) eps**m with
    n = 1. Hence 1 / (1 + eps**m (2 nbar + 1)).
    """
    _check_model_domain(epsilon, nbar)
    return 1.0 / (1.0 + epsilon**m * (2 * nbar + 1))


def detection_escape_probability(heating_rate, detection_time):
    """Probability that at least one heating quantum arrives during detection."""
    if heating_rate < 0 or detection_time < 0:
        raise ValueError("heating_rate and detection_time must be >= 0")
    return -math.expm1(-heating_rate * detection_time)


def _check_model_domain(epsilon, nbar):
    if not 0 <= epsilon <= 1:
        raise ValueError(f"epsilon must lie in [0, 1], got {epsilon}")
    if nbar < 0:
        raise ValueError(f"nbar must be >= 0, got {nbar}")
