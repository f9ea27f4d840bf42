"""Time-dependent dynamics of RAP pulses.

Two engines are provided:

* the ladder engine integrates the 2x2 problem of every Fock ladder coupled
  by the target transition. All ladders are stacked into one vectorised ODE,
  so a thermal ensemble of a few hundred ladders costs about as much as one.
* the full engine integrates the truncated (qubit x Fock) state vector with
  several sideband orders switched on at once. It exists to bound the error of
  the single-sideband reduction.

Hamiltonians are written with ordinary frequencies (Hz); the factor 2*pi is
applied only inside the right-hand sides.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from .fock import ModeConfig, ThermalDistribution, displacement_elements

DEFAULT_RTOL = 1e-10
DEFAULT_ATOL = 1e-12


class IntegrationError(RuntimeError):
    """The ODE integrator gave up before reaching the end of the pulse."""

    def __init__(self, message, time=None, n=None):
        super().__init__(message)
        self.time = time
        self.n = n


class TruncationError(RuntimeError):
    """Population leaked into the highest Fock levels kept by the full engine."""


@dataclass(frozen=True)
class TwoLevelAmplitudes:
    c_g: complex = 1.0 + 0j
    c_e: complex = 0j

    @property
    def p_g(self):
        return abs(self.c_g) ** 2

    @property
    def p_e(self):
        return abs(self.c_e) ** 2

    @property
    def norm(self):
        return self.p_g + self.p_e


GROUND = TwoLevelAmplitudes(1.0 + 0j, 0j)
EXCITED = TwoLevelAmplitudes(0j, 1.0 + 0j)


def _envelope(pulse, t):
    if pulse.envelope == "square":
        return 1.0
    return math.sin(math.pi * t / pulse.duration) ** 2


def _detuning(pulse, t):
    return pulse.chirp_rate * (t - 0.5 * pulse.duration)


def reference_overlap(pulse, cfg):
    """|<n+s|D|n>| of the reference transition that ``pulse.peak_rabi`` refers to."""
    if pulse.rabi_reference == "carrier":
        return 1.0
    return float(abs(displacement_elements(0, 1, cfg.lamb_dicke)[0]))


def carrier_equivalent_rabi(pulse, cfg):
    """Bare carrier Rabi frequency Omega_0 (Hz) implied by the pulse's peak setting."""
    return pulse.peak_rabi / reference_overlap(pulse, cfg)


def partner_index(n, sideband_order, start):
    """Fock index reached from |start, n> by the transition of the given order."""
    return n + sideband_order if start == "g" else n - sideband_order


def ladder_rabi(pulse, cfg, n, start="g"):
    """Peak Rabi frequency (Hz) of the ladder containing |start, n> for this pulse.

    Ladders whose partner state would have a negative Fock index are dark and
    get 0.
    """
    if start not in ("g", "e"):
        raise ValueError("start must be 'g' or 'e'")
    n = np.atleast_1d(np.asarray(n, dtype=int))
    if np.any(n < 0):
        raise ValueError("Fock indices must be nonnegative")
    s = pulse.sideband_order
    # |<m|D|n>| is symmetric; always tabulate from the lower index
    lower = np.minimum(n, partner_index(n, s, start))
    table = np.abs(displacement_elements(int(max(lower.max(), 0)), abs(s), cfg.lamb_dicke))
    out = np.zeros(n.shape)
    ok = lower >= 0
    out[ok] = table[lower[ok]]
    return carrier_equivalent_rabi(pulse, cfg) * out


def _solve(fun, pulse, y0, rtol, atol, method):
    """Integrate over [0, T]; adaptive DOP853 or fixed-step RK4 on n_time_samples points."""
    raw = fun

    def fun(t, y):
        dy = raw(t, y)
        if not np.all(np.isfinite(dy)):
            raise IntegrationError(f"non-finite derivative at t={t:.6g} s", time=float(t))
        return dy

    if method == "fixed":
        ts = np.linspace(0.0, pulse.duration, pulse.n_time_samples)
        y = np.array(y0)
        for t0, t1 in zip(ts[:-1], ts[1:]):
            h = t1 - t0
            k1 = fun(t0, y)
            k2 = fun(t0 + h / 2, y + h / 2 * k1)
            k3 = fun(t0 + h / 2, y + h / 2 * k2)
            k4 = fun(t1, y + h * k3)
            y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        return y
    if method != "adaptive":
        raise ValueError(f"unknown method {method!r}")
    sol = solve_ivp(fun, (0.0, pulse.duration), y0, method="DOP853",
                    rtol=rtol, atol=atol)
    if sol.status != 0:
        t_fail = float(sol.t[-1]) if sol.t.size else 0.0
        raise IntegrationError(f"integration failed at t={t_fail:.6g} s: {sol.message}",
                               time=t_fail)
    return sol.y[:, -1]


def evolve_ladders(pulse, omegas, c_g, c_e, rtol=DEFAULT_RTOL, atol=DEFAULT_ATOL,
                   method="adaptive"):
    """Propagate many independent two-level ladders through one pulse.

    Parameters
    ----------
    pulse : RapPulse
        Supplies the chirp and the envelope shape.
    omegas : array_like
        Peak Rabi frequency of every ladder (Hz).
    c_g, c_e : array_like
        Initial amplitudes, one entry per ladder.

    Returns
    -------
    tuple of ndarray
        Final ``(c_g, c_e)``.
    """
    omegas = np.asarray(omegas, dtype=float)
    k = omegas.size
    half_rabi = np.pi * omegas
    y0 = np.concatenate([np.asarray(c_g, complex).ravel(), np.asarray(c_e, complex).ravel()])

    def rhs(t, y):
        a = np.pi * _detuning(pulse, t)
        b = half_rabi * _envelope(pulse, t)
        cg, ce = y[:k], y[k:]
        return np.concatenate([-1j * (a * cg + b * ce), -1j * (b * cg - a * ce)])

    y = _solve(rhs, pulse, y0, rtol, atol, method)
    return y[:k], y[k:]


def evolve_ladders_dephased(pulse, omegas, excited_pop, dephasing_rate,
                            rtol=DEFAULT_RTOL, atol=DEFAULT_ATOL, method="adaptive"):
    """Excited-state population of each ladder with pure dephasing at `dephasing_rate` (1/s).

    Starts from diagonal states with the given excited populations.
    """
    omegas = np.asarray(omegas, dtype=float)
    k = omegas.size
    half_rabi = np.pi * omegas
    y0 = np.concatenate([np.asarray(excited_pop, float).ravel(), np.zeros(2 * k)])

    def rhs(t, y):
        a = np.pi * _detuning(pulse, t)
        b = half_rabi * _envelope(pulse, t)
        ree, re_ge, im_ge = y[:k], y[k:2 * k], y[2 * k:]
        # d rho_ge/dt = -i (2a rho_ge + b (rho_ee - rho_gg)) - gamma rho_ge
        pop_diff = 2 * ree - 1
        d_re = 2 * a * im_ge - dephasing_rate * re_ge
        d_im = -2 * a * re_ge - b * pop_diff - dephasing_rate * im_ge
        return np.concatenate([2 * b * im_ge, d_re, d_im])

    y = _solve(rhs, pulse, y0, rtol, atol, method)
    return y[:k]


def evolve_two_level(pulse, omega_n=None, start=GROUND, rtol=DEFAULT_RTOL,
                     atol=DEFAULT_ATOL, method="adaptive"):
    """Integrate one ladder; `omega_n` defaults to the pulse's own peak_rabi."""
    if omega_n is None:
        omega_n = pulse.peak_rabi
    if omega_n < 0:
        raise ValueError("omega_n must be >= 0")
    cg, ce = evolve_ladders(pulse, [omega_n], [start.c_g], [start.c_e], rtol, atol, method)
    return TwoLevelAmplitudes(complex(cg[0]), complex(ce[0]))


@dataclass
class LadderEnsemble:
    """Classical mixture of Fock ladders, each carrying two-level amplitudes.

    ``fock`` holds the Fock index of each ladder's *initial* component and
    ``start`` which qubit state it started in; the partner state of ladder i
    is ``|other, partner_index(fock[i], s, start)>``.
    """

    cfg: ModeConfig
    weights: np.ndarray
    fock: np.ndarray
    c_g: np.ndarray
    c_e: np.ndarray
    start: str = "g"
    history: list = field(default_factory=list)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if np.any(self.weights < 0):
            raise ValueError("ladder weights must be nonnegative")
        if abs(self.weights.sum() - 1) > 1e-12:
            raise ValueError(f"ladder weights must sum to 1, got {self.weights.sum()!r}")

    @classmethod
    def from_distribution(cls, dist, cfg, start="g"):
        p = np.asarray(dist.probabilities if isinstance(dist, ThermalDistribution) else dist,
                       dtype=float)
        n = np.arange(p.size)
        c_g = np.full(p.size, 1.0 + 0j) if start == "g" else np.zeros(p.size, complex)
        c_e = np.zeros(p.size, complex) if start == "g" else np.full(p.size, 1.0 + 0j)
        return cls(cfg, p, n, c_g, c_e, start)

    def apply(self, pulse, rtol=DEFAULT_RTOL, atol=DEFAULT_ATOL, method="adaptive"):
        """Propagate every ladder through `pulse` (must address the ladders' transition)."""
        omegas = ladder_rabi(pulse, self.cfg, self.fock, self.start)
        self.c_g, self.c_e = evolve_ladders(pulse, omegas, self.c_g, self.c_e,
                                            rtol, atol, method)
        self.history.append(pulse)
        return self

    def flipped_population(self):
        """Per-ladder probability of having left the starting qubit state."""
        return np.abs(self.c_e) ** 2 if self.start == "g" else np.abs(self.c_g) ** 2

    def norm_error(self):
        return float(np.max(np.abs(np.abs(self.c_g) ** 2 + np.abs(self.c_e) ** 2 - 1)))

    def transfer(self):
        return float(np.dot(self.weights, self.flipped_population()))


def default_start(pulse):
    """Qubit state each transition starts from in the cooling sequence.

    The blue sideband is used for de-excitation |e,n> -> |g,n-1>, everything
    else starts in |g>.
    """
    return "e" if pulse.sideband_order == 1 else "g"


def transfer_probabilities(pulse, cfg, n, start=None, rtol=DEFAULT_RTOL, atol=DEFAULT_ATOL,
                           method="adaptive", dephasing_rate=0.0):
    """Probability that |start, n> is flipped to the other qubit state, for each n."""
    start = default_start(pulse) if start is None else start
    n = np.atleast_1d(np.asarray(n, dtype=int))
    omegas = ladder_rabi(pulse, cfg, n, start)
    if dephasing_rate > 0:
        p_e0 = np.zeros(n.size) if start == "g" else np.ones(n.size)
        p_e = evolve_ladders_dephased(pulse, omegas, p_e0, dephasing_rate, rtol, atol, method)
        return np.clip(p_e if start == "g" else 1 - p_e, 0.0, 1.0)
    ones = np.ones(n.size, complex)
    zeros = np.zeros(n.size, complex)
    c_g, c_e = (ones, zeros) if start == "g" else (zeros, ones)
    try:
        c_g, c_e = evolve_ladders(pulse, omegas, c_g, c_e, rtol, atol, method)
    except IntegrationError:
        # vectorised solve failed: redo ladder by ladder to name the culprit
        for i, om in enumerate(omegas):
            try:
                evolve_ladders(pulse, [om], [c_g[i]], [c_e[i]], rtol, atol, method)
            except IntegrationError as err:
                raise IntegrationError(f"ladder n={n[i]}: {err}", time=err.time,
                                       n=int(n[i])) from None
        raise
    flipped = np.abs(c_e) ** 2 if start == "g" else np.abs(c_g) ** 2
    return np.clip(flipped, 0.0, 1.0)


def transfer_efficiency(pulse, init, cfg, start=None, **kwargs):
    """Thermally averaged transfer probability sum_n p_n P_transfer(n)."""
    p = np.asarray(init.probabilities if isinstance(init, ThermalDistribution) else init,
                   dtype=float)
    if abs(p.sum() - 1) > 1e-9:
        raise ValueError("initial distribution must be normalised")
    probs = transfer_probabilities(pulse, cfg, np.arange(p.size), start, **kwargs)
    return float(np.dot(p, probs))


# full truncated-Hilbert-space engine

@dataclass
class FullState:
    """State vector over (qubit in {g, e}) x (Fock 0..n_max); ``amplitudes[q, n]``."""

    amplitudes: np.ndarray

    @classmethod
    def basis(cls, qubit, n, n_max):
        if not 0 <= n <= n_max:
            raise ValueError("Fock index outside truncation")
        amps = np.zeros((2, n_max + 1), complex)
        amps[0 if qubit == "g" else 1, n] = 1.0
        return cls(amps)

    @property
    def n_max(self):
        return self.amplitudes.shape[1] - 1

    @property
    def norm(self):
        return float(np.sum(np.abs(self.amplitudes) ** 2))

    def qubit_population(self, qubit):
        return float(np.sum(np.abs(self.amplitudes[0 if qubit == "g" else 1]) ** 2))

    def fock_populations(self):
        return np.sum(np.abs(self.amplitudes) ** 2, axis=0)


def _check_orders(sideband_orders):
    orders = sorted(set(int(s) for s in sideband_orders))
    if not orders or any(not -2 <= s <= 2 for s in orders):
        raise ValueError("sideband orders must be a nonempty subset of -2..2")
    return orders


def _evolve_windows(pulse, cfg, orders, lo, amps_g, amps_e, rtol, atol):
    """Batch of K independent pure states, each on its own Fock window.

    State k lives on Fock levels lo[k] .. lo[k] + W - 1. Returns final
    (g, e) amplitude arrays of shape (K, W).
    """
    lo = np.asarray(lo, dtype=int)
    n_states, width = amps_g.shape
    omega0 = carrier_equivalent_rabi(pulse, cfg)
    nu = cfg.trap_frequency
    s_target = pulse.sideband_order
    top = int(lo.max()) + width
    fock = lo[:, None] + np.arange(width)[None, :]

    terms = []
    for s in orders:
        # coupling |g, m> -> |e, m+s>, m = fock[:, j], target column j+s
        d = displacement_elements(top, s, cfg.lamb_dicke)
        if s >= 0:
            src, dst = slice(0, width - s), slice(s, width)
        else:
            src, dst = slice(-s, width), slice(0, width + s)
        amp = np.pi * omega0 * d[fock[:, src]]
        terms.append((s, src, dst, amp))

    size = n_states * width

    def rhs(t, y):
        g = y[:size].reshape(n_states, width)
        e = y[size:].reshape(n_states, width)
        env = _envelope(pulse, t)
        a = np.pi * _detuning(pulse, t)
        dg = a * g
        de = -a * e
        for s, src, dst, amp in terms:
            c = amp * (env * np.exp(2j * np.pi * (s - s_target) * nu * t))
            de[:, dst] += c * g[:, src]
            dg[:, src] += np.conj(c) * e[:, dst]
        return -1j * np.concatenate([dg.ravel(), de.ravel()])

    y0 = np.concatenate([np.asarray(amps_g, complex).ravel(), np.asarray(amps_e, complex).ravel()])
    y = _solve(rhs, pulse, y0, rtol, atol, "adaptive")
    return y[:size].reshape(n_states, width), y[size:].reshape(n_states, width)


def evolve_full(pulse, start, cfg, sideband_orders=(-1, 0, 1), rtol=DEFAULT_RTOL,
                atol=DEFAULT_ATOL, overflow_tol=1e-3):
    """Integrate the multi-sideband Hamiltonian over one pulse.

    The frame co-rotates with the addressed transition ``pulse.sideband_order``;
    a coupling of order s then carries the phase exp(2 pi i (s - s_target) nu t)
    on top of the shared chirp.
    """
    orders = _check_orders(sideband_orders)
    g, e = _evolve_windows(pulse, cfg, orders, [0], start.amplitudes[0][None, :],
                           start.amplitudes[1][None, :], rtol, atol)
    out = FullState(np.vstack([g, e]))
    top = float(out.fock_populations()[-2:].sum())
    if top > overflow_tol:
        raise TruncationError(f"{top:.3g} population in the top two Fock levels; raise n_max")
    return out


def full_transfer_probabilities(pulse, cfg, n, start=None, sideband_orders=(-1, 0, 1),
                                half_window=8, rtol=DEFAULT_RTOL, atol=DEFAULT_ATOL,
                                overflow_tol=1e-3):
    """Flip probability of each |start, n> from the full engine.

    Every initial Fock state is propagated on a window of 2*half_window + 1
    levels around it; all windows are integrated together.
    """
    start = default_start(pulse) if start is None else start
    orders = _check_orders(sideband_orders)
    n = np.atleast_1d(np.asarray(n, dtype=int))
    width = 2 * half_window + 1
    lo = np.maximum(n - half_window, 0)
    amps = np.zeros((n.size, width), complex)
    amps[np.arange(n.size), n - lo] = 1.0
    zeros = np.zeros_like(amps)
    g0, e0 = (amps, zeros) if start == "g" else (zeros, amps)
    g, e = _evolve_windows(pulse, cfg, orders, lo, g0, e0, rtol, atol)
    pops = np.abs(g) ** 2 + np.abs(e) ** 2
    edge = pops[:, -2:].sum(axis=1) + np.where(lo > 0, pops[:, :2].sum(axis=1), 0.0)
    if np.any(edge > overflow_tol):
        raise TruncationError(f"{edge.max():.3g} population at a Fock window edge; "
                              "raise half_window")
    flipped = np.sum(np.abs(e) ** 2, axis=1) if start == "g" else np.sum(np.abs(g) ** 2, axis=1)
    return np.clip(flipped, 0.0, 1.0)


def full_transfer_probability(pulse, cfg, n, start=None, sideband_orders=(-1, 0, 1), **kwargs):
    """Scalar convenience wrapper of :func:`full_transfer_probabilities`."""
    return float(full_transfer_probabilities(pulse, cfg, [n], start, sideband_orders, **kwargs)[0])
