"""Rabi-oscillation synthesis and fitting.

The excitation after a resonant probe of duration t is

    P(t) = sum_n p(n) sin^2(pi f_n t),

with f_n the carrier coupling Omega_{n,n} or, for a sideband probe, the
coupling Omega_{n,n+1} of the n -> n+1 ladder (the probe starts from the
heralded qubit state, so the ground state always oscillates).

Fits describe the motional state as a ground-state population p0 plus a
thermal tail renormalised over n >= 1.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import least_squares
from scipy.special import gammaln

from .fock import laguerre_table, thermal_probabilities, truncation_for

TRANSITIONS = ("carrier", "red_sideband", "blue_sideband")
CSV_HEADER = ("time_s", "excitation", "shots")
PARAMS = ("p0", "eta", "nbar_tail", "omega0")


class ScanFormatError(ValueError):
    def __init__(self, message, line=None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


@dataclass(frozen=True)
class RabiScan:
    times: np.ndarray
    excitation: np.ndarray
    shots: np.ndarray
    transition: str = "blue_sideband"

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        exc = np.asarray(self.excitation, dtype=float)
        shots = np.broadcast_to(np.asarray(self.shots, dtype=np.int64), times.shape).copy()
        if times.ndim != 1 or exc.shape != times.shape:
            raise ValueError("times and excitation must be 1-D arrays of equal length")
        if times.size == 0:
            raise ValueError("empty scan")
        if np.any(np.diff(times) <= 0):
            raise ValueError("times must be strictly increasing")
        if np.any(times < 0):
            raise ValueError("times must be nonnegative")
        if np.any((exc < 0) | (exc > 1)) or not np.all(np.isfinite(exc)):
            raise ValueError("excitation must lie in [0, 1]")
        if np.any(shots < 1):
            raise ValueError("shots must be >= 1")
        if self.transition not in TRANSITIONS:
            raise ValueError(f"transition must be one of {TRANSITIONS}")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "excitation", exc)
        object.__setattr__(self, "shots", shots)

    @property
    def shots_per_point(self):
        return int(self.shots[0]) if np.all(self.shots == self.shots[0]) else self.shots

    def __len__(self):
        return self.times.size


def probe_order(transition):
    if transition not in TRANSITIONS:
        raise ValueError(f"transition must be one of {TRANSITIONS}")
    return 0 if transition == "carrier" else 1


def _overlaps(n_max, order, eta, with_derivative=False):
    """|<n+order| D(eta) |n>| for n = 0..n_max, optionally with d/d(eta)."""
    x = eta * eta
    n = np.arange(n_max + 1)
    lag = laguerre_table(n_max, order, x)
    pref = np.exp(-x / 2 + 0.5 * (gammaln(n + 1) - gammaln(n + order + 1))) * eta**order
    g = pref * np.abs(lag)
    if not with_derivative:
        return g
    # d/dx L_n^a(x) = -L_{n-1}^{a+1}(x)
    dlag = np.zeros(n_max + 1)
    if n_max >= 1:
        dlag[1:] = -laguerre_table(n_max - 1, order + 1, x)
    dg = g * (-eta + order / eta) + pref * np.sign(lag) * dlag * 2 * eta
    return g, dg


def rabi_signal(populations, transition, times, cfg):
    """Excitation probability after a resonant probe for each duration in `times`."""
    p = np.asarray(populations, dtype=float)
    if np.any(p < 0) or abs(p.sum() - 1) > 1e-6:
        raise ValueError(f"populations must be a normalised distribution (sum={p.sum()!r})")
    freqs = cfg.omega0 * _overlaps(p.size - 1, probe_order(transition), cfg.lamb_dicke)
    t = np.asarray(times, dtype=float)
    out = np.sin(np.pi * np.multiply.outer(t, freqs)) ** 2 @ p
    return np.clip(out, 0.0, 1.0)


def tail_populations(p0, nbar_tail, n_max, with_derivative=False):
    """p0 at n=0 plus (1 - p0) x thermal(nbar_tail) renormalised over n >= 1.

    The tail beyond n_max is folded into the last bin. With
    ``with_derivative`` also returns d/d(p0) and d/d(nbar_tail).
    """
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    r = nbar_tail / (nbar_tail + 1.0)
    k = np.arange(n_max)             # n - 1 for n = 1..n_max
    shape = np.empty(n_max + 1)
    shape[0] = 0.0
    shape[1:] = np.power(r, k) * (1 - r)
    shape[-1] = r ** (n_max - 1)
    pops = (1 - p0) * shape
    pops[0] = p0
    if not with_derivative:
        return pops
    d_p0 = -shape
    d_p0[0] = 1.0
    dshape = np.zeros(n_max + 1)
    km1 = np.power(r, np.maximum(k - 1, 0)) * np.where(k > 0, k, 0)
    dshape[1:] = km1 * (1 - r) - np.power(r, k)
    dshape[-1] = (n_max - 1) * r ** max(n_max - 2, 0) if n_max > 1 else 0.0
    d_nbar = (1 - p0) * dshape / (nbar_tail + 1.0) ** 2
    return pops, d_p0, d_nbar


def model_signal(params, transition, times, n_max, with_jacobian=False):
    """Rabi signal of the (p0, eta, nbar_tail, omega0) model, optionally with its Jacobian."""
    p0, eta, nbar, omega0 = params
    order = probe_order(transition)
    t = np.asarray(times, dtype=float)
    if not with_jacobian:
        g = _overlaps(n_max, order, eta)
        pops = tail_populations(p0, nbar, n_max)
        return np.sin(np.pi * np.multiply.outer(t, omega0 * g)) ** 2 @ pops
    g, dg = _overlaps(n_max, order, eta, with_derivative=True)
    pops, d_p0, d_nbar = tail_populations(p0, nbar, n_max, with_derivative=True)
    phase = np.pi * np.multiply.outer(t, omega0 * g)
    s2 = np.sin(phase) ** 2
    # d sin^2(phase) = sin(2 phase) d phase
    s2d = np.sin(2 * phase) * np.pi * t[:, None]
    jac = np.column_stack([
        s2 @ d_p0,
        (s2d * (omega0 * dg)) @ pops,
        s2 @ d_nbar,
        (s2d * g) @ pops,
    ])
    return s2 @ pops, jac


@dataclass(frozen=True)
class FitResult:
    p0: float
    eta: float
    nbar_tail: float
    omega0: float
    covariance: np.ndarray = field(default_factory=lambda: np.full((4, 4), np.nan))
    residual_rms: float = math.nan
    converged: bool = False
    degenerate: bool = False
    cost: float = math.nan
    message: str = ""

    @property
    def params(self):
        return np.array([self.p0, self.eta, self.nbar_tail, self.omega0])

    @property
    def stderr(self):
        return dict(zip(PARAMS, np.sqrt(np.abs(np.diag(self.covariance)))))

    def to_dict(self):
        err = self.stderr
        out = {name: float(getattr(self, name)) for name in PARAMS}
        out.update({f"{name}_err": _json_float(err[name]) for name in PARAMS})
        out.update({
            "covariance": [[_json_float(v) for v in row] for row in self.covariance],
            "residual_rms": _json_float(self.residual_rms),
            "converged": bool(self.converged),
            "degenerate": bool(self.degenerate),
            "message": self.message,
        })
        return out


def _json_float(v):
    v = float(v)
    return v if math.isfinite(v) else None


def binomial_sigma(excitation, shots):
    """sqrt(P(1-P)/N) floored at 1/(2N)."""
    p = np.asarray(excitation, dtype=float)
    shots = np.asarray(shots, dtype=float)
    return np.maximum(np.sqrt(p * (1 - p) / shots), 1.0 / (2 * shots))


DEFAULT_BOUNDS = {
    "p0": (0.0, 1.0),
    "eta": (0.01, 0.3),
    "nbar_tail": (0.0, 60.0),
    "omega0": (None, None),
}


def _resolve_bounds(bounds, guess):
    merged = dict(DEFAULT_BOUNDS)
    merged.update(bounds or {})
    lo, hi = [], []
    for name in PARAMS:
        a, b = merged[name]
        if name == "omega0":
            a = 0.5 * guess[3] if a is None else a
            b = 2.0 * guess[3] if b is None else b
        lo.append(a)
        hi.append(b)
    return np.array(lo, float), np.array(hi, float)


def _guess_vector(initial_guess):
    if isinstance(initial_guess, FitResult):
        return initial_guess.params.astype(float)
    if isinstance(initial_guess, dict):
        return np.array([initial_guess[k] for k in PARAMS], dtype=float)
    return np.asarray(initial_guess, dtype=float)


def _start_points(guess, lo, hi, n_starts, omega0_prior):
    rng = np.random.default_rng(0)
    starts = [guess]
    for _ in range(n_starts - 1):
        x = guess.copy()
        x[0] = rng.uniform(0.05, 0.95)
        x[1] = guess[1] * rng.uniform(0.85, 1.15)
        x[2] = guess[2] * rng.uniform(0.5, 1.5)
        width = omega0_prior if omega0_prior else 0.05
        x[3] = guess[3] * (1 + width * rng.uniform(-1, 1))
        starts.append(x)
    eps = 1e-9 * (hi - lo)
    return [np.clip(x, lo + eps, hi - eps) for x in starts]


def _fit(scan, guess, lo, hi, fixed, tie_p0, n_starts, omega0_prior, max_nfev, n_max):
    """Shared least-squares driver.

    `fixed` maps parameter index -> value held constant; with `tie_p0` the
    ground-state population is the thermal value 1/(nbar_tail + 1).
    """
    sigma = binomial_sigma(scan.excitation, scan.shots)
    free = [i for i in range(4) if i not in fixed and not (tie_p0 and i == 0)]
    prior_idx = 3 if (omega0_prior and 3 in free) else None

    def full(x):
        p = guess.copy()
        for i, v in fixed.items():
            p[i] = v
        p[free] = x
        if tie_p0:
            p[0] = 1.0 / (p[2] + 1.0)
        return p

    def residuals(x):
        model = model_signal(full(x), scan.transition, scan.times, n_max)
        r = (model - scan.excitation) / sigma
        if prior_idx is not None:
            r = np.append(r, (full(x)[3] - guess[3]) / (omega0_prior * guess[3]))
        return r

    def jacobian(x):
        p = full(x)
        _, jac = model_signal(p, scan.transition, scan.times, n_max, with_jacobian=True)
        if tie_p0:
            jac[:, 2] += jac[:, 0] * (-1.0 / (p[2] + 1.0) ** 2)
        jac = jac[:, free] / sigma[:, None]
        if prior_idx is not None:
            row = np.zeros(len(free))
            row[free.index(3)] = 1.0 / (omega0_prior * guess[3])
            jac = np.vstack([jac, row])
        return jac

    best = None
    for x0 in _start_points(guess, lo, hi, n_starts, omega0_prior):
        res = least_squares(residuals, x0[free], jac=jacobian, bounds=(lo[free], hi[free]),
                            method="trf", x_scale="jac", max_nfev=max_nfev)
        # strict < keeps the lowest start index on ties
        if best is None or res.cost < best.cost:
            best = res

    p = full(best.x)
    jac = jacobian(best.x)
    degenerate = _is_degenerate(p, jac, free, lo, hi, tie_p0)
    cov = np.full((4, 4), np.nan)
    if np.all(np.isfinite(jac)):
        sub = np.linalg.pinv(jac.T @ jac)
        cov = np.zeros((4, 4))
        for a, i in enumerate(free):
            for b, j in enumerate(free):
                cov[i, j] = sub[a, b]
        if tie_p0:
            d = -1.0 / (p[2] + 1.0) ** 2
            cov[0, 0] = d * d * cov[2, 2]
            cov[0, 2] = cov[2, 0] = d * cov[2, 2]
    data_res = (model_signal(p, scan.transition, scan.times, n_max) - scan.excitation) / sigma
    return FitResult(
        p0=float(p[0]), eta=float(p[1]), nbar_tail=float(p[2]), omega0=float(p[3]),
        covariance=cov,
        residual_rms=float(np.sqrt(np.mean(data_res**2))),
        converged=bool(best.status > 0),
        degenerate=degenerate,
        cost=float(best.cost),
        message=str(best.message),
    )


def _is_degenerate(p, jac, free, lo, hi, tie_p0):
    """True when the data cannot pin the fitted parameters.

    Either a shape parameter (eta, omega0, or nbar_tail at its upper end) was
    driven onto a bound, or the Jacobian of the parameters that still matter
    is rank deficient. With p0 = 1 the tail has no weight and nbar_tail is
    left out of the rank test.
    """
    span = hi - lo
    at_lo = p <= lo + 1e-6 * span
    at_hi = p >= hi - 1e-6 * span
    for i in (1, 3):
        if i in free and (at_lo[i] or at_hi[i]):
            return True
    if 2 in free and at_hi[2]:
        return True
    cols = []
    for k, i in enumerate(free):
        if at_lo[i] or at_hi[i]:
            continue
        if i == 2 and not tie_p0 and p[0] >= 1 - 1e-9:
            continue
        cols.append(k)
    if not cols:
        return False
    sv = np.linalg.svd(jac[:, cols], compute_uv=False)
    return bool(not np.all(np.isfinite(sv)) or sv[-1] <= 1e-8 * sv[0])


def fit_rabi(scan, initial_guess, bounds=None, n_starts=5, omega0_prior=0.01,
             max_nfev=200, tail_tol=1e-6):
    """Weighted least-squares fit of (p0, eta, nbar_tail, omega0) to a Rabi scan.

    Parameters
    ----------
    scan : RabiScan
    initial_guess : FitResult, dict or sequence
        Starting point ordered as (p0, eta, nbar_tail, omega0). Its omega0 also
        centres the Gaussian prior on the Rabi frequency.
    bounds : dict, optional
        Per-parameter ``(low, high)`` overriding ``DEFAULT_BOUNDS``.
    n_starts : int
        Number of starts; start 0 is the guess itself, the rest are jittered
        deterministically.
    omega0_prior : float or None
        Relative width of the prior on omega0; ``None`` lets it float freely.

    Returns
    -------
    FitResult
        ``converged`` is False when the iteration budget ran out;
        ``degenerate`` flags a rank-deficient Jacobian at the optimum.
    """
    guess = _guess_vector(initial_guess)
    lo, hi = _resolve_bounds(bounds, guess)
    if np.any(guess < lo) or np.any(guess > hi):
        raise ValueError("initial guess outside bounds")
    n_max = max(truncation_for(hi[2], tail_tol), 2)
    return _fit(scan, guess, lo, hi, {}, False, n_starts, omega0_prior, max_nfev, n_max)


@dataclass(frozen=True)
class NbarEstimate:
    nbar: float
    nbar_err: float
    omega0: float
    converged: bool
    wide_uncertainty: bool
    fit: FitResult


def estimate_nbar_from_carrier(scan, cfg, nbar_guess=10.0, nbar_max=100.0, n_starts=5,
                               tail_tol=1e-6):
    """Mean occupation from a carrier scan assuming a purely thermal state.

    Fits nbar and the carrier Rabi frequency with eta fixed to
    ``cfg.lamb_dicke``. ``wide_uncertainty`` is set when the scan shows too
    little decay to pin nbar (relative error above 50 %, or an undefined
    covariance).
    """
    if scan.transition != "carrier":
        raise ValueError("estimate_nbar_from_carrier needs a carrier scan")
    guess = np.array([1 / (nbar_guess + 1), cfg.lamb_dicke, nbar_guess, cfg.omega0])
    lo = np.array([0.0, cfg.lamb_dicke, 0.0, 0.5 * cfg.omega0])
    hi = np.array([1.0, cfg.lamb_dicke, nbar_max, 2.0 * cfg.omega0])
    n_max = max(truncation_for(nbar_max, tail_tol), 2)
    fit = _fit(scan, guess, lo, hi, {1: cfg.lamb_dicke}, True, n_starts, None, 300, n_max)
    err = fit.stderr["nbar_tail"]
    wide = (not math.isfinite(err)) or err > 0.5 * max(fit.nbar_tail, 1.0)
    return NbarEstimate(fit.nbar_tail, float(err), fit.omega0, fit.converged, bool(wide), fit)


def synthesize_scan(populations, transition, times, cfg, shots, rng=None):
    """Binomially sampled Rabi scan; ``rng=None`` returns the noiseless expectation."""
    p = rabi_signal(populations, transition, times, cfg)
    if rng is None:
        return RabiScan(np.asarray(times, float), p, shots, transition)
    counts = rng.binomial(int(shots), p)
    return RabiScan(np.asarray(times, float), counts / int(shots), shots, transition)


def thermal_scan_populations(nbar, tail_tol=1e-6):
    return thermal_probabilities(nbar, max(truncation_for(nbar, tail_tol), 1))


# scan I/O

def save_scan(scan, path, format="csv", header_lines=()):
    """Write `scan`; csv carries `# key=value` comment lines before the header."""
    path = Path(path)
    if format == "json":
        data = {"transition": scan.transition, "time_s": scan.times.tolist(),
                "excitation": scan.excitation.tolist(), "shots": scan.shots.tolist()}
        path.write_text(json.dumps(data, indent=2) + "\n", encoding="utf-8")
        return path
    if format != "csv":
        raise ValueError(f"unknown scan format {format!r}")
    buf = io.StringIO()
    for line in header_lines:
        buf.write(f"# {line}\n")
    buf.write(f"# transition={scan.transition}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for t, p, n in zip(scan.times, scan.excitation, scan.shots):
        writer.writerow([repr(float(t)), repr(float(p)), int(n)])
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path


def load_scan(path, format=None, transition=None):
    """Read a scan written by :func:`save_scan` (or any file following the CSV schema)."""
    path = Path(path)
    format = format or ("json" if path.suffix == ".json" else "csv")
    text = path.read_text(encoding="utf-8")
    if format == "json":
        data = json.loads(text)
        try:
            return RabiScan(data["time_s"], data["excitation"], data["shots"],
                            transition or data.get("transition", "blue_sideband"))
        except KeyError as err:
            raise ScanFormatError(f"missing field {err}") from None
    if format != "csv":
        raise ValueError(f"unknown scan format {format!r}")

    meta = {}
    header = None
    times, exc, shots = [], [], []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, sep, value = line[1:].strip().partition("=")
            if sep:
                meta[key.strip()] = value.strip()
            continue
        cells = [c.strip() for c in line.split(",")]
        if header is None:
            missing = [c for c in CSV_HEADER if c not in cells]
            if missing:
                raise ScanFormatError(f"missing columns {missing}", lineno)
            header = {name: cells.index(name) for name in CSV_HEADER}
            continue
        if len(cells) < len(header):
            raise ScanFormatError(f"expected {len(CSV_HEADER)} fields, got {len(cells)}", lineno)
        try:
            t = float(cells[header["time_s"]])
            p = float(cells[header["excitation"]])
            n = int(cells[header["shots"]])
        except ValueError as err:
            raise ScanFormatError(str(err), lineno) from None
        if not 0 <= p <= 1:
            raise ScanFormatError(f"excitation {p} outside [0, 1]", lineno)
        if n < 1:
            raise ScanFormatError(f"shots must be >= 1, got {n}", lineno)
        if times and t <= times[-1]:
            raise ScanFormatError("time_s must be strictly increasing", lineno)
        times.append(t)
        exc.append(p)
        shots.append(n)
    if header is None:
        raise ScanFormatError("no header row")
    if not times:
        raise ScanFormatError("no data rows")
    return RabiScan(times, exc, shots, transition or meta.get("transition", "blue_sideband"))
