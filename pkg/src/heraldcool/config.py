"""Run configuration: YAML file + environment overrides + command-line flags.

Every key has a default reproducing the experimental operating point, so an
empty file is a valid configuration. Environment variables of the form
``HERALDCOOL_<SECTION>__<KEY>=<yaml value>`` override file values (meant for
CI); command-line flags override both.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

import yaml

from .fock import DEFAULT_LAMB_DICKE, ModeConfig
from .protocol import ProtocolConfig
from .pulse import RapPulse

ENV_PREFIX = "HERALDCOOL_"


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "seed": 0,
    "verbosity": 1,
    "output_dir": "out",
    "mode": {
        "trap_frequency": 1.06e6,
        "lamb_dicke": DEFAULT_LAMB_DICKE,
        "n_max": 255,
        "omega0": 83e3,
    },
    "carrier_pulse": {
        "duration": 35e-6,
        "chirp_range": 200e3,
        "peak_rabi": 83e3,
        "sideband_order": 0,
        "rabi_reference": "carrier",
        "envelope": "sin2",
        "n_time_samples": 2001,
    },
    "sideband_pulse": {
        "duration": 250e-6,
        "chirp_range": 40e3,
        "peak_rabi": 83e3,
        "sideband_order": 1,
        "rabi_reference": "carrier",
        "envelope": "sin2",
        "n_time_samples": 2001,
    },
    "thermal": {"nbar": 18.0, "tail_tol": 1e-6},
    "protocol": {
        "cycles": 2,
        "detection_time": 1.5e-3,
        "detection_fidelity": 0.995,
        "heating_rate": 37.0,
        "shots": 900,
        "forced_transfer": None,
        "epsilon": 0.05,
        "workers": 1,
    },
    "sweep": {
        "carrier": {"start": 5e-6, "stop": 100e-6, "num": 20},
        "sideband": {"start": 10e-6, "stop": 300e-6, "num": 30},
        "rtol": 1e-10,
    },
    "rabi": {
        "source": "model",
        "transition": "blue_sideband",
        "start": 0.0,
        "stop": 500e-6,
        "points": 50,
        "shots": 900,
        "epsilon": 0.05,
        "p0": 0.96,
        "nbar_tail": 18.0,
        "cycles": 2,
        "probe_omega0": None,
    },
    "fit": {
        "input": None,
        "mode": "auto",
        "p0": 0.5,
        "eta": None,
        "nbar_tail": 10.0,
        "omega0": None,
        "omega0_prior": 0.01,
        "n_starts": 5,
    },
}

_TYPES = {
    "seed": int, "verbosity": int, "output_dir": str,
    "mode": {"trap_frequency": float, "lamb_dicke": float, "n_max": int, "omega0": float},
    "carrier_pulse": {"duration": float, "chirp_range": float, "peak_rabi": float,
                      "sideband_order": int, "rabi_reference": str, "envelope": str,
                      "n_time_samples": int},
    "thermal": {"nbar": float, "tail_tol": float},
    "protocol": {"cycles": int, "detection_time": float, "detection_fidelity": float,
                 "heating_rate": float, "shots": int, "forced_transfer": float,
                 "epsilon": float, "workers": int},
    "sweep": {"carrier": {"start": float, "stop": float, "num": int, "durations": list},
              "sideband": {"start": float, "stop": float, "num": int, "durations": list},
              "rtol": float},
    "rabi": {"source": str, "transition": str, "start": float, "stop": float, "points": int,
             "shots": int, "epsilon": float, "p0": float, "nbar_tail": float, "cycles": int,
             "probe_omega0": float},
    "fit": {"input": str, "mode": str, "p0": float, "eta": float, "nbar_tail": float,
            "omega0": float, "omega0_prior": float, "n_starts": int},
}
_TYPES["sideband_pulse"] = _TYPES["carrier_pulse"]


def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for key, value in (override or {}).items():
        where = f"{path}{key}"
        if key not in base and not (path.startswith("sweep.") and key == "durations"):
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base.get(key), dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where!r} must be a mapping")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = value
    return out


def _coerce(data, types, path=""):
    for key, kind in types.items():
        if key not in data:
            continue
        where = f"{path}{key}"
        value = data[key]
        if isinstance(kind, dict):
            _coerce(value, kind, where + ".")
            continue
        if value is None:
            continue
        try:
            if kind is int:
                if isinstance(value, bool) or float(value) != int(float(value)):
                    raise ValueError
                data[key] = int(float(value))
            elif kind is float:
                if isinstance(value, bool):
                    raise ValueError
                data[key] = float(value)
            elif kind is list:
                data[key] = [float(v) for v in value]
            else:
                data[key] = str(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{where!r}: cannot interpret {value!r} as {kind.__name__}") from None


def env_overrides(environ=None):
    """Nested mapping built from HERALDCOOL_SECTION__KEY variables."""
    environ = os.environ if environ is None else environ
    out = {}
    for name, raw in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        parts = [p.lower() for p in name[len(ENV_PREFIX):].split("__") if p]
        if not parts:
            continue
        node = out
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = yaml.safe_load(raw)
    return out


@dataclass(frozen=True)
class RunConfig:
    """Validated, fully resolved configuration of one CLI run."""

    data: dict

    @classmethod
    def from_mapping(cls, mapping=None, environ=None, flags=None):
        data = _merge(DEFAULTS, mapping or {})
        data = _merge(DEFAULTS, _merge(data, env_overrides(environ)))
        for path, value in (flags or {}).items():
            if value is None:
                continue
            node = data
            *head, last = path.split(".")
            for part in head:
                node = node[part]
            node[last] = value
        _coerce(data, _TYPES)
        cfg = cls(data)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path=None, environ=None, flags=None):
        mapping = {}
        if path is not None:
            text = Path(path).read_text(encoding="utf-8")
            try:
                mapping = yaml.safe_load(text) or {}
            except yaml.YAMLError as err:
                raise ConfigError(f"{path}: {err}") from None
            if not isinstance(mapping, dict):
                raise ConfigError(f"{path}: top level must be a mapping")
        return cls.from_mapping(mapping, environ, flags)

    def validate(self):
        """Build every nested object once so that errors surface before any work."""
        try:
            self.mode()
            self.protocol()
            self.sweep_grid("carrier")
            self.sweep_grid("sideband")
        except (TypeError, ValueError) as err:
            raise ConfigError(str(err)) from None
        rabi = self.data["rabi"]
        if rabi["transition"] not in ("carrier", "red_sideband", "blue_sideband"):
            raise ConfigError(f"rabi.transition {rabi['transition']!r} not recognised")
        if rabi["source"] not in ("model", "thermal", "protocol"):
            raise ConfigError(f"rabi.source {rabi['source']!r} not recognised")
        if rabi["points"] < 1 or rabi["shots"] < 1 or rabi["stop"] <= rabi["start"]:
            raise ConfigError("rabi grid needs points >= 1, shots >= 1 and stop > start")
        if self.data["fit"]["mode"] not in ("auto", "p0", "nbar"):
            raise ConfigError("fit.mode must be 'auto', 'p0' or 'nbar'")
        if self.data["protocol"]["workers"] < 1:
            raise ConfigError("protocol.workers must be >= 1")
        if self.data["seed"] < 0 or self.data["seed"] >= 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")

    @property
    def seed(self):
        return self.data["seed"]

    @property
    def output_dir(self):
        return Path(self.data["output_dir"])

    def mode(self, **changes):
        return ModeConfig(**{**self.data["mode"], **changes})

    def pulse(self, which):
        return RapPulse(**self.data[f"{which}_pulse"])

    def protocol(self):
        p = self.data["protocol"]
        return ProtocolConfig(
            nbar=self.data["thermal"]["nbar"],
            cycles=p["cycles"],
            detection_time=p["detection_time"],
            detection_fidelity=p["detection_fidelity"],
            heating_rate=p["heating_rate"],
            carrier_pulse=self.pulse("carrier"),
            sideband_pulse=self.pulse("sideband"),
            shots=p["shots"],
            rng_seed=self.seed,
            mode=self.mode(),
            forced_transfer=p["forced_transfer"],
            tail_tol=self.data["thermal"]["tail_tol"],
        )

    def sweep_grid(self, which):
        import numpy as np

        opts = self.data["sweep"][which]
        if opts.get("durations") is not None:
            grid = np.asarray(opts["durations"], dtype=float)
        else:
            if opts["num"] < 0:
                raise ValueError(f"sweep.{which}.num must be >= 0")
            grid = np.linspace(opts["start"], opts["stop"], opts["num"])
        if np.any(grid <= 0):
            raise ValueError(f"sweep.{which} durations must be > 0")
        return grid

    def digest(self):
        """Short sha256 of the result-determining settings (output path and verbosity excluded)."""
        data = {k: v for k, v in self.data.items() if k not in ("output_dir", "verbosity")}
        blob = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]
