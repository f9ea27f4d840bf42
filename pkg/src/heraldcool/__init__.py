"""Heralded ground-state preparation of a trapped-ion motional mode.

Modules: ``fock`` (thermal states, Lamb-Dicke couplings), ``pulse`` (RAP
schedules), ``dynamics`` (Schroedinger integration), ``protocol`` (Monte Carlo
of the herald sequence and closed forms), ``analysis`` (Rabi-scan synthesis
and fitting) and ``cli``.
"""

__version__ = "0.1.0"
