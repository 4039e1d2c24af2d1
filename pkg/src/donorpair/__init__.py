"""Simulation of exchange-coupled donor spin qubits in silicon: Hamiltonians,
shaped-pulse excitation, two-qubit gate error budgets and ESR spectra."""

__version__ = "0.1.0"
