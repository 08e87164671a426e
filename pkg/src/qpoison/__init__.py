"""Monte Carlo phonon transport and quasiparticle poisoning in qubit chips."""

__version__ = "0.1.0"
