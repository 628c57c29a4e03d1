"""Proof-of-Stake wealth dynamics: urn simulation, trading strategies,
continuous-time control and a mean-field trading equilibrium."""

__version__ = "0.1.0"

from . import errors, hjb, metrics, mfg, rng, trading, urn  # noqa: E402

__all__ = ["errors", "hjb", "metrics", "mfg", "rng", "trading", "urn", "__version__"]
