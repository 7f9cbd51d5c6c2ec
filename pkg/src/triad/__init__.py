"""Three-path domain-bridging trainer on a small verifiable numerical core."""

__version__ = "0.1.0"
