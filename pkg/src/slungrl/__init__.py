"""Learning cooperative slung-payload transport with several UAVs."""

__version__ = "0.1.0"
