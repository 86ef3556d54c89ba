"""Software model of a switch-offloaded selective forwarding unit."""

__version__ = "0.1.0"
