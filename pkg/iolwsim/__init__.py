"""IO-Link Wireless security simulator."""

__version__ = "0.1.0"
