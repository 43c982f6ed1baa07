"""BlockFW: firewall rules distributed over a permissioned blockchain."""

__version__ = "0.1.0"
