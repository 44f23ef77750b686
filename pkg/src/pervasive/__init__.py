"""Pervasive context management: manager/worker engine and opportunistic-cluster simulator."""

__version__ = "0.1.0"
