"""Decentralised strategies for LQ mean-field games and teams with backward dynamics."""
from __future__ import annotations

__version__ = "0.1.0"
