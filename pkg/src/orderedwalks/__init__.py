"""Random walks conditioned to keep their components ordered."""
from __future__ import annotations

__version__ = "0.1.0"
