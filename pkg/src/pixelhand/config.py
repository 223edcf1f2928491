"""Line-oriented key=value config files and environment-driven limits."""

from __future__ import annotations

import os

from .errors import ParseError


def load_config(path) -> dict:
    """Parse `key = value` lines into a string dict; # starts a comment."""
    out = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParseError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
            key, value = line.split("=", 1)
            key = key.strip()
            if not key:
                raise ParseError(f"{path}:{lineno}: empty key")
            out[key] = value.strip()
    return out


def thread_limit(default: int = 4) -> int:
    """Worker cap for internally parallel stages, from PIXELHAND_THREADS."""
    raw = os.environ.get("PIXELHAND_THREADS")
    if raw is None:
        return max(1, default)
    try:
        n = int(raw)
    except ValueError:
        raise ParseError(f"PIXELHAND_THREADS={raw!r} is not an integer") from None
    return max(1, n)
