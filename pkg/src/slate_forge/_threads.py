"""Process-wide worker cap: ``--threads`` or SLATE_FORGE_THREADS, else 1."""

import os

_override = None


def set_threads(n) -> None:
    global _override
    if n is not None and int(n) < 1:
        raise ValueError("thread count must be >= 1")
    _override = None if n is None else int(n)


def get_threads() -> int:
    if _override is not None:
        return _override
    env = os.environ.get("SLATE_FORGE_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return 1
