"""Desk-scale crowd counting, from scratch.

Dense multi-scale context encoding, an attention-guided decoder, density
map ground truth, multi-loss training and full evaluation metrics on a
small numpy autograd engine.  Submodules load lazily so the CLI can cap
BLAS threads before numpy comes up.
"""

import importlib

__version__ = "0.1.0"

_SUBMODULES = (
    "cli",
    "data",
    "density",
    "engine",
    "errors",
    "io",
    "losses",
    "metrics",
    "model",
    "train",
)


def __getattr__(name):
    if name in _SUBMODULES:
        return importlib.import_module("." + name, __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))
