"""Convolution kernel backend, chosen once at import.

The compiled extension is used when it imports cleanly; setting
``FICD_PURE_PYTHON=1`` forces the numpy fallback.
"""
import os

from . import _fallback

KERNELS = ("conv_forward", "conv_backward_input", "conv_backward_weight")


def load(name):
    if name == "python":
        return _fallback
    if name == "cython":
        from . import _kernels
        return _kernels
    raise ValueError(f"unknown backend {name!r}")


def available():
    names = ["python"]
    try:
        load("cython")
    except ImportError:
        return names
    return names + ["cython"]


def use(name):
    """Switch the active backend (tests and benchmarks)."""
    global NAME, conv_forward, conv_backward_input, conv_backward_weight
    mod = load(name)
    NAME = name
    conv_forward = mod.conv_forward
    conv_backward_input = mod.conv_backward_input
    conv_backward_weight = mod.conv_backward_weight


if os.environ.get("FICD_PURE_PYTHON", "") in ("1", "true", "yes") or "cython" not in available():
    use("python")
else:
    use("cython")
