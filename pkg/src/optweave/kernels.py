"""Rollout kernel selection.

The compiled extension is used when it imports; otherwise the pure-Python
version. Set ``OPTWEAVE_PURE=1`` to force the fallback.
"""
import os

from ._kernels_py import FAILURE, RUNNING, SUCCESS
from ._kernels_py import simulate as simulate_py

simulate_ext = None
if os.environ.get("OPTWEAVE_PURE") != "1":
    try:
        from ._kernels import simulate as simulate_ext
    except ImportError:  # extension not built
        simulate_ext = None

simulate = simulate_ext if simulate_ext is not None else simulate_py
BACKEND = "cython" if simulate_ext is not None else "python"

__all__ = ["simulate", "simulate_py", "simulate_ext", "BACKEND", "RUNNING", "SUCCESS", "FAILURE"]
