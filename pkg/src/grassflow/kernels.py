"""Backend selection for the fused potential kernel.

The compiled extension ``grassflow._bundle_ext`` is used when it was built;
otherwise, or when ``GRASSFLOW_PURE_PYTHON=1`` is set, the numpy version in
``grassflow._bundle_py`` takes over.  Both expose ``bundle_forward`` and
``bundle_vjp`` with identical signatures and results that agree to
roundoff.
"""

from __future__ import annotations

import os

from . import _bundle_py

_python = _bundle_py
try:
    from . import _bundle_ext as _compiled
except ImportError:  # extension not built
    _compiled = None

_active = _python
if _compiled is not None and os.environ.get("GRASSFLOW_PURE_PYTHON", "") in ("", "0"):
    _active = _compiled


def available_backends() -> list[str]:
    return ["python"] + (["compiled"] if _compiled is not None else [])


def backend() -> str:
    return "compiled" if _active is _compiled and _compiled is not None else "python"


def use_backend(name: str) -> None:
    """Switch the process-wide backend ("python" or "compiled")."""
    global _active
    if name == "python":
        _active = _python
    elif name == "compiled":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not available in this build")
        _active = _compiled
    else:
        raise ValueError(f"unknown backend {name!r}")


def get_module(name: str | None = None):
    if name is None:
        return _active
    if name == "python":
        return _python
    if name == "compiled" and _compiled is not None:
        return _compiled
    raise ValueError(f"backend {name!r} is not available")


def bundle_forward(layers, z, zd, t, want_cache=True):
    return _active.bundle_forward(layers, z, zd, t, want_cache)


def bundle_vjp(cache, vbar, gbar, Qbar):
    # a cache always goes back to the implementation that produced it
    return cache_owner(cache).bundle_vjp(cache, vbar, gbar, Qbar)


def cache_owner(cache):
    if _compiled is not None and type(cache).__module__ == _compiled.__name__:
        return _compiled
    return _python
