"""GRU recurrence backend selection.

The compiled ``_gru_cy`` extension is used when it was built; otherwise the
numpy implementation in ``_gru_np`` takes over.  Both expose
``gru_forward(gx, lengths, u)`` and
``gru_backward(dh_last, lengths, u, hs, r, z, c)``.
"""

from __future__ import annotations

from . import _gru_np

try:
    from . import _gru_cy
except ImportError:  # extension not built
    _gru_cy = None

BACKENDS = {"numpy": _gru_np}
if _gru_cy is not None:
    BACKENDS["cython"] = _gru_cy

BACKEND = "cython" if _gru_cy is not None else "numpy"
_impl = BACKENDS[BACKEND]


def use_backend(name: str) -> None:
    """Switch the process-wide backend (``"cython"`` or ``"numpy"``)."""
    global BACKEND, _impl
    if name not in BACKENDS:
        raise ValueError(f"GRU backend {name!r} unavailable; have {sorted(BACKENDS)}")
    BACKEND = name
    _impl = BACKENDS[name]


def gru_forward(gx, lengths, u):
    return _impl.gru_forward(gx, lengths, u)


def gru_backward(dh_last, lengths, u, hs, r, z, c):
    return _impl.gru_backward(dh_last, lengths, u, hs, r, z, c)
