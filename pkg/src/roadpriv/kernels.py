"""Kernel backend selection.

The compiled extension is used when it imports cleanly; otherwise the
pure-Python implementations are used. Setting ``ROADPRIV_PURE_PYTHON=1``
forces the fallback (used by the benchmark and the backend parity tests).
"""
from __future__ import annotations

import os

from . import _pykernels

python_backend = _pykernels

compiled_backend = None
if os.environ.get("ROADPRIV_PURE_PYTHON") != "1":
    try:
        from . import _ckernels as compiled_backend  # type: ignore[no-redef]
    except ImportError:  # pragma: no cover - depends on build
        compiled_backend = None

_active = compiled_backend if compiled_backend is not None else python_backend

BACKEND = "compiled" if _active is compiled_backend else "python"

dijkstra = _active.dijkstra
node2vec_walks = _active.node2vec_walks
