"""Kernel backend selection.

The compiled GMP extension is used when it imports; otherwise the
pure-Python twin is used. Set ``FEDPERM_KERNELS=python`` to force the
fallback (the benchmark and the equivalence tests do this explicitly by
importing both modules).
"""

from __future__ import annotations

import os

from fedperm import _kernels_py

if os.environ.get("FEDPERM_KERNELS", "").lower() == "python":
    _impl = _kernels_py
else:
    try:
        from fedperm import _kernels as _impl  # type: ignore[attr-defined]
    except ImportError:
        _impl = _kernels_py

BACKEND: str = _impl.BACKEND
encrypt_batch = _impl.encrypt_batch
apply_windows = _impl.apply_windows
decrypt_batch = _impl.decrypt_batch

__all__ = ["BACKEND", "encrypt_batch", "apply_windows", "decrypt_batch"]
