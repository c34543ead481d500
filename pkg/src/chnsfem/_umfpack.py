"""Minimal ctypes binding to the system UMFPACK sparse LU.

Used as the default preconditioner factorization when the shared
library is present; callers fall back to SuperLU otherwise.  Only the
long-integer double-precision entry points are wrapped, and iterative
refinement is disabled (the factorization backs a Krylov method that
already controls the residual).
"""

from __future__ import annotations

import ctypes
import ctypes.util
from typing import Optional

import numpy as np
import scipy.sparse as sp

_UMFPACK_A = 0          # solve A x = b
_UMFPACK_STRATEGY = 5   # Control index: pivot/ordering strategy
_UMFPACK_IRSTEP = 7     # Control index: refinement steps
_UMFPACK_STRATEGY_SYMMETRIC = 3
_UMFPACK_OK = 0

_lib = None
_searched = False


def _load():
    global _lib, _searched
    if _searched:
        return _lib
    _searched = True
    for name in ("libumfpack.so.5", "libumfpack.so",
                 ctypes.util.find_library("umfpack")):
        if not name:
            continue
        try:
            _lib = ctypes.CDLL(name)
            break
        except OSError:
            continue
    return _lib


def available() -> bool:
    return _load() is not None


def _ptr(a: np.ndarray):
    return a.ctypes.data_as(ctypes.c_void_p)


class UmfpackFactor:
    """LU factorization of a CSC matrix, symbolic analysis reused.

    ``factor(A)`` refreshes the numeric factorization; the symbolic one
    is recomputed only when the sparsity pattern changes.  ``solve`` and
    ``__call__`` apply the inverse.
    """

    def __init__(self):
        self._lib = _load()
        if self._lib is None:
            raise RuntimeError("UMFPACK shared library not found")
        self._control = np.zeros(20)
        self._lib.umfpack_dl_defaults(_ptr(self._control))
        self._control[_UMFPACK_IRSTEP] = 0.0
        self._symbolic = ctypes.c_void_p()
        self._numeric = ctypes.c_void_p()
        self._pattern = None
        self._Ap = self._Ai = self._Ax = None
        self._n = 0

    def _free_numeric(self):
        if self._numeric:
            self._lib.umfpack_dl_free_numeric(ctypes.byref(self._numeric))
            self._numeric = ctypes.c_void_p()

    def _free_symbolic(self):
        if self._symbolic:
            self._lib.umfpack_dl_free_symbolic(ctypes.byref(self._symbolic))
            self._symbolic = ctypes.c_void_p()

    def __del__(self):
        try:
            self._free_numeric()
            self._free_symbolic()
        except Exception:
            pass

    def factor(self, A) -> "UmfpackFactor":
        A = sp.csc_matrix(A) if not sp.isspmatrix_csc(A) else A
        n = A.shape[0]
        Ap = np.ascontiguousarray(A.indptr, dtype=np.int64)
        Ai = np.ascontiguousarray(A.indices, dtype=np.int64)
        Ax = np.ascontiguousarray(A.data, dtype=np.float64)
        pattern = (n, len(Ai))
        same = (self._pattern == pattern and self._Ap is not None
                and np.array_equal(self._Ap, Ap)
                and np.array_equal(self._Ai, Ai))
        if not same:
            self._free_symbolic()
            status = self._lib.umfpack_dl_symbolic(
                ctypes.c_longlong(n), ctypes.c_longlong(n), _ptr(Ap),
                _ptr(Ai), _ptr(Ax), ctypes.byref(self._symbolic),
                _ptr(self._control), None)
            if status != _UMFPACK_OK:
                raise RuntimeError(f"umfpack symbolic failed ({status})")
            self._pattern = pattern
        self._free_numeric()
        status = self._lib.umfpack_dl_numeric(
            _ptr(Ap), _ptr(Ai), _ptr(Ax), self._symbolic,
            ctypes.byref(self._numeric), _ptr(self._control), None)
        if status != _UMFPACK_OK:
            raise RuntimeError(f"umfpack numeric failed ({status})")
        self._Ap, self._Ai, self._Ax, self._n = Ap, Ai, Ax, n
        return self

    def solve(self, b: np.ndarray) -> np.ndarray:
        if not self._numeric:
            raise RuntimeError("factor() has not been called")
        b = np.ascontiguousarray(b, dtype=np.float64)
        x = np.zeros(self._n)
        status = self._lib.umfpack_dl_solve(
            ctypes.c_longlong(_UMFPACK_A), _ptr(self._Ap), _ptr(self._Ai),
            _ptr(self._Ax), _ptr(x), _ptr(b), self._numeric,
            _ptr(self._control), None)
        if status != _UMFPACK_OK:
            raise RuntimeError(f"umfpack solve failed ({status})")
        return x

    __call__ = solve
