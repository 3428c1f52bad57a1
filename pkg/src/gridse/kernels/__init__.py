"""Quadratic-form measurement kernels.

Every SCADA quantity is a quadratic form v^T H_m v.  All H_m are packed into a
single COO block (both triangles of each symmetric matrix stored explicitly)
so the hot loops -- forward evaluation, Jacobian rows, and the batched
products used in training -- run over flat arrays.  A compiled extension
provides the fast path; a numpy/scipy implementation is selected automatically
when the extension is unavailable.  Set GRIDSE_KERNEL=python|native to force a
backend.
"""

import os

import numpy as np

from ..errors import ConfigError, DimensionError
from . import _purepy

try:
    from . import _native
except ImportError:
    _native = None


class _NativeEngine:
    def __init__(self, vals, rows, cols, starts, n_state):
        self.args = (vals, rows, cols, starts)

    def values(self, v, out):
        _native.quad_values(*self.args, v, out)

    def jacobian(self, v, out):
        _native.quad_jacobian(*self.args, v, out)

    def values_batch(self, V, out):
        _native.quad_values_batch(*self.args, V, out)

    def vjp_batch(self, V, G, out):
        _native.quad_vjp_batch(*self.args, V, G, out)


_ENGINES = {"python": _purepy.Engine, "native": _NativeEngine}


def available_backends():
    names = ["python"]
    if _native is not None:
        names.insert(0, "native")
    return names


def _pick_default():
    forced = os.environ.get("GRIDSE_KERNEL", "").strip().lower()
    if forced:
        if forced not in _ENGINES:
            raise ConfigError(f"unknown GRIDSE_KERNEL value {forced!r}")
        if forced == "native" and _native is None:
            raise ConfigError("GRIDSE_KERNEL=native but the compiled kernels are not built")
        return forced
    return "native" if _native is not None else "python"


_default_backend = _pick_default()


def default_backend():
    return _default_backend


def set_default_backend(name):
    global _default_backend
    if name not in available_backends():
        raise ConfigError(f"backend {name!r} not available (have {available_backends()})")
    _default_backend = name


class QuadFormPack:
    """Shared COO storage for a list of symmetric matrices H_m.

    vals/rows/cols hold the nonzero entries of every H_m concatenated in meter
    order; starts[m]:starts[m+1] is meter m's slice.  Both (i, j) and (j, i)
    are stored, so v^T H_m v = sum vals*v[rows]*v[cols] and the gradient
    2 H_m v needs no symmetry factor.
    """

    def __init__(self, n_meters, n_state, rows, cols, vals, starts):
        self.n_meters = int(n_meters)
        self.n_state = int(n_state)
        self.rows = np.ascontiguousarray(rows, dtype=np.int64)
        self.cols = np.ascontiguousarray(cols, dtype=np.int64)
        self.vals = np.ascontiguousarray(vals, dtype=np.float64)
        self.starts = np.ascontiguousarray(starts, dtype=np.int64)
        if len(self.starts) != self.n_meters + 1 or self.starts[0] != 0:
            raise DimensionError("bad meter slice table")
        if self.starts[-1] != len(self.vals) or np.any(np.diff(self.starts) < 0):
            raise DimensionError("meter slices do not cover the value block")
        if len(self.rows) != len(self.vals) or len(self.cols) != len(self.vals):
            raise DimensionError("rows/cols/vals length mismatch")
        if len(self.rows) and (self.rows.max() >= n_state or self.cols.max() >= n_state):
            raise DimensionError("state index out of range")
        self._engines = {}

    def _engine(self, backend=None):
        name = backend or _default_backend
        if name not in self._engines:
            if name not in available_backends():
                raise ConfigError(f"backend {name!r} not available")
            self._engines[name] = _ENGINES[name](
                self.vals, self.rows, self.cols, self.starts, self.n_state
            )
        return self._engines[name]

    def _check_state(self, v):
        if v.shape[-1] != self.n_state:
            raise DimensionError(
                f"state length {v.shape[-1]} != {self.n_state}"
            )

    def values(self, v, backend=None):
        v = np.ascontiguousarray(v, dtype=np.float64)
        self._check_state(v)
        out = np.empty(self.n_meters)
        self._engine(backend).values(v, out)
        return out

    def jacobian(self, v, backend=None):
        v = np.ascontiguousarray(v, dtype=np.float64)
        self._check_state(v)
        out = np.empty((self.n_meters, self.n_state))
        self._engine(backend).jacobian(v, out)
        return out

    def values_batch(self, V, backend=None):
        V = np.ascontiguousarray(V, dtype=np.float64)
        self._check_state(V)
        out = np.empty((V.shape[0], self.n_meters))
        self._engine(backend).values_batch(V, out)
        return out

    def vjp_batch(self, V, G, backend=None):
        V = np.ascontiguousarray(V, dtype=np.float64)
        G = np.ascontiguousarray(G, dtype=np.float64)
        self._check_state(V)
        if G.shape != (V.shape[0], self.n_meters):
            raise DimensionError(f"cotangent shape {G.shape} does not match")
        out = np.empty_like(V)
        self._engine(backend).vjp_batch(V, G, out)
        return out

    def dense(self, m):
        """Reconstruct H_m as a dense matrix (tests and small problems)."""
        if not 0 <= m < self.n_meters:
            raise DimensionError(f"meter index {m} out of range")
        H = np.zeros((self.n_state, self.n_state))
        s, e = self.starts[m], self.starts[m + 1]
        np.add.at(H, (self.rows[s:e], self.cols[s:e]), self.vals[s:e])
        return H
