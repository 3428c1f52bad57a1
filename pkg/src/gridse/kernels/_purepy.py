"""Pure numpy/scipy fallback for the quadratic-form kernels.

Same contract as the compiled module: every measurement is a sparse symmetric
matrix H_m stored in one shared COO block (both triangles present), and the
engine evaluates v^T H_m v, its Jacobian rows 2 v^T H_m, and the batched
forward/vector-Jacobian products used in training.
"""

import numpy as np
import scipy.sparse as sp


class Engine:
    def __init__(self, vals, rows, cols, starts, n_state):
        self.vals = vals
        self.rows = rows
        self.cols = cols
        self.starts = starts
        self.n_state = n_state
        n_meters = len(starts) - 1
        n_terms = len(vals)
        self.meter_idx = np.repeat(
            np.arange(n_meters, dtype=np.int64), np.diff(starts)
        )
        term_ids = np.arange(n_terms, dtype=np.int64)
        # scatter operators: term value -> meter sum, term value -> state slot
        self._to_meter = sp.csr_matrix(
            (vals, (self.meter_idx, term_ids)), shape=(n_meters, n_terms)
        )
        self._to_row = sp.csr_matrix(
            (vals, (rows, term_ids)), shape=(n_state, n_terms)
        )
        self._to_col = sp.csr_matrix(
            (vals, (cols, term_ids)), shape=(n_state, n_terms)
        )

    def values(self, v, out):
        w = self.vals * v[self.rows] * v[self.cols]
        out[:] = np.bincount(self.meter_idx, weights=w, minlength=len(out))

    def jacobian(self, v, out):
        out[:] = 0.0
        np.add.at(out, (self.meter_idx, self.rows), self.vals * v[self.cols])
        np.add.at(out, (self.meter_idx, self.cols), self.vals * v[self.rows])

    def values_batch(self, V, out):
        w = V[:, self.rows] * V[:, self.cols]
        out[:] = (self._to_meter @ w.T).T

    def vjp_batch(self, V, G, out):
        g = G[:, self.meter_idx]
        out[:] = (self._to_row @ (g * V[:, self.cols]).T).T
        out += (self._to_col @ (g * V[:, self.rows]).T).T
