"""Classical estimators: Gauss-Newton and prior-regularized alternating
minimization over the quadratic measurement model.

All quadratic SCADA quantities are invariant under a global voltage rotation,
so J^T J is exactly singular along the gauge tangent at every state.  With
lam=0 the solvers therefore deflate that one known direction (a rank-one
shift matched to the matrix scale) before factorizing; ill-posedness beyond
the gauge still surfaces as a condition-estimate failure.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .errors import ConfigError, IllPosedError
from .measurement import rotation_generator


@dataclass
class SolverOptions:
    max_iter: int = 20
    tol: float = 1e-10           # on the step norm ||v_{i+1} - v_i||
    lam: float = 0.0
    rcond_floor: float = 1e-12
    gauge_fix: bool = True

    def __post_init__(self):
        if self.max_iter < 1:
            raise ConfigError(f"max_iter must be >= 1, got {self.max_iter}")
        if not self.tol > 0.0:
            raise ConfigError(f"tol must be > 0, got {self.tol}")
        if self.lam < 0.0:
            raise ConfigError(f"lam must be >= 0, got {self.lam}")


@dataclass
class SolveReport:
    v: np.ndarray
    iterations: int
    residuals: list              # ||z - h(v_i)||, length iterations + 1
    converged: bool


def _factor(nmat, rcond_floor, context):
    anorm = np.abs(nmat).sum(axis=0).max()
    try:
        cf = sla.cho_factor(nmat, check_finite=False)
    except sla.LinAlgError:
        raise IllPosedError(
            f"{context}: normal matrix is not positive definite; "
            "the selection may be unobservable (try lam > 0)"
        ) from None
    pocon = sla.get_lapack_funcs("pocon", (nmat,))
    rcond, info = pocon(cf[0], anorm)
    if info != 0 or not np.isfinite(rcond) or rcond < rcond_floor:
        raise IllPosedError(
            f"{context}: normal matrix numerically singular "
            f"(condition estimate {rcond:.2e}); try lam > 0"
        )
    return cf


def _normal_matrix(J, v, lam, gauge_fix):
    nmat = J.T @ J
    n = nmat.shape[0]
    if lam > 0.0:
        nmat[np.diag_indices(n)] += lam
    elif gauge_fix:
        g = rotation_generator(v)
        gg = g @ g
        if gg > 0.0:
            scale = np.trace(nmat) / n
            nmat += (scale / gg) * np.outer(g, g)
    return nmat


def _iterate(z, mm, v0, opts, prior):
    z = np.asarray(z, dtype=float)
    v = np.array(v0, dtype=float)
    residuals = [float(np.linalg.norm(z - mm.evaluate(v)))]
    converged = False
    it = 0
    for it in range(1, opts.max_iter + 1):
        h = mm.evaluate(v)
        J = mm.jacobian(v)
        rhs = J.T @ (z - h)
        if prior is not None:
            rhs += opts.lam * (prior(v) - v)
        nmat = _normal_matrix(J, v, opts.lam, opts.gauge_fix)
        cf = _factor(nmat, opts.rcond_floor, f"iteration {it}")
        step = sla.cho_solve(cf, rhs, check_finite=False)
        v = v + step
        residuals.append(float(np.linalg.norm(z - mm.evaluate(v))))
        if np.linalg.norm(step) <= opts.tol:
            converged = True
            break
    return SolveReport(v=v, iterations=it, residuals=residuals, converged=converged)


def gauss_newton(z, mm, v0, opts=None):
    """v_{i+1} = v_i + (J^T J)^{-1} J^T (z - h(v_i)), solved by factorization."""
    opts = opts or SolverOptions()
    return _iterate(z, mm, v0, opts, prior=None)


def altmin_regularized(z, mm, prior, v0, opts=None):
    """Alternate u_i = prior(v_i) with the regularized linearized update.

    The update v_{i+1} = A_i z + B_i u_i + b_i (A_i = (J^T J + lam I)^{-1} J^T,
    B_i = lam (J^T J + lam I)^{-1}, b_i = A_i (J v_i - h(v_i))) is computed in
    the equivalent step form v_i + (J^T J + lam I)^{-1}(J^T (z - h) +
    lam (u_i - v_i)), one factorization per iteration.  With lam = 0 the
    iterates coincide with gauss_newton's exactly.
    """
    opts = opts or SolverOptions()
    return _iterate(z, mm, v0, opts, prior=prior)


def regularized_coefficients(J, h0, v0, lam, rcond_floor=1e-12):
    """Explicit (A, B, b) of the regularized linearized update at one state.

    Literal closed form, no gauge deflation: with lam = 0 and a
    rotation-invariant measurement set this raises IllPosedError.
    """
    n = J.shape[1]
    nmat = J.T @ J
    nmat[np.diag_indices(n)] += lam
    cf = _factor(nmat, rcond_floor, "linearization point")
    inv = sla.cho_solve(cf, np.eye(n), check_finite=False)
    A = inv @ J.T
    B = lam * inv
    b = A @ (J @ v0 - h0)
    return A, B, b
