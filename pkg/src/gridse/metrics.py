"""Rotation-aligned accuracy metrics and report serialization.

Every quadratic measurement is invariant under a global phase rotation of
the state, so raw componentwise error is not meaningful.  Estimates are
first aligned to the reference by the closed-form optimal rotation angle;
magnitude errors need no alignment, angle errors are computed after it.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .autodiff import huber_value
from .errors import DimensionError


def _as_batch(V):
    V = np.atleast_2d(np.asarray(V, dtype=float))
    if V.shape[-1] % 2:
        raise DimensionError(f"state length must be even, got {V.shape[-1]}")
    return V


def to_phasors(V):
    """Interleaved real state (..., 2N) -> complex bus voltages (..., N)."""
    V = np.asarray(V, dtype=float)
    if V.shape[-1] % 2:
        raise DimensionError(f"state length must be even, got {V.shape[-1]}")
    return V[..., 0::2] + 1j * V[..., 1::2]


def _overlap(Vhat, Vstar):
    """Per-sample inner product sum_n vhat_n * conj(vstar_n)."""
    return np.sum(to_phasors(Vhat) * np.conj(to_phasors(Vstar)), axis=-1)


def rotation_offset(Vhat, Vstar):
    """Per-sample global phase angle that best aligns Vhat onto Vstar."""
    return np.angle(_overlap(Vhat, Vstar))


def aligned_sqerror(Vhat, Vstar):
    """Per-sample squared state error minimized over a global rotation.

    The minimizer is the overlap phase; evaluating the rotated difference
    directly (rather than ||a||^2 + ||b||^2 - 2|s|) stays accurate when the
    aligned error is many orders below the state norm.
    """
    theta = np.asarray(np.angle(_overlap(Vhat, Vstar)))
    diff = to_phasors(Vhat) * np.exp(-1j * theta)[..., None] - to_phasors(Vstar)
    return np.sum(np.abs(diff) ** 2, axis=-1)


def aligned_state_rmse(Vhat, Vstar):
    """RMSE per real state component after optimal rotation alignment."""
    Vhat, Vstar = _as_batch(Vhat), _as_batch(Vstar)
    if Vhat.shape != Vstar.shape:
        raise DimensionError(f"shapes {Vhat.shape} and {Vstar.shape} differ")
    return float(np.sqrt(np.sum(aligned_sqerror(Vhat, Vstar)) / Vhat.size))


def vm_errors(Vhat, Vstar):
    """Per-sample per-bus voltage-magnitude errors (rotation invariant)."""
    return np.abs(to_phasors(_as_batch(Vhat))) - np.abs(to_phasors(_as_batch(Vstar)))


def va_errors(Vhat, Vstar, offsets=None):
    """Per-sample per-bus angle errors after rotation alignment, wrapped."""
    Vhat, Vstar = _as_batch(Vhat), _as_batch(Vstar)
    if offsets is None:
        offsets = rotation_offset(Vhat, Vstar)
    ph = to_phasors(Vhat) * np.exp(-1j * np.asarray(offsets))[..., None]
    return np.angle(ph * np.conj(to_phasors(Vstar)))


def _rmse(err, axis=None):
    return np.sqrt(np.mean(np.asarray(err) ** 2, axis=axis))


def residual_norms(Z, Vhat, mm):
    """Per-sample measurement residual norms ||z - h(vhat)||."""
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    return np.linalg.norm(Z - mm.evaluate_batch(_as_batch(Vhat)), axis=-1)


@dataclass
class MetricsReport:
    """Aggregate and per-bus accuracy of one estimation method."""

    method: str
    n_samples: int
    aligned_rmse: float
    vm_rmse: float
    va_rmse: float
    mean_huber: float
    rotation_offset: float
    vm_rmse_bus: np.ndarray
    va_rmse_bus: np.ndarray
    residual_norm: float = float("nan")
    runtime_per_sample: float = float("nan")
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        d = {
            "method": self.method,
            "n_samples": int(self.n_samples),
            "aligned_rmse": float(self.aligned_rmse),
            "vm_rmse": float(self.vm_rmse),
            "va_rmse": float(self.va_rmse),
            "mean_huber": float(self.mean_huber),
            "rotation_offset": float(self.rotation_offset),
            "vm_rmse_bus": [float(x) for x in self.vm_rmse_bus],
            "va_rmse_bus": [float(x) for x in self.va_rmse_bus],
            "residual_norm": float(self.residual_norm),
            "runtime_per_sample": float(self.runtime_per_sample),
        }
        if self.extra:
            d["extra"] = {k: float(v) if isinstance(v, (int, float, np.floating))
                          else v for k, v in self.extra.items()}
        return d

    def to_json(self, indent=2):
        return json.dumps(self.to_dict(), indent=indent)


def evaluate(method, Vhat, Vstar, Z=None, mm=None, runtime_per_sample=float("nan"),
             delta=1.0, extra=None):
    """Score estimates against reference states; optionally add residuals."""
    Vhat, Vstar = _as_batch(Vhat), _as_batch(Vstar)
    if Vhat.shape != Vstar.shape:
        raise DimensionError(
            f"estimate shape {Vhat.shape} does not match reference {Vstar.shape}"
        )
    offsets = rotation_offset(Vhat, Vstar)
    vm = vm_errors(Vhat, Vstar)
    va = va_errors(Vhat, Vstar, offsets)
    resid = float("nan")
    if Z is not None and mm is not None:
        resid = float(np.mean(residual_norms(Z, Vhat, mm)))
    return MetricsReport(
        method=method,
        n_samples=Vhat.shape[0],
        aligned_rmse=aligned_state_rmse(Vhat, Vstar),
        vm_rmse=float(_rmse(vm)),
        va_rmse=float(_rmse(va)),
        mean_huber=huber_value(Vhat, Vstar, delta),
        rotation_offset=float(np.angle(np.mean(np.exp(1j * offsets)))),
        vm_rmse_bus=_rmse(vm, axis=0),
        va_rmse_bus=_rmse(va, axis=0),
        residual_norm=resid,
        runtime_per_sample=float(runtime_per_sample),
        extra=dict(extra or {}),
    )


def profile_rows(method, V):
    """Tidy (slot, bus, quantity, method, value) rows of voltage profiles."""
    ph = to_phasors(_as_batch(V))
    vm, va = np.abs(ph), np.angle(ph)
    for t in range(ph.shape[0]):
        for n in range(ph.shape[1]):
            yield (t, n, "vm", method, float(vm[t, n]))
            yield (t, n, "va", method, float(va[t, n]))
